//! Config-file loading and the effective-config echo.
//!
//! Files are TOML with one section per module: `[model]`, `[train]`,
//! `[generator]`. Every field is optional (defaults fill the gaps), unknown
//! keys are rejected, and command-line flags override file values.

use std::path::Path;

use lain_core::backbone::ModelConfig;
use lain_core::data::{DatasetBundle, GeneratorConfig};
use lain_core::error::{LainError, Result};
use lain_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub generator: GeneratorConfig,
}

/// Read and parse a TOML config; `None` yields pure defaults.
pub fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| LainError::io(p.display().to_string(), e))?;
            toml::from_str(&text)
                .map_err(|e| LainError::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Render any serializable config block as TOML for the stdout echo.
pub fn to_toml<T: Serialize>(value: &T) -> Result<String> {
    toml::to_string_pretty(value)
        .map_err(|e| LainError::Config(format!("config echo failed: {e}")))
}

/// Print the effective configuration before any work happens.
pub fn echo_config<T: Serialize>(value: &T) -> Result<()> {
    println!("== config ==");
    print!("{}", to_toml(value)?);
    Ok(())
}

/// Print the dataset identity line that follows every config echo.
pub fn echo_dataset(bundle: &DatasetBundle) {
    println!("== dataset ==");
    println!("digest {}", bundle.digest);
    println!(
        "train {} valid {} test {} vocab {} l0 {:.4}",
        bundle.train.len(),
        bundle.valid.len(),
        bundle.test.len(),
        bundle.vocab_size,
        bundle.l0
    );
    if bundle.ts_warnings > 0 {
        println!("note: {} events had out-of-order timestamps (sorted on load)", bundle.ts_warnings);
    }
}
