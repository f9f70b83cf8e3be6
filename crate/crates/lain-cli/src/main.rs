//! `lain` — train, evaluate, and dissect a length-adaptive CTR model from
//! the command line. Every command is deterministic given its flags and
//! writes results only under the directory it was pointed at.

mod audit;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lain_core::LainError;

#[derive(Parser)]
#[command(
    name = "lain",
    version,
    about = "Length-adaptive CTR model toolkit: synthetic data, training, \
             evaluation, attention audits, gradient checks, ablations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic length-imbalanced impression log plus manifest.
    GenData(GenDataArgs),
    /// Train one model variant on an event log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split, bucketed by history length.
    Eval(EvalArgs),
    /// Dump attention traces and per-bucket concentration statistics.
    AuditAttention(AuditArgs),
    /// Validate model gradients against central finite differences.
    GradCheck(GradCheckArgs),
    /// Run a (variant x seed) experiment matrix from a plan file.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Override the user count from the spec file / defaults.
    #[arg(long)]
    users: Option<usize>,
    /// Override the item count.
    #[arg(long)]
    items: Option<usize>,
    /// Override the generator seed.
    #[arg(long)]
    seed: Option<u64>,
    /// TOML file with a [generator] section (cohorts included).
    #[arg(long)]
    spec_file: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Event-log JSONL produced by gen-data (or the same schema).
    #[arg(long)]
    data: PathBuf,
    /// TOML file with [model] and [train] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Ablation preset: full | no-lcp | no-qk | no-temp | no-lma | no-short | baseline.
    #[arg(long, default_value = "full")]
    variant: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoint.json and history.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory for gini_by_bucket.csv and traces.jsonl.
    #[arg(long)]
    out: PathBuf,
    /// Re-softmax every recorded weight vector at this fixed temperature
    /// before computing statistics (a what-if smoothing analysis).
    #[arg(long)]
    counterfactual_tau: Option<f64>,
}

#[derive(Args)]
struct GradCheckArgs {
    /// TOML file with a [model] section; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum relative error tolerated per coordinate.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Central-difference step. Shrink it if a parameter reports relu/clamp
    /// branch flips inside every +-step bracket.
    #[arg(long, default_value_t = 1e-4)]
    step: f64,
}

#[derive(Args)]
struct AblateArgs {
    /// TOML experiment plan: variants, seeds, [generator]/[model]/[train].
    #[arg(long)]
    plan_file: PathBuf,
    /// Output directory; one subdirectory per (variant, seed) cell.
    #[arg(long)]
    out_dir: PathBuf,
    /// Skip cells the manifest already records as done.
    #[arg(long)]
    resume: bool,
}

/// 0 success, 1 internal failure, 2 usage/validation.
fn exit_code_for(err: &LainError) -> u8 {
    match err {
        LainError::Config(_)
        | LainError::Data(_)
        | LainError::Checkpoint(_)
        | LainError::Io { .. }
        | LainError::Json(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::AuditAttention(a) => commands::audit_attention(&a),
        Command::GradCheck(a) => commands::grad_check_cmd(&a),
        Command::Ablate(a) => commands::ablate(&a),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
