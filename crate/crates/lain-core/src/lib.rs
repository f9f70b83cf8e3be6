//! Length-adaptive interest modeling for CTR prediction at desk scale.
//!
//! The crate implements a two-branch target-attention CTR backbone whose
//! behavior adapts to the user's history length L through three components:
//!
//! - a spectral length encoder: Fourier features of L passed through
//!   Linear -> LayerNorm -> MLP to produce a dense length code `h_len`,
//! - length-conditioned prompting: `h_len` is decoded into k prompt vectors
//!   prepended to both behavior sequences as extra keys/values,
//! - length-modulated attention: query/key conditioning on a length embedding
//!   and a learned temperature tau(L) = 1 + sigmoid(-beta (L - L0)) * gamma
//!   that smooths attention for short histories.
//!
//! Everything runs on a small tape-based reverse-mode autodiff engine in f64,
//! validated against central finite differences. The crate also ships a
//! length-imbalanced synthetic data generator, ranking metrics (AUC / GAUC /
//! logloss / attention Gini / entropy) with per-length-bucket reporting, an
//! Adam trainer with early stopping, a gradient-conflict probe, and an
//! ablation experiment harness.

pub mod attention;
pub mod backbone;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod length_encoder;
pub mod metrics;
pub mod mlp;
pub mod params;
pub mod prompting;
pub mod tensor;
pub mod trainer;

pub use error::{LainError, Result};
pub use tensor::Tensor;
