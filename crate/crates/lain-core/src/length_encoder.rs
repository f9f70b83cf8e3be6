//! Spectral length encoding: raw sequence length -> dense embedding.
//!
//! A length L is mapped to sinusoidal features over a trainable frequency
//! bank, projected, layer-normalized, and refined by a small MLP. The raw
//! (pre-truncation) length is used so the encoder sees the true activity
//! scale even when the behavior window is clipped.

use rand_chacha::ChaCha8Rng;

use crate::error::{LainError, Result};
use crate::graph::{Graph, Var};
use crate::mlp::{Linear, Mlp};
use crate::params::{Component, ParamId, ParamSet};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct LengthEncoderConfig {
    /// Number of frequencies; the feature vector has twice this many entries.
    pub d_f: usize,
    /// Output embedding width.
    pub d: usize,
    /// Hidden width of the projection and refinement stack.
    pub hidden: usize,
}

impl Default for LengthEncoderConfig {
    fn default() -> Self {
        LengthEncoderConfig { d_f: 32, d: 64, hidden: 512 }
    }
}

/// Log-spaced frequency bank: `omega_i = 10000^(-i / d_f)`.
pub fn default_omega(d_f: usize) -> Vec<f64> {
    (0..d_f).map(|i| 10000f64.powf(-(i as f64) / d_f as f64)).collect()
}

/// Pure feature map `[sin(L w_0).. sin(L w_{n-1}), cos(L w_0).. ]`.
/// Mirrors the graph op bit for bit; used as its oracle.
pub fn fourier_features(length: f64, omega: &[f64]) -> Vec<f64> {
    let n = omega.len();
    let mut out = vec![0.0; 2 * n];
    for (i, &w) in omega.iter().enumerate() {
        let angle = length * w;
        out[i] = angle.sin();
        out[n + i] = angle.cos();
    }
    out
}

#[derive(Debug, Clone)]
pub struct LengthEncoder {
    pub omega: ParamId,
    pub proj: Linear,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
    pub mlp: Mlp,
    pub cfg: LengthEncoderConfig,
}

impl LengthEncoder {
    pub fn new(set: &mut ParamSet, rng: &mut ChaCha8Rng, cfg: LengthEncoderConfig) -> Self {
        let omega = set.add(
            "sle.omega",
            Tensor::vector(default_omega(cfg.d_f)),
            Component::Sle,
        );
        let proj = Linear::new(set, rng, "sle.proj", 2 * cfg.d_f, cfg.hidden, Component::Sle);
        let ln_gain = set.add("sle.ln.gain", Tensor::vector(vec![1.0; cfg.hidden]), Component::Sle);
        let ln_bias = set.add("sle.ln.bias", Tensor::vector(vec![0.0; cfg.hidden]), Component::Sle);
        let mlp = Mlp::new(set, rng, "sle.mlp", &[cfg.hidden, cfg.hidden, cfg.d], Component::Sle);
        LengthEncoder { omega, proj, ln_gain, ln_bias, mlp, cfg }
    }

    /// Encode a batch of raw lengths into `[B x d]` embeddings.
    pub fn encode_batch(&self, g: &mut Graph, lengths: &[f64]) -> Result<Var> {
        for &l in lengths {
            if !l.is_finite() || l < 0.0 {
                return Err(LainError::domain(
                    "length_encoder",
                    format!("raw length must be finite and non-negative, got {l}"),
                ));
            }
        }
        let omega = g.param(self.omega);
        let feats = g.fourier_rows(omega, lengths)?;
        let projected = self.proj.forward_rows(g, feats)?;
        let gain = g.param(self.ln_gain);
        let bias = g.param(self.ln_bias);
        let normed = g.layer_norm(projected, gain, bias, 1e-5)?;
        self.mlp.forward_rows(g, normed, None)
    }
}
