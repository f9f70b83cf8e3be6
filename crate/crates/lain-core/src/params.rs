//! Named trainable parameters with stable ordering.
//!
//! Parameters live outside the autodiff graph and persist across steps. The
//! set preserves creation order, which fixes optimizer iteration order and
//! checkpoint layout, so runs are reproducible.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LainError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Component a parameter belongs to, used for parameter accounting and for
/// selecting the shared subset in the gradient-conflict probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Component {
    /// Embedding table and prediction head: present in every variant.
    Shared,
    /// Spectral length encoder.
    Sle,
    /// Length-conditioned prompt generator.
    Lcp,
    /// Length-modulated attention (conditioning projections, length
    /// embedding MLP, temperature scalars).
    Lma,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub component: Component,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: Vec<Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, component: Component) -> ParamId {
        let name = name.into();
        assert!(
            self.lookup(&name).is_none(),
            "duplicate parameter name '{name}'"
        );
        self.params.push(Parameter { name, tensor, trainable: true, component });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.clear_grad();
        }
    }

    /// Total scalar count, optionally restricted to one component.
    pub fn scalar_count(&self, component: Option<Component>) -> usize {
        self.params
            .iter()
            .filter(|p| component.map_or(true, |c| p.component == c))
            .map(|p| p.tensor.len())
            .sum()
    }

    /// Gradients of every trainable parameter in `component`, flattened in
    /// creation order. Errors if any such parameter is missing its grad.
    pub fn flat_grad(&self, component: Option<Component>) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for p in &self.params {
            if !p.trainable || component.map_or(false, |c| p.component != c) {
                continue;
            }
            match &p.tensor.grad {
                Some(g) => out.extend_from_slice(g),
                None => return Err(LainError::MissingGradient(p.name.clone())),
            }
        }
        Ok(out)
    }
}

/// Fan-based uniform init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
pub fn xavier_uniform(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, n: usize) -> Vec<f64> {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-a..a)).collect()
}

/// Linear layer weights stored row-major as [out x in], zero bias.
pub fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> (Tensor, Tensor) {
    let w = Tensor::new(vec![fan_out, fan_in], xavier_uniform(rng, fan_in, fan_out, fan_in * fan_out))
        .expect("finite init");
    let b = Tensor::zeros(vec![fan_out]);
    (w, b)
}
