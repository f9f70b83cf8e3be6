//! Linear layers and MLP stacks registered on a [`ParamSet`].

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{linear_init, Component, ParamId, ParamSet};

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights `[out x in]` with fan-based uniform init, zero bias.
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        component: Component,
    ) -> Self {
        let (w, b) = linear_init(rng, in_dim, out_dim);
        let w = set.add(format!("{name}.w"), w, component);
        let b = set.add(format!("{name}.b"), b, component);
        Linear { w, b, in_dim, out_dim }
    }

    /// Batched forward: x [B x in] -> [B x out].
    pub fn forward_rows(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul_bt(x, w)?;
        g.add_bias(y, b)
    }

    /// Single-vector forward: x [in] -> [out].
    pub fn forward_vec(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matvec(w, x)?;
        g.add(y, b)
    }
}

/// Mask source for inverted dropout. Masks are drawn from a caller-owned
/// seeded stream so training stays reproducible; `None` at call sites means
/// eval mode (dropout inactive).
pub struct DropoutDraw<'r> {
    pub rng: &'r mut ChaCha8Rng,
    pub keep: f64,
}

impl<'r> DropoutDraw<'r> {
    pub fn draw(&mut self, n: usize) -> Vec<bool> {
        use rand::Rng;
        (0..n).map(|_| self.rng.gen::<f64>() < self.keep).collect()
    }
}

/// Dense stack: ReLU after every layer except the last, optional dropout
/// after each ReLU. The final layer has no activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        name: &str,
        dims: &[usize],
        component: Component,
    ) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        let layers = (0..dims.len() - 1)
            .map(|i| Linear::new(set, rng, &format!("{name}.{i}"), dims[i], dims[i + 1], component))
            .collect();
        Mlp { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("nonempty").out_dim
    }

    pub fn forward_rows(
        &self,
        g: &mut Graph,
        mut x: Var,
        mut dropout: Option<&mut DropoutDraw>,
    ) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward_rows(g, x)?;
            if i < last {
                x = g.relu(x);
                if let Some(d) = dropout.as_deref_mut() {
                    let n = g.value(x).len();
                    let mask = d.draw(n);
                    let keep = d.keep;
                    x = g.dropout(x, mask, keep)?;
                }
            }
        }
        Ok(x)
    }

    pub fn forward_vec(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward_vec(g, x)?;
            if i < last {
                x = g.relu(x);
            }
        }
        Ok(x)
    }
}
