//! Length-conditioned prompting: synthesize k pseudo-behavior rows from the
//! length embedding and prepend them to the behavior sequence as extra
//! keys/values. Queries never come from prompts.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::mlp::Mlp;
use crate::params::{Component, ParamSet};

#[derive(Debug, Clone)]
pub struct PromptGenerator {
    pub mlp: Mlp,
    pub k: usize,
    pub d: usize,
}

impl PromptGenerator {
    pub fn new(
        set: &mut ParamSet,
        rng: &mut ChaCha8Rng,
        d: usize,
        hidden: usize,
        k: usize,
    ) -> Self {
        let mlp = Mlp::new(set, rng, "lcp.mlp", &[d, hidden, k * d], Component::Lcp);
        PromptGenerator { mlp, k, d }
    }

    /// All prompts for a batch at once: h_len `[B x d]` -> flat `[B x k*d]`.
    pub fn prompts_batch(&self, g: &mut Graph, h_len: Var) -> Result<Var> {
        self.mlp.forward_rows(g, h_len, None)
    }

    /// Slice out sample `b` from the flat batch as a `[k x d]` prompt block.
    pub fn prompt_rows(&self, g: &mut Graph, flat: Var, b: usize) -> Result<Var> {
        let row = g.row_of(flat, b)?;
        g.reshape(row, vec![self.k, self.d])
    }
}

/// Prepend prompt rows to a behavior sequence. `seq` is `None` for an empty
/// history. Returns the combined key/value matrix and the shifted validity
/// mask (prompts are always valid).
pub fn prepend_prompts(
    g: &mut Graph,
    prompts: Var,
    seq: Option<Var>,
    seq_mask: &[bool],
) -> Result<(Var, Vec<bool>)> {
    let k = g.value(prompts).rows();
    let mut mask = vec![true; k];
    mask.extend_from_slice(seq_mask);
    let combined = match seq {
        Some(s) => g.concat_rows(prompts, s)?,
        None => prompts,
    };
    Ok((combined, mask))
}
