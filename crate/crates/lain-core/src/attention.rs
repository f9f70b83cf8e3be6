//! Target attention with two length-aware modulations, each independently
//! toggleable: query/key conditioning on the length embedding
//! ([`QkConditioner`]) and a length-dependent softmax temperature that
//! smooths attention for short histories ([`TemperatureScale`]).
//!
//! The conditioned projections are stored as per-source blocks
//! (`W_q [q; e] = W_q_tgt q + W_q_len e`), which is the same linear map as a
//! single `[d x 2d]` matrix over the concatenation.
//!
//! Conditioned logits are computed in factored form. With
//! `q' = W_q_tgt q + W_q_len e` and `k'_j = W_k_seq k_j + W_k_len e`,
//!
//! ```text
//! <q', k'_j> = <W_k_seq^T q', k_j> + <W_k_len e, q'>
//! ```
//!
//! The first term is one premultiplied vector dotted against the raw key
//! rows; the second is independent of `j`, so it is computed once per sample
//! and broadcast. This avoids materializing a conditioned copy of every key
//! row while producing identical logits (a test pins the equivalence against
//! the per-row form). Note the broadcast term shifts all logits uniformly,
//! so it can never change the softmax output; the key-side length block is
//! kept because it is part of the declared parameterization, and its
//! near-zero gradient is simply what the math says.

use rand_chacha::ChaCha8Rng;

use crate::error::{LainError, Result};
use crate::graph::{Graph, Var};
use crate::mlp::Linear;
use crate::params::{xavier_uniform, Component, ParamId, ParamSet};
use crate::tensor::{sigmoid, softplus_inv, Tensor};

/// Mass below which a renormalized trace is considered degenerate.
pub const TRACE_MASS_FLOOR: f64 = 1e-12;

/// Smooth temperature schedule: `1 + gamma * sigmoid(-beta (L - L0))`.
/// Short histories (L << L0) approach `1 + gamma`; long ones approach 1.
pub fn compute_temperature(raw_len: f64, gamma: f64, beta: f64, l0: f64) -> f64 {
    1.0 + gamma * sigmoid(-beta * (raw_len - l0))
}

/// Query/key conditioning on the length embedding: projects the length
/// representation into the attention space and mixes it into both sides of
/// the score.
#[derive(Debug, Clone)]
pub struct QkConditioner {
    pub e_len_proj: Linear,
    pub w_q_tgt: ParamId,
    pub w_q_len: ParamId,
    pub w_k_seq: ParamId,
    pub w_k_len: ParamId,
    pub d: usize,
}

/// Length-dependent softmax temperature with trainable amplitude and
/// transition sharpness.
#[derive(Debug, Clone)]
pub struct TemperatureScale {
    /// Softplus pre-image of the temperature amplitude; init decodes to 0.5.
    pub gamma_raw: ParamId,
    /// Transition sharpness, trainable, init 0.01.
    pub beta: ParamId,
}

/// Per-sample state for conditioned attention, shared by every branch that
/// attends with the same target query.
pub struct ConditionedQuery {
    /// `W_k_seq^T q'` — dotted against raw key rows to get content logits.
    pub key_query: Var,
    /// `<W_k_len e, q'>` — the row-independent part of every logit.
    pub shift: Var,
}

/// How a branch queries its key rows.
pub enum QueryForm<'a> {
    /// Raw dot-product attention with the target embedding.
    Plain(Var),
    /// Length-conditioned query/key scores.
    Conditioned(&'a ConditionedQuery),
}

/// Output of one attention application.
pub struct Attended {
    pub output: Var,
    pub weights: Var,
}

impl QkConditioner {
    pub fn new(set: &mut ParamSet, rng: &mut ChaCha8Rng, d: usize) -> Self {
        let e_len_proj = Linear::new(set, rng, "lma.e_len", d, d, Component::Lma);
        let block = |name: &str, set: &mut ParamSet, rng: &mut ChaCha8Rng| {
            let t = Tensor::matrix(d, d, xavier_uniform(rng, d, d, d * d)).unwrap();
            set.add(name, t, Component::Lma)
        };
        let w_q_tgt = block("lma.w_q.tgt", set, rng);
        let w_q_len = block("lma.w_q.len", set, rng);
        let w_k_seq = block("lma.w_k.seq", set, rng);
        let w_k_len = block("lma.w_k.len", set, rng);
        QkConditioner { e_len_proj, w_q_tgt, w_q_len, w_k_seq, w_k_len, d }
    }

    /// Project the length representation into the conditioning vector.
    pub fn e_len(&self, g: &mut Graph, h_len_row: Var) -> Result<Var> {
        self.e_len_proj.forward_vec(g, h_len_row)
    }

    /// Build the per-sample conditioned query from the target embedding and
    /// the conditioning vector.
    pub fn condition(&self, g: &mut Graph, target_query: Var, e: Var) -> Result<ConditionedQuery> {
        let wqt = g.param(self.w_q_tgt);
        let wql = g.param(self.w_q_len);
        let qa = g.matvec(wqt, target_query)?;
        let qb = g.matvec(wql, e)?;
        let q_prime = g.add(qa, qb)?;
        let wks = g.param(self.w_k_seq);
        let key_query = g.vecmat(q_prime, wks)?;
        let wkl = g.param(self.w_k_len);
        let ke = g.matvec(wkl, e)?;
        let prod = g.mul(ke, q_prime)?;
        let shift = g.sum_all(prod);
        Ok(ConditionedQuery { key_query, shift })
    }
}

impl TemperatureScale {
    pub fn new(set: &mut ParamSet) -> Self {
        let gamma_raw =
            set.add("lma.gamma_raw", Tensor::scalar(softplus_inv(0.5)), Component::Lma);
        let beta = set.add("lma.beta", Tensor::scalar(0.01), Component::Lma);
        TemperatureScale { gamma_raw, beta }
    }

    /// Build the in-graph temperature for one sample's raw length.
    pub fn temperature(&self, g: &mut Graph, raw_len: f64, l0: f64) -> Result<Var> {
        if !raw_len.is_finite() || raw_len < 0.0 {
            return Err(LainError::domain(
                "temperature",
                format!("raw length must be finite and non-negative, got {raw_len}"),
            ));
        }
        let beta = g.param(self.beta);
        let z = g.scale(beta, -(raw_len - l0));
        let s = g.sigmoid_op(z);
        let graw = g.param(self.gamma_raw);
        let gamma = g.softplus_op(graw);
        let prod = g.mul(s, gamma)?;
        Ok(g.add_const(prod, 1.0))
    }
}

/// Attend over `kv` rows with the given query form. `tau: Some(..)` divides
/// the scaled logits by a temperature. Values are always the raw `kv` rows.
pub fn attend(
    g: &mut Graph,
    query: QueryForm,
    kv: Var,
    mask: &[bool],
    tau: Option<Var>,
) -> Result<Attended> {
    let rows = g.value(kv).rows();
    let d = g.value(kv).cols();
    if rows == 0 {
        return Err(LainError::DegenerateMask);
    }
    if mask.len() != rows {
        return Err(LainError::shape(
            "attend",
            format!("mask has {} entries for {} key rows", mask.len(), rows),
        ));
    }
    let raw = match query {
        QueryForm::Plain(q) => g.matvec(kv, q)?,
        QueryForm::Conditioned(c) => {
            let content = g.matvec(kv, c.key_query)?;
            g.add_scalar_b(content, c.shift)?
        }
    };
    let mut logits = g.scale(raw, 1.0 / (d as f64).sqrt());
    if let Some(t) = tau {
        logits = g.div_scalar(logits, t)?;
    }
    let weights = g.softmax_masked(logits, Some(mask.to_vec()))?;
    let output = g.vecmat(weights, kv)?;
    Ok(Attended { output, weights })
}

/// Drop the first `k_prompts` weights and renormalize the remainder to sum
/// to one. Returns `None` when the retained mass is below the floor, which
/// callers must treat as a degenerate trace rather than dividing by dust.
pub fn strip_prompts_renormalize(weights: &[f64], k_prompts: usize) -> Option<Vec<f64>> {
    if k_prompts >= weights.len() {
        return None;
    }
    let retained = &weights[k_prompts..];
    let mass: f64 = retained.iter().sum();
    if mass < TRACE_MASS_FLOOR {
        return None;
    }
    Some(retained.iter().map(|w| w / mass).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_temp;
    use rand::{Rng, SeedableRng};

    fn build(d: usize, seed: u64) -> (ParamSet, QkConditioner, TemperatureScale) {
        let mut set = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qk = QkConditioner::new(&mut set, &mut rng, d);
        let temp = TemperatureScale::new(&mut set);
        (set, qk, temp)
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        let (set, _, _) = build(64, 0);
        // e_len linear (64*64+64) + four d*d blocks + two scalars
        assert_eq!(set.scalar_count(Some(Component::Lma)), 4160 + 4 * 4096 + 2);
    }

    #[test]
    fn temperature_schedule_shape() {
        let g = 0.5;
        let (b, l0) = (0.01, 147.0);
        let at_anchor = compute_temperature(l0, g, b, l0);
        assert!((at_anchor - 1.25).abs() < 1e-12, "tau at L0 must be 1 + gamma/2");
        let at_zero = compute_temperature(0.0, g, b, l0);
        assert!((at_zero - 1.40653).abs() < 1e-4, "tau(0) off: {at_zero}");
        let mut prev = f64::INFINITY;
        for l in [0.0, 10.0, 100.0, 147.0, 300.0, 1000.0] {
            let t = compute_temperature(l, g, b, l0);
            assert!(t < prev, "tau must strictly decrease in length");
            assert!(t > 1.0 && t < 1.0 + g + 1e-12);
            prev = t;
        }
        assert!(compute_temperature(1e6, g, b, l0) - 1.0 < 1e-4, "long limit is 1");
    }

    #[test]
    fn graph_temperature_matches_pure_formula() {
        let (set, _, temp) = build(8, 3);
        for l in [0.0, 37.0, 147.0, 401.0, 1000.0] {
            let mut g = Graph::new(&set);
            let tau = temp.temperature(&mut g, l, 147.0).unwrap();
            let gamma = crate::tensor::softplus(set.get(temp.gamma_raw).tensor.as_scalar());
            let beta = set.get(temp.beta).tensor.as_scalar();
            let expect = compute_temperature(l, gamma, beta, 147.0);
            assert!((g.value(tau).as_scalar() - expect).abs() < 1e-12, "length {l}");
        }
    }

    #[test]
    fn flags_off_equals_plain_target_attention() {
        let d = 6;
        let (set, _, _) = build(d, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let qv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kvv: Vec<f64> = (0..5 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::new(&set);
        let q = g.input(Tensor::vector(qv.clone()));
        let kv = g.input(Tensor::matrix(5, d, kvv.clone()).unwrap());
        let out = attend(&mut g, QueryForm::Plain(q), kv, &[true; 5], None).unwrap();

        let mut logits = vec![0.0; 5];
        for r in 0..5 {
            logits[r] = (0..d).map(|c| kvv[r * d + c] * qv[c]).sum::<f64>() / (d as f64).sqrt();
        }
        let alpha = softmax_temp(&logits, 1.0, None).unwrap();
        let mut expect = vec![0.0; d];
        for r in 0..5 {
            for c in 0..d {
                expect[c] += alpha[r] * kvv[r * d + c];
            }
        }
        for (a, b) in g.value(out.weights).data().iter().zip(&alpha) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in g.value(out.output).data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_conditioning_reduces_to_plain() {
        let d = 4;
        let (mut set, qk, _) = build(d, 11);
        // W_q_tgt = W_k_seq = I, length blocks = 0: conditioning is a no-op.
        for (id, ident) in
            [(qk.w_q_tgt, true), (qk.w_q_len, false), (qk.w_k_seq, true), (qk.w_k_len, false)]
        {
            let data = set.get_mut(id).tensor.data_mut();
            for (i, v) in data.iter_mut().enumerate() {
                *v = if ident && i % (d + 1) == 0 { 1.0 } else { 0.0 };
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let qv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kvv: Vec<f64> = (0..3 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let ev: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let mut g = Graph::new(&set);
        let q = g.input(Tensor::vector(qv.clone()));
        let kv = g.input(Tensor::matrix(3, d, kvv.clone()).unwrap());
        let e = g.input(Tensor::vector(ev));
        let cq = qk.condition(&mut g, q, e).unwrap();
        let cond = attend(&mut g, QueryForm::Conditioned(&cq), kv, &[true; 3], None).unwrap();
        let q2 = g.input(Tensor::vector(qv));
        let kv2 = g.input(Tensor::matrix(3, d, kvv).unwrap());
        let plain = attend(&mut g, QueryForm::Plain(q2), kv2, &[true; 3], None).unwrap();
        for (a, b) in g.value(cond.output).data().iter().zip(g.value(plain.output).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn factored_logits_match_per_row_conditioned_keys() {
        // The production path premultiplies the query and broadcasts the
        // row-independent term; this rebuilds conditioned keys literally
        // (k'_j = W_k_seq k_j + W_k_len e) and demands identical results.
        let d = 5;
        let rows = 7;
        let (set, qk, temp) = build(d, 29);
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let qv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kvv: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut mask = vec![true; rows];
        mask[2] = false;

        let mut g = Graph::new(&set);
        let q = g.input(Tensor::vector(qv.clone()));
        let kv = g.input(Tensor::matrix(rows, d, kvv.clone()).unwrap());
        let h = g.input(Tensor::vector(hv));
        let e = qk.e_len(&mut g, h).unwrap();
        let tau = temp.temperature(&mut g, 12.0, 147.0).unwrap();
        let cq = qk.condition(&mut g, q, e).unwrap();
        let fast =
            attend(&mut g, QueryForm::Conditioned(&cq), kv, &mask, Some(tau)).unwrap();

        // Literal form, built from the same graph values.
        let wqt = g.param(qk.w_q_tgt);
        let wql = g.param(qk.w_q_len);
        let qa = g.matvec(wqt, q).unwrap();
        let qb = g.matvec(wql, e).unwrap();
        let q_prime = g.add(qa, qb).unwrap();
        let wks = g.param(qk.w_k_seq);
        let wkl = g.param(qk.w_k_len);
        let ka = g.matmul_bt(kv, wks).unwrap();
        let kb = g.matvec(wkl, e).unwrap();
        let kb_rows = g.repeat_row(kb, rows).unwrap();
        let k_cond = g.add(ka, kb_rows).unwrap();
        let raw = g.matvec(k_cond, q_prime).unwrap();
        let scaled = g.scale(raw, 1.0 / (d as f64).sqrt());
        let tau2 = temp.temperature(&mut g, 12.0, 147.0).unwrap();
        let logits = g.div_scalar(scaled, tau2).unwrap();
        let weights = g.softmax_masked(logits, Some(mask.clone())).unwrap();
        let output = g.vecmat(weights, kv).unwrap();

        for (a, b) in g.value(fast.weights).data().iter().zip(g.value(weights).data()) {
            assert!((a - b).abs() < 1e-12, "weights diverge: {a} vs {b}");
        }
        for (a, b) in g.value(fast.output).data().iter().zip(g.value(output).data()) {
            assert!((a - b).abs() < 1e-12, "outputs diverge: {a} vs {b}");
        }
    }

    #[test]
    fn key_side_length_term_never_moves_the_weights() {
        // The key-side length block adds the same amount to every logit, so
        // zeroing it must leave the attention distribution unchanged.
        let d = 4;
        let (set, qk, _) = build(d, 31);
        let mut zeroed = set.clone();
        for v in zeroed.get_mut(qk.w_k_len).tensor.data_mut() {
            *v = 0.0;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let qv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kvv: Vec<f64> = (0..6 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let hv: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let run = |ps: &ParamSet| -> Vec<f64> {
            let mut g = Graph::new(ps);
            let q = g.input(Tensor::vector(qv.clone()));
            let kv = g.input(Tensor::matrix(6, d, kvv.clone()).unwrap());
            let h = g.input(Tensor::vector(hv.clone()));
            let e = qk.e_len(&mut g, h).unwrap();
            let cq = qk.condition(&mut g, q, e).unwrap();
            let out = attend(&mut g, QueryForm::Conditioned(&cq), kv, &[true; 6], None).unwrap();
            g.value(out.weights).data().to_vec()
        };
        let with_term = run(&set);
        let without = run(&zeroed);
        for (a, b) in with_term.iter().zip(&without) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn higher_temperature_flattens_attention() {
        let d = 4;
        let (set, _, temp) = build(d, 13);
        let entropy = |w: &[f64]| -> f64 {
            w.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let qv: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let kvv: Vec<f64> = (0..6 * d).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let run = |raw_len: f64| -> f64 {
            let mut g = Graph::new(&set);
            let q = g.input(Tensor::vector(qv.clone()));
            let kv = g.input(Tensor::matrix(6, d, kvv.clone()).unwrap());
            let tau = temp.temperature(&mut g, raw_len, 147.0).unwrap();
            let out = attend(&mut g, QueryForm::Plain(q), kv, &[true; 6], Some(tau)).unwrap();
            entropy(g.value(out.weights).data())
        };
        let short = run(0.0);
        let long = run(1000.0);
        assert!(
            short > long,
            "short histories must get smoother attention: H(short)={short} H(long)={long}"
        );
    }

    #[test]
    fn masked_rows_get_zero_weight() {
        let d = 3;
        let (set, _, _) = build(d, 17);
        let mut g = Graph::new(&set);
        let q = g.input(Tensor::vector(vec![1.0, 0.0, -1.0]));
        let kv = g.input(Tensor::matrix(4, d, vec![0.5; 12]).unwrap());
        let mask = [true, false, true, false];
        let out = attend(&mut g, QueryForm::Plain(q), kv, &mask, None).unwrap();
        let w = g.value(out.weights).data();
        assert_eq!(w[1], 0.0);
        assert_eq!(w[3], 0.0);
        assert!((w[0] + w[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_sequence_is_rejected() {
        let (set, _, _) = build(3, 0);
        let mut g = Graph::new(&set);
        let q = g.input(Tensor::vector(vec![1.0; 3]));
        let kv = g.input(Tensor::matrix(1, 3, vec![1.0; 3]).unwrap());
        assert!(
            attend(&mut g, QueryForm::Plain(q), kv, &[], None).is_err(),
            "mask length mismatch"
        );
    }

    #[test]
    fn weights_sum_to_one() {
        let (set, qk, temp) = build(5, 19);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..10 {
            let qv: Vec<f64> = (0..5).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let kvv: Vec<f64> = (0..40).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut g = Graph::new(&set);
            let q = g.input(Tensor::vector(qv));
            let kv = g.input(Tensor::matrix(8, 5, kvv).unwrap());
            let tau = temp.temperature(&mut g, rng.gen_range(0.0..800.0), 147.0).unwrap();
            let e = g.input(Tensor::vector(vec![0.3; 5]));
            let cq = qk.condition(&mut g, q, e).unwrap();
            let out =
                attend(&mut g, QueryForm::Conditioned(&cq), kv, &[true; 8], Some(tau)).unwrap();
            let sum: f64 = g.value(out.weights).data().iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn strip_prompts_renormalizes() {
        let got = strip_prompts_renormalize(&[0.2, 0.2, 0.3, 0.3], 2).unwrap();
        assert!((got[0] - 0.5).abs() < 1e-12);
        assert!((got[1] - 0.5).abs() < 1e-12);
        assert!(strip_prompts_renormalize(&[0.5, 0.5, 0.0, 0.0], 2).is_none());
        assert!(strip_prompts_renormalize(&[1.0], 1).is_none());
        let untouched = strip_prompts_renormalize(&[0.25, 0.75], 0).unwrap();
        assert_eq!(untouched, vec![0.25, 0.75]);
    }

    #[test]
    fn full_attention_gradients_match_finite_differences() {
        use crate::gradcheck::{grad_check, CoordPolicy};
        use crate::params::ParamId;

        let d = 4;
        let rows = 3;
        let (mut set, qk, temp) = build(d, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let q_id = set.add(
            "x.query",
            Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            Component::Shared,
        );
        let kv_id = set.add(
            "x.kv",
            Tensor::matrix(rows, d, (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .unwrap(),
            Component::Shared,
        );
        let h_id = set.add(
            "x.h_len",
            Tensor::vector((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            Component::Shared,
        );
        let raw_len = 37.0;
        let weights = [0.7, -1.1, 0.4, 0.9];
        let forward = |p: &ParamSet, g: &mut Graph| -> Result<Var> {
            let q = g.param(q_id);
            let kv = g.param(kv_id);
            let h = g.param(h_id);
            let _ = p;
            let e = qk.e_len(g, h)?;
            let tau = temp.temperature(g, raw_len, 147.0)?;
            let cq = qk.condition(g, q, e)?;
            let out = attend(g, QueryForm::Conditioned(&cq), kv, &[true; 3], Some(tau))?;
            let weighted = g.mul_const(out.output, weights.to_vec())?;
            Ok(g.sum_all(weighted))
        };
        let eval = |p: &ParamSet| -> Result<crate::gradcheck::EvalPoint> {
            let mut g = Graph::new(p);
            let s = forward(p, &mut g)?;
            Ok(crate::gradcheck::EvalPoint {
                value: g.value(s).as_scalar(),
                region: g.region_signature(),
            })
        };
        let analytic = |p: &ParamSet| -> Result<Vec<(ParamId, Vec<f64>)>> {
            let mut g = Graph::new(p);
            let s = forward(p, &mut g)?;
            g.backward(s)?;
            Ok(g.into_param_grads())
        };
        let report =
            grad_check(eval, analytic, &mut set, 1e-4, 1e-4, CoordPolicy::Exhaustive).unwrap();
        assert!(report.passed, "{}", report.render_table());
    }
}
