//! The CTR model: item embeddings, two-branch interest extraction (a recent
//! window and a top-K retrieved subsequence, both pooled by target
//! attention), optional length-aware components, feature fusion, MLP head,
//! in-graph BCE loss, parameter accounting, and bitwise-stable checkpoints.
//!
//! Component initialization draws from per-component RNG streams derived
//! from the run seed, so parameters shared between ablation variants are
//! initialized identically regardless of which optional components exist.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, strip_prompts_renormalize, ConditionedQuery, QkConditioner, QueryForm,
    TemperatureScale,
};
use crate::data::{bucket_of, Bucket, Sample, DEFAULT_BUCKET_BOUNDS};
use crate::error::{LainError, Result};
use crate::graph::{Graph, Var};
use crate::length_encoder::{LengthEncoder, LengthEncoderConfig};
use crate::mlp::{DropoutDraw, Mlp};
use crate::params::{xavier_uniform, Component, ParamId, ParamSet};
use crate::prompting::{prepend_prompts, PromptGenerator};
use crate::tensor::Tensor;

/// Predictions are clamped into this closed interval so logloss stays
/// finite and gradients bounded.
pub const PROB_FLOOR: f64 = 1e-7;

/// Full model hyperparameters, including ablation switches. Serialized into
/// checkpoints and echoed by every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width.
    pub d: usize,
    /// Fourier frequency count of the length encoder.
    pub d_f: usize,
    /// Prompt tokens per branch.
    pub k: usize,
    /// Hidden width of the length-encoder and prompt-generator stacks.
    pub hidden: usize,
    /// Recent behaviors fed to the short branch.
    pub short_window: usize,
    /// Top-K retrieval size of the long branch.
    pub gsu_topk: usize,
    /// History truncation bound.
    pub max_len: usize,
    /// Hidden layer widths of the prediction head (final 1 is implicit).
    pub head_dims: Vec<usize>,
    pub dropout: f64,
    /// Length-conditioned prompting.
    pub lcp: bool,
    /// Length-modulated attention (master switch for the two below).
    pub lma: bool,
    /// Query/key conditioning on the length embedding.
    pub qk_cond: bool,
    /// Length-dependent softmax temperature.
    pub temp_scale: bool,
    /// Keep the recent-window branch in the fusion vector.
    pub short_branch: bool,
    /// Raw-length bucket boundaries (half-open: short < b1 <= medium < b2 <= long).
    pub bucket_bounds: [u32; 2],
    /// Item vocabulary including padding slot 0. Dataset-derived.
    pub vocab_size: u32,
    /// Temperature anchor: mean raw length over training samples.
    /// Dataset-derived, never trained.
    pub l0: f64,
    /// Test hook: apply dropout in eval mode too, making eval stochastic.
    pub force_dropout: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            d_f: 32,
            k: 4,
            hidden: 512,
            short_window: 20,
            gsu_topk: 50,
            max_len: 1000,
            head_dims: vec![128, 64],
            dropout: 0.2,
            lcp: true,
            lma: true,
            qk_cond: true,
            temp_scale: true,
            short_branch: true,
            bucket_bounds: DEFAULT_BUCKET_BOUNDS,
            vocab_size: 0,
            l0: 0.0,
            force_dropout: false,
        }
    }
}

impl ModelConfig {
    /// Enforce the flag hierarchy: the attention master switch off disables
    /// both of its sub-features.
    pub fn normalized(mut self) -> Self {
        if !self.lma {
            self.qk_cond = false;
            self.temp_scale = false;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("d_f", self.d_f),
            ("k", self.k),
            ("hidden", self.hidden),
            ("short_window", self.short_window),
            ("gsu_topk", self.gsu_topk),
            ("max_len", self.max_len),
        ] {
            if v == 0 {
                return Err(LainError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.bucket_bounds[0] >= self.bucket_bounds[1] {
            return Err(LainError::Config(format!(
                "bucket_bounds must be strictly increasing, got {:?}",
                self.bucket_bounds
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(LainError::Config(format!(
                "dropout must be in [0, 1), got {}",
                self.dropout
            )));
        }
        if !self.lma && (self.qk_cond || self.temp_scale) {
            return Err(LainError::Config(
                "qk_cond/temp_scale require the attention master switch (lma)".into(),
            ));
        }
        if self.vocab_size < 2 {
            return Err(LainError::Config(format!(
                "vocab_size must cover padding plus at least one item, got {}",
                self.vocab_size
            )));
        }
        if !self.l0.is_finite() || self.l0 < 0.0 {
            return Err(LainError::Config(format!("l0 must be finite and >= 0, got {}", self.l0)));
        }
        Ok(())
    }

    /// True when any length-aware component is on; gates the length encoder
    /// and the extra fusion slot.
    pub fn lain_active(&self) -> bool {
        self.lcp || (self.lma && (self.qk_cond || self.temp_scale))
    }

    /// Width of the fused feature vector entering the head.
    pub fn fusion_dim(&self) -> usize {
        let mut parts = 2; // long branch + target embedding
        if self.short_branch {
            parts += 1;
        }
        if self.lain_active() {
            parts += 1; // length representation
        }
        self.d * parts
    }
}

/// Named ablation presets over the five model flags.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoLcp,
    NoQk,
    NoTemp,
    NoLma,
    NoShort,
    Baseline,
}

impl Variant {
    pub fn all() -> [Variant; 7] {
        [
            Variant::Full,
            Variant::NoLcp,
            Variant::NoQk,
            Variant::NoTemp,
            Variant::NoLma,
            Variant::NoShort,
            Variant::Baseline,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLcp => "no-lcp",
            Variant::NoQk => "no-qk",
            Variant::NoTemp => "no-temp",
            Variant::NoLma => "no-lma",
            Variant::NoShort => "no-short",
            Variant::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::all()
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Variant::all().iter().map(|v| v.name()).collect();
                LainError::Config(format!("unknown variant {s:?}; expected one of {names:?}"))
            })
    }

    /// Overwrite the five ablation flags; everything else is untouched.
    pub fn apply(self, cfg: &mut ModelConfig) {
        cfg.lcp = true;
        cfg.lma = true;
        cfg.qk_cond = true;
        cfg.temp_scale = true;
        cfg.short_branch = true;
        match self {
            Variant::Full => {}
            Variant::NoLcp => cfg.lcp = false,
            Variant::NoQk => cfg.qk_cond = false,
            Variant::NoTemp => cfg.temp_scale = false,
            Variant::NoLma => cfg.lma = false,
            Variant::NoShort => cfg.short_branch = false,
            Variant::Baseline => {
                cfg.lcp = false;
                cfg.lma = false;
            }
        }
        *cfg = cfg.clone().normalized();
    }
}

/// Recorded attention distribution over behavior positions (prompts already
/// stripped and the remainder renormalized).
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub user_id: u64,
    pub branch: &'static str,
    pub user_length: u32,
    pub bucket: Bucket,
    pub weights: Vec<f64>,
}

/// Forward/eval mode. Dropout applies in `Train` only (unless the config's
/// test hook forces it).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One batch forward: tape nodes for loss/probabilities plus host-side
/// attention traces (recorded in eval mode only).
#[derive(Debug)]
pub struct ForwardPass {
    /// Mean BCE over the batch, as a graph scalar.
    pub loss: Var,
    /// Clamped click probabilities, one per sample.
    pub probs: Var,
    pub traces: Vec<AttentionTrace>,
    /// Branches whose prompt-stripped attention mass was below the floor.
    pub degenerate_traces: usize,
}

/// Per-component scalar counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamReport {
    pub shared: usize,
    pub sle: usize,
    pub lcp: usize,
    pub lma: usize,
    pub total: usize,
    pub lain_fraction: f64,
}

/// Count parameters per component from the live set.
pub fn count_parameters(params: &ParamSet) -> ParamReport {
    let shared = params.scalar_count(Some(Component::Shared));
    let sle = params.scalar_count(Some(Component::Sle));
    let lcp = params.scalar_count(Some(Component::Lcp));
    let lma = params.scalar_count(Some(Component::Lma));
    let total = shared + sle + lcp + lma;
    let lain = (sle + lcp + lma) as f64;
    ParamReport {
        shared,
        sle,
        lcp,
        lma,
        total,
        lain_fraction: if total == 0 { 0.0 } else { lain / total as f64 },
    }
}

fn fnv1a(tag: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Independent init stream per component, so a component's draw order never
/// depends on which other components exist.
fn component_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(tag))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Positions of the `topk` highest scores. Ties break toward earlier
/// positions; the returned positions are ascending (chronological).
fn top_positions(scored: &mut Vec<(usize, f64)>, topk: usize) -> Vec<usize> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut idx: Vec<usize> = scored.iter().take(topk).map(|s| s.0).collect();
    idx.sort_unstable();
    idx
}

/// Retrieve the `topk` valid positions with the largest inner product
/// against the target embedding, in chronological order, along with the
/// corresponding rows.
pub fn gsu_retrieve(
    target_emb: &[f64],
    seq_emb: &Tensor,
    mask: &[bool],
    topk: usize,
) -> Result<(Vec<usize>, Tensor)> {
    if topk == 0 {
        return Err(LainError::domain("gsu_retrieve", "topk must be at least 1"));
    }
    let (n, d) = (seq_emb.rows(), seq_emb.cols());
    if mask.len() != n {
        return Err(LainError::shape(
            "gsu_retrieve",
            format!("mask has {} entries for {n} rows", mask.len()),
        ));
    }
    if target_emb.len() != d {
        return Err(LainError::shape(
            "gsu_retrieve",
            format!("target dim {} vs sequence dim {d}", target_emb.len()),
        ));
    }
    let mut scored: Vec<(usize, f64)> = (0..n)
        .filter(|&i| mask[i])
        .map(|i| (i, dot(target_emb, seq_emb.row(i))))
        .collect();
    let idx = top_positions(&mut scored, topk);
    let mut rows = Vec::with_capacity(idx.len() * d);
    for &i in &idx {
        rows.extend_from_slice(seq_emb.row(i));
    }
    Ok((idx.clone(), Tensor::new(vec![idx.len(), d], rows)?))
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamSet,
    pub embedding: ParamId,
    pub encoder: Option<LengthEncoder>,
    pub prompts: Option<PromptGenerator>,
    pub qk: Option<QkConditioner>,
    pub temp: Option<TemperatureScale>,
    pub head: Mlp,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Model> {
        let cfg = cfg.normalized();
        cfg.validate()?;
        let mut params = ParamSet::new();

        let vocab = cfg.vocab_size as usize;
        let mut rows = {
            let mut rng = component_rng(seed, "emb");
            xavier_uniform(&mut rng, cfg.d, cfg.d, vocab * cfg.d)
        };
        rows[..cfg.d].fill(0.0); // padding row, frozen by the lookup op
        let embedding =
            params.add("emb.items", Tensor::new(vec![vocab, cfg.d], rows)?, Component::Shared);

        let encoder = if cfg.lain_active() {
            let mut rng = component_rng(seed, "sle");
            Some(LengthEncoder::new(
                &mut params,
                &mut rng,
                LengthEncoderConfig { d_f: cfg.d_f, d: cfg.d, hidden: cfg.hidden },
            ))
        } else {
            None
        };
        let prompts = if cfg.lcp {
            let mut rng = component_rng(seed, "lcp");
            Some(PromptGenerator::new(&mut params, &mut rng, cfg.d, cfg.hidden, cfg.k))
        } else {
            None
        };
        let qk = if cfg.lma && cfg.qk_cond {
            let mut rng = component_rng(seed, "lma.qk");
            Some(QkConditioner::new(&mut params, &mut rng, cfg.d))
        } else {
            None
        };
        let temp = if cfg.lma && cfg.temp_scale {
            Some(TemperatureScale::new(&mut params))
        } else {
            None
        };

        let mut head_dims = Vec::with_capacity(cfg.head_dims.len() + 2);
        head_dims.push(cfg.fusion_dim());
        head_dims.extend_from_slice(&cfg.head_dims);
        head_dims.push(1);
        let head = {
            let mut rng = component_rng(seed, "head");
            Mlp::new(&mut params, &mut rng, "head", &head_dims, Component::Shared)
        };

        Ok(Model { cfg, params, embedding, encoder, prompts, qk, temp, head })
    }

    /// Top-K positions of a sample's history against its target item, by
    /// inner product on current embedding values. Selection is a discrete
    /// host-side step: no gradient flows through the choice.
    fn gsu_positions(&self, target_id: u32, behavior_ids: &[u32]) -> Vec<usize> {
        let table = &self.params.get(self.embedding).tensor;
        let t = table.row(target_id as usize);
        let mut scored: Vec<(usize, f64)> = behavior_ids
            .iter()
            .enumerate()
            .map(|(i, &id)| (i, dot(t, table.row(id as usize))))
            .collect();
        top_positions(&mut scored, self.cfg.gsu_topk)
    }

    /// Pool one branch: gather behaviors, optionally prepend prompts, attend
    /// with the sample's query form and temperature. An empty branch (no
    /// behaviors and no prompts) contributes a zero vector and no trace.
    #[allow(clippy::too_many_arguments)]
    fn interest_branch(
        &self,
        g: &mut Graph,
        table: Var,
        ids: &[u32],
        prompt_block: Option<Var>,
        cond: Option<&ConditionedQuery>,
        tau: Option<Var>,
        target_vec: Var,
    ) -> Result<(Var, Option<Var>)> {
        let seq = if ids.is_empty() { None } else { Some(g.gather_rows(table, ids)?) };
        let (kv, mask) = match (prompt_block, seq) {
            (None, None) => {
                return Ok((g.input(Tensor::zeros(vec![self.cfg.d])), None));
            }
            (Some(p), seq) => prepend_prompts(g, p, seq, &vec![true; ids.len()])?,
            (None, Some(s)) => (s, vec![true; ids.len()]),
        };
        let query = match cond {
            Some(c) => QueryForm::Conditioned(c),
            None => QueryForm::Plain(target_vec),
        };
        let att = attend(g, query, kv, &mask, tau)?;
        Ok((att.output, Some(att.weights)))
    }

    /// Run a whole minibatch through one tape. `rng` feeds dropout masks and
    /// is required whenever dropout is active for the mode.
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        samples: &[Sample],
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardPass> {
        if samples.is_empty() {
            return Err(LainError::shape("forward_batch", "empty batch"));
        }
        let cfg = &self.cfg;
        let n = samples.len();
        let lengths: Vec<f64> = samples.iter().map(|s| s.raw_length as f64).collect();

        let h_all = match &self.encoder {
            Some(enc) => Some(enc.encode_batch(g, &lengths)?),
            None => None,
        };
        let p_flat = match (&self.prompts, h_all) {
            (Some(pg), Some(h)) => Some(pg.prompts_batch(g, h)?),
            _ => None,
        };

        let table = g.param(self.embedding);
        let target_ids: Vec<u32> = samples.iter().map(|s| s.target_item_id).collect();
        let targets = g.gather_rows(table, &target_ids)?;

        let record = mode == Mode::Eval;
        let k_prompts = if cfg.lcp { cfg.k } else { 0 };
        let mut traces = Vec::new();
        let mut degenerate = 0usize;
        let mut fused_rows = Vec::with_capacity(n);

        for (b, s) in samples.iter().enumerate() {
            let target_vec = g.row_of(targets, b)?;
            let h_row = match h_all {
                Some(h) => Some(g.row_of(h, b)?),
                None => None,
            };
            let cond = match (&self.qk, h_row) {
                (Some(qk), Some(h)) => {
                    let e = qk.e_len(g, h)?;
                    Some(qk.condition(g, target_vec, e)?)
                }
                _ => None,
            };
            let tau = match &self.temp {
                Some(t) => Some(t.temperature(g, s.raw_length as f64, cfg.l0)?),
                None => None,
            };
            let prompt_block = match (&self.prompts, p_flat) {
                (Some(pg), Some(flat)) => Some(pg.prompt_rows(g, flat, b)?),
                _ => None,
            };

            let record_trace = |g: &Graph, weights: Option<Var>, branch: &'static str,
                                    traces: &mut Vec<AttentionTrace>,
                                    degenerate: &mut usize| {
                if !record {
                    return;
                }
                let Some(w) = weights else { return };
                match strip_prompts_renormalize(g.value(w).data(), k_prompts) {
                    Some(weights) => traces.push(AttentionTrace {
                        user_id: s.user_id,
                        branch,
                        user_length: s.raw_length,
                        bucket: bucket_of(s.raw_length, cfg.bucket_bounds),
                        weights,
                    }),
                    None => *degenerate += 1,
                }
            };

            let mut parts = Vec::with_capacity(4);
            if cfg.short_branch {
                let start = s.behavior_ids.len().saturating_sub(cfg.short_window);
                let (vec, w) = self.interest_branch(
                    g,
                    table,
                    &s.behavior_ids[start..],
                    prompt_block,
                    cond.as_ref(),
                    tau,
                    target_vec,
                )?;
                record_trace(g, w, "short", &mut traces, &mut degenerate);
                parts.push(vec);
            }
            let positions = self.gsu_positions(s.target_item_id, &s.behavior_ids);
            let long_ids: Vec<u32> = positions.iter().map(|&i| s.behavior_ids[i]).collect();
            let (long_vec, w) = self.interest_branch(
                g,
                table,
                &long_ids,
                prompt_block,
                cond.as_ref(),
                tau,
                target_vec,
            )?;
            record_trace(g, w, "long", &mut traces, &mut degenerate);
            parts.push(long_vec);
            parts.push(target_vec);
            if let Some(h) = h_row {
                parts.push(h);
            }
            fused_rows.push(g.concat_vecs(&parts)?);
        }

        let fused = g.stack_rows(&fused_rows)?;
        let dropout_on = (mode == Mode::Train || cfg.force_dropout) && cfg.dropout > 0.0;
        let logits_col = if dropout_on {
            let rng = rng.ok_or_else(|| {
                LainError::domain("forward_batch", "dropout is active but no rng was provided")
            })?;
            let mut draw = DropoutDraw { rng, keep: 1.0 - cfg.dropout };
            self.head.forward_rows(g, fused, Some(&mut draw))?
        } else {
            self.head.forward_rows(g, fused, None)?
        };
        let logits = g.reshape(logits_col, vec![n])?;
        let raw_probs = g.sigmoid_op(logits);
        let probs = g.clamp(raw_probs, PROB_FLOOR, 1.0 - PROB_FLOOR);

        let y: Vec<f64> = samples.iter().map(|s| s.label as f64).collect();
        let one_minus_y: Vec<f64> = y.iter().map(|v| 1.0 - v).collect();
        let ln_p = g.ln(probs)?;
        let pos = g.mul_const(ln_p, y)?;
        let q = g.one_minus(probs);
        let ln_q = g.ln(q)?;
        let neg = g.mul_const(ln_q, one_minus_y)?;
        let sum = g.add(pos, neg)?;
        let total = g.sum_all(sum);
        let loss = g.scale(total, -1.0 / n as f64);

        Ok(ForwardPass { loss, probs, traces, degenerate_traces: degenerate })
    }

    /// Single-sample eval convenience: click probability plus traces.
    pub fn forward_one(&self, sample: &Sample) -> Result<(f64, Vec<AttentionTrace>)> {
        let mut g = Graph::new(&self.params);
        let pass = self.forward_batch(&mut g, std::slice::from_ref(sample), Mode::Eval, None)?;
        Ok((g.value(pass.probs).data()[0], pass.traces))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let params = self
            .params
            .iter()
            .map(|(_, p)| ParamBlob {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.data().to_vec(),
            })
            .collect();
        Checkpoint {
            config: self.cfg.clone(),
            param_report: count_parameters(&self.params),
            params,
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Model> {
        let mut model = Model::new(ck.config, 0)?;
        let report = count_parameters(&model.params);
        if ck.param_report.total != report.total {
            return Err(LainError::Checkpoint(format!(
                "parameter report claims {} scalars, config implies {}",
                ck.param_report.total, report.total
            )));
        }
        if ck.params.len() != model.params.len() {
            return Err(LainError::Checkpoint(format!(
                "expected {} parameters for this config, found {}",
                model.params.len(),
                ck.params.len()
            )));
        }
        for blob in ck.params {
            let id = model.params.lookup(&blob.name).ok_or_else(|| {
                LainError::Checkpoint(format!("unknown parameter '{}'", blob.name))
            })?;
            let p = model.params.get_mut(id);
            if p.tensor.shape() != blob.shape.as_slice() {
                return Err(LainError::Checkpoint(format!(
                    "parameter '{}' has shape {:?}, checkpoint carries {:?}",
                    blob.name,
                    p.tensor.shape(),
                    blob.shape
                )));
            }
            p.tensor = Tensor::new(blob.shape, blob.data)?;
        }
        Ok(model)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_checkpoint())?;
        std::fs::write(path, text).map_err(|e| LainError::io(path.display().to_string(), e))
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LainError::io(path.display().to_string(), e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        Model::from_checkpoint(ck)
    }
}

/// Config echo plus named parameter blobs; JSON round-trips are bitwise
/// stable because values are written with shortest-exact float formatting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    /// Component split of the stored parameters, kept in the file so a
    /// checkpoint documents its own size and LAIN overhead.
    pub param_report: ParamReport,
    pub params: Vec<ParamBlob>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlob {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d: 6,
            d_f: 4,
            k: 2,
            hidden: 8,
            short_window: 3,
            gsu_topk: 4,
            max_len: 50,
            head_dims: vec![8, 4],
            dropout: 0.0,
            vocab_size: 12,
            l0: 10.0,
            ..ModelConfig::default()
        }
    }

    fn sample(user: u64, target: u32, hist: &[u32], raw: u32, label: u8) -> Sample {
        Sample {
            user_id: user,
            target_item_id: target,
            behavior_ids: hist.to_vec(),
            raw_length: raw,
            label,
        }
    }

    fn tiny_batch() -> Vec<Sample> {
        vec![
            sample(0, 3, &[1, 2, 5, 7], 4, 1),
            sample(1, 9, &[4, 4, 11, 2, 8, 1], 37, 0),
            sample(2, 1, &[], 0, 0),
            sample(3, 6, &[10, 3], 2, 1),
        ]
    }

    fn eval_probs(m: &Model, batch: &[Sample]) -> Vec<f64> {
        let mut g = Graph::new(&m.params);
        let pass = m.forward_batch(&mut g, batch, Mode::Eval, None).unwrap();
        g.value(pass.probs).data().to_vec()
    }

    #[test]
    fn gsu_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..30 {
            let n = rng.gen_range(1..=20);
            let d = 8;
            let seq = Tensor::new(
                vec![n, d],
                (0..n * d).map(|_| rng.gen_range(-1.0..1.0f64)).collect(),
            )
            .unwrap();
            let target: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
            let topk = rng.gen_range(1..=6);
            let (idx, sub) = gsu_retrieve(&target, &seq, &mask, topk).unwrap();

            // Oracle: exhaustive sort of all valid inner products.
            let mut scored: Vec<(usize, f64)> = (0..n)
                .filter(|&i| mask[i])
                .map(|i| (i, dot(&target, seq.row(i))))
                .collect();
            scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut expect: Vec<usize> = scored.iter().take(topk).map(|s| s.0).collect();
            expect.sort_unstable();
            assert_eq!(idx, expect, "trial {trial}");
            assert_eq!(sub.rows(), idx.len());
            for (r, &i) in idx.iter().enumerate() {
                assert_eq!(sub.row(r), seq.row(i));
            }
            assert!(idx.windows(2).all(|w| w[0] < w[1]), "chronological order");
        }
    }

    #[test]
    fn gsu_score_ordering_keeps_chronology() {
        // scores [1.0, 5.0, 3.0], topk 2: positions 1 and 2 win, emitted in
        // original order.
        let seq = Tensor::new(vec![3, 1], vec![1.0, 5.0, 3.0]).unwrap();
        let (idx, sub) = gsu_retrieve(&[1.0], &seq, &[true; 3], 2).unwrap();
        assert_eq!(idx, vec![1, 2]);
        assert_eq!(sub.data(), &[5.0, 3.0]);
        // Saturation: topk >= n returns everything.
        let (all, _) = gsu_retrieve(&[1.0], &seq, &[true; 3], 9).unwrap();
        assert_eq!(all, vec![0, 1, 2]);
        // No valid positions: empty retrieval.
        let (none, sub) = gsu_retrieve(&[1.0], &seq, &[false; 3], 2).unwrap();
        assert!(none.is_empty());
        assert_eq!(sub.rows(), 0);
        assert!(gsu_retrieve(&[1.0], &seq, &[true; 3], 0).is_err(), "topk 0 rejected");
    }

    #[test]
    fn embedding_gradient_is_sparse_over_lookups() {
        let m = Model::new(tiny_cfg(), 3).unwrap();
        let batch = vec![sample(0, 3, &[1, 5], 2, 1)];
        let mut g = Graph::new(&m.params);
        let pass = m.forward_batch(&mut g, &batch, Mode::Eval, None).unwrap();
        g.backward(pass.loss).unwrap();
        let grads = g.into_param_grads();
        let (_, emb_grad) = grads
            .iter()
            .find(|(id, _)| *id == m.embedding)
            .expect("embedding gradient present");
        let d = m.cfg.d;
        let touched = [1usize, 3, 5];
        for row in 0..m.cfg.vocab_size as usize {
            let slice = &emb_grad[row * d..(row + 1) * d];
            let nonzero = slice.iter().any(|&v| v != 0.0);
            if touched.contains(&row) {
                assert!(nonzero, "looked-up row {row} must receive gradient");
            } else {
                assert!(!nonzero, "untouched row {row} must have zero gradient");
            }
        }
    }

    #[test]
    fn padding_row_stays_zero_and_out_of_vocab_is_named() {
        let m = Model::new(tiny_cfg(), 1).unwrap();
        let emb = &m.params.get(m.embedding).tensor;
        assert!(emb.row(0).iter().all(|&v| v == 0.0), "padding row must be zero");
        let bad = vec![sample(0, 12, &[1], 1, 0)];
        let mut g = Graph::new(&m.params);
        let err = m.forward_batch(&mut g, &bad, Mode::Eval, None).unwrap_err();
        assert!(err.to_string().contains("12"), "error names the offending id: {err}");
    }

    #[test]
    fn constant_head_emits_sigmoid_of_bias() {
        let mut m = Model::new(tiny_cfg(), 7).unwrap();
        // Zero every head weight, then set the output bias.
        let names: Vec<String> = m
            .params
            .iter()
            .filter(|(_, p)| p.name.starts_with("head."))
            .map(|(_, p)| p.name.clone())
            .collect();
        for name in names {
            let id = m.params.lookup(&name).unwrap();
            m.params.get_mut(id).tensor.data_mut().fill(0.0);
        }
        let last = m.head.layers.last().unwrap();
        let b = 0.65;
        m.params.get_mut(last.b).tensor.data_mut()[0] = b;
        let expect = crate::tensor::sigmoid(b);
        for p in eval_probs(&m, &tiny_batch()) {
            assert!((p - expect).abs() < 1e-15, "constant head: {p} vs {expect}");
        }
    }

    #[test]
    fn eval_forward_is_bitwise_deterministic() {
        let m = Model::new(tiny_cfg(), 11).unwrap();
        let batch = tiny_batch();
        let a = eval_probs(&m, &batch);
        let b = eval_probs(&m, &batch);
        assert_eq!(a, b, "two eval passes must agree bitwise");
        // Batched rows equal one-sample passes exactly.
        for (i, s) in batch.iter().enumerate() {
            let (p, _) = m.forward_one(s).unwrap();
            assert_eq!(p, a[i], "sample {i}");
        }
    }

    #[test]
    fn probabilities_stay_clamped() {
        let m = Model::new(tiny_cfg(), 13).unwrap();
        for p in eval_probs(&m, &tiny_batch()) {
            assert!((PROB_FLOOR..=1.0 - PROB_FLOOR).contains(&p));
        }
    }

    #[test]
    fn graph_loss_matches_pure_bce() {
        let m = Model::new(tiny_cfg(), 17).unwrap();
        let batch = tiny_batch();
        let mut g = Graph::new(&m.params);
        let pass = m.forward_batch(&mut g, &batch, Mode::Eval, None).unwrap();
        let probs = g.value(pass.probs).data().to_vec();
        let labels: Vec<f64> = batch.iter().map(|s| s.label as f64).collect();
        let oracle = crate::tensor::bce_loss(&probs, &labels).unwrap();
        let got = g.value(pass.loss).as_scalar();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn variant_flags_and_parameter_registration() {
        let mut cfg = tiny_cfg();
        Variant::Baseline.apply(&mut cfg);
        assert!(!cfg.lain_active());
        let base = Model::new(cfg.clone(), 19).unwrap();
        assert_eq!(base.params.scalar_count(Some(Component::Sle)), 0);
        assert_eq!(base.params.scalar_count(Some(Component::Lcp)), 0);
        assert_eq!(base.params.scalar_count(Some(Component::Lma)), 0);
        assert!(base.encoder.is_none() && base.prompts.is_none());

        let mut no_qk = tiny_cfg();
        Variant::NoQk.apply(&mut no_qk);
        let m = Model::new(no_qk, 19).unwrap();
        assert!(m.qk.is_none() && m.temp.is_some());
        assert_eq!(m.params.scalar_count(Some(Component::Lma)), 2, "temperature pair only");

        let mut no_temp = tiny_cfg();
        Variant::NoTemp.apply(&mut no_temp);
        let m = Model::new(no_temp, 19).unwrap();
        assert!(m.qk.is_some() && m.temp.is_none());

        let mut no_lma = tiny_cfg();
        Variant::NoLma.apply(&mut no_lma);
        assert!(!no_lma.qk_cond && !no_lma.temp_scale, "master switch clears both");
        let m = Model::new(no_lma, 19).unwrap();
        assert_eq!(m.params.scalar_count(Some(Component::Lma)), 0);
        assert!(m.encoder.is_some(), "prompting still needs the length encoder");

        let mut no_short = tiny_cfg();
        Variant::NoShort.apply(&mut no_short);
        assert_eq!(no_short.fusion_dim(), 3 * no_short.d);

        assert!(Variant::parse("no-qk").is_ok());
        assert!(Variant::parse("nope").is_err());
    }

    #[test]
    fn shared_parameters_identical_across_variants() {
        // Per-component init streams: the embedding table must be bitwise
        // identical between the full model and the baseline at equal seed.
        let full = Model::new(tiny_cfg(), 23).unwrap();
        let mut cfg = tiny_cfg();
        Variant::Baseline.apply(&mut cfg);
        let base = Model::new(cfg, 23).unwrap();
        assert_eq!(
            full.params.get(full.embedding).tensor.data(),
            base.params.get(base.embedding).tensor.data()
        );
    }

    #[test]
    fn flags_off_model_is_bitwise_baseline() {
        let mut by_flags = tiny_cfg();
        by_flags.lcp = false;
        by_flags.lma = false;
        by_flags.qk_cond = false;
        by_flags.temp_scale = false;
        let a = Model::new(by_flags, 29).unwrap();
        let mut by_variant = tiny_cfg();
        Variant::Baseline.apply(&mut by_variant);
        let b = Model::new(by_variant, 29).unwrap();
        assert_eq!(a.params.len(), b.params.len());
        for ((_, pa), (_, pb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(pa.name, pb.name);
            assert_eq!(pa.tensor.data(), pb.tensor.data(), "parameter {}", pa.name);
        }
        assert_eq!(eval_probs(&a, &tiny_batch()), eval_probs(&b, &tiny_batch()));
    }

    #[test]
    fn parameter_count_matches_closed_form_at_default_dims() {
        let cfg = ModelConfig { vocab_size: 5001, l0: 147.0, ..ModelConfig::default() };
        let m = Model::new(cfg, 0).unwrap();
        let r = count_parameters(&m.params);
        // Hand-derived, layer by layer, at d=64, d_f=32, k=4, hidden=512,
        // vocab=5001, head [256 -> 128 -> 64 -> 1]:
        let emb = 5001 * 64;
        let head = (256 * 128 + 128) + (128 * 64 + 64) + (64 + 1);
        let sle = 32                      // frequencies
            + (64 * 512 + 512)            // feature projection (2*d_f -> hidden)
            + (512 + 512)                 // layer norm gain + bias
            + (512 * 512 + 512)           // refinement hidden
            + (512 * 64 + 64);            // refinement output
        let lcp = (64 * 512 + 512) + (512 * 256 + 256);
        let lma = (64 * 64 + 64) + 4 * (64 * 64) + 2;
        assert_eq!(r.shared, emb + head);
        assert_eq!(r.sle, sle);
        assert_eq!(r.lcp, lcp);
        assert_eq!(r.lma, lma);
        assert_eq!(r.total, emb + head + sle + lcp + lma);
        assert_eq!(r.total, 876_259);
        let lain = (sle + lcp + lma) as f64;
        assert!((r.lain_fraction - lain / 876_259.0).abs() < 1e-15);

        let mut baseline = ModelConfig { vocab_size: 5001, l0: 147.0, ..ModelConfig::default() };
        Variant::Baseline.apply(&mut baseline);
        let b = Model::new(baseline, 0).unwrap();
        let rb = count_parameters(&b.params);
        assert_eq!(rb.total, 5001 * 64 + (192 * 128 + 128) + (128 * 64 + 64) + 65);
        assert_eq!(rb.total, 353_089);
        assert_eq!(rb.lain_fraction, 0.0);
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let m = Model::new(tiny_cfg(), 31).unwrap();
        let dir = std::env::temp_dir().join(format!("lain-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        m.save_checkpoint(&path).unwrap();
        let loaded = Model::load_checkpoint(&path).unwrap();
        assert_eq!(loaded.cfg, m.cfg);
        assert_eq!(loaded.params.len(), m.params.len());
        for ((_, a), (_, b)) in m.params.iter().zip(loaded.params.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.shape(), b.tensor.shape());
            let ab: Vec<u64> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u64> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "parameter {} must round-trip bitwise", a.name);
        }
        assert_eq!(eval_probs(&m, &tiny_batch()), eval_probs(&loaded, &tiny_batch()));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_rejects_mismatched_shapes() {
        let m = Model::new(tiny_cfg(), 37).unwrap();
        let mut ck = m.to_checkpoint();
        ck.params[0].shape = vec![1, 1];
        ck.params[0].data = vec![0.0];
        let err = Model::from_checkpoint(ck).unwrap_err();
        assert!(err.to_string().contains("shape"), "{err}");
    }

    #[test]
    fn dropout_requires_rng_and_perturbs_training_forward() {
        let mut cfg = tiny_cfg();
        cfg.dropout = 0.5;
        let m = Model::new(cfg, 41).unwrap();
        let batch = tiny_batch();
        let mut g = Graph::new(&m.params);
        assert!(m.forward_batch(&mut g, &batch, Mode::Train, None).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut g1 = Graph::new(&m.params);
        let p1 = m.forward_batch(&mut g1, &batch, Mode::Train, Some(&mut rng)).unwrap();
        let v1 = g1.value(p1.probs).data().to_vec();
        let mut g2 = Graph::new(&m.params);
        let p2 = m.forward_batch(&mut g2, &batch, Mode::Train, Some(&mut rng)).unwrap();
        let v2 = g2.value(p2.probs).data().to_vec();
        assert_ne!(v1, v2, "fresh dropout masks must move the outputs");
        // Eval ignores dropout entirely.
        assert_eq!(eval_probs(&m, &batch), eval_probs(&m, &batch));
    }

    #[test]
    fn traces_cover_branches_and_strip_prompts() {
        let cfg = tiny_cfg();
        let m = Model::new(cfg, 43).unwrap();
        let batch = tiny_batch();
        let mut g = Graph::new(&m.params);
        let pass = m.forward_batch(&mut g, &batch, Mode::Eval, None).unwrap();
        // Sample 2 has an empty history: with prompting on, both its
        // branches attend over prompts alone, so its traces are degenerate.
        assert_eq!(pass.degenerate_traces + pass.traces.len(), 2 * batch.len());
        assert!(pass.degenerate_traces >= 2);
        for t in &pass.traces {
            let s = &batch[t.user_id as usize];
            let expect_len = match t.branch {
                "short" => s.behavior_ids.len().min(m.cfg.short_window),
                "long" => s.behavior_ids.len().min(m.cfg.gsu_topk),
                other => panic!("unexpected branch {other}"),
            };
            assert_eq!(t.weights.len(), expect_len, "branch {} of user {}", t.branch, t.user_id);
            let sum: f64 = t.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
            assert_eq!(t.bucket, bucket_of(s.raw_length, m.cfg.bucket_bounds));
        }
        // Train mode records nothing.
        let mut g = Graph::new(&m.params);
        let train = m.forward_batch(&mut g, &batch, Mode::Train, None).unwrap();
        assert!(train.traces.is_empty() && train.degenerate_traces == 0);
    }

    #[test]
    fn full_model_batch_gradients_match_finite_differences() {
        use crate::gradcheck::{grad_check, CoordPolicy, EvalPoint};

        // gsu_topk exceeds every history length so the discrete retrieval
        // step cannot flip under parameter perturbation.
        let mut cfg = tiny_cfg();
        cfg.gsu_topk = 8;
        let m = Model::new(cfg, 47).unwrap();
        let batch = tiny_batch();
        let eval = |p: &ParamSet| -> Result<EvalPoint> {
            let shadow = Model { params: p.clone(), ..reborrow(&m) };
            let mut g = Graph::new(p);
            let pass = shadow.forward_batch(&mut g, &batch, Mode::Eval, None)?;
            Ok(EvalPoint { value: g.value(pass.loss).as_scalar(), region: g.region_signature() })
        };
        let analytic = |p: &ParamSet| -> Result<Vec<(ParamId, Vec<f64>)>> {
            let shadow = Model { params: p.clone(), ..reborrow(&m) };
            let mut g = Graph::new(p);
            let pass = shadow.forward_batch(&mut g, &batch, Mode::Eval, None)?;
            g.backward(pass.loss)?;
            Ok(g.into_param_grads())
        };
        let mut probe = m.params.clone();
        let report =
            grad_check(eval, analytic, &mut probe, 1e-4, 1e-4, CoordPolicy::Exhaustive).unwrap();
        assert!(report.passed, "{}", report.render_table());
    }

    // Clone a model's structure (ids and config) for use with a perturbed
    // parameter set that shares the same layout.
    fn reborrow(m: &Model) -> Model {
        Model {
            cfg: m.cfg.clone(),
            params: ParamSet::new(),
            embedding: m.embedding,
            encoder: m.encoder.clone(),
            prompts: m.prompts.clone(),
            qk: m.qk.clone(),
            temp: m.temp.clone(),
            head: m.head.clone(),
        }
    }
}
