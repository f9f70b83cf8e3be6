//! Adam optimization, the epoch loop with validation-AUC early stopping,
//! the short-vs-long shared-gradient conflict probe, and the ablation
//! experiment matrix with file-based resume.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionTrace, Mode, Model, ModelConfig, Variant};
use crate::data::{bundle_from_log, generate_synthetic, load_external, DatasetBundle, GeneratorConfig, Sample};
use crate::error::{LainError, Result};
use crate::graph::Graph;
use crate::metrics::{auc, bucketed_report, report_csv, BucketMetrics, BucketedReport, EvalRecord};
use crate::params::{Component, ParamId, ParamSet};

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub hyper: AdamHyper,
    pub t: u64,
    slots: Vec<(ParamId, Vec<f64>, Vec<f64>)>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, hyper: AdamHyper) -> Self {
        let slots = params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, p)| (id, vec![0.0; p.tensor.len()], vec![0.0; p.tensor.len()]))
            .collect();
        OptimizerState { hyper, t: 0, slots }
    }

    /// Invariant probe: the second moments can never go negative.
    pub fn second_moments_nonnegative(&self) -> bool {
        self.slots.iter().all(|(_, _, v)| v.iter().all(|x| *x >= 0.0))
    }
}

/// One Adam update over every trainable parameter. `grads` must be sorted by
/// parameter id (the autodiff tape emits them that way) and cover every
/// trainable parameter.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[(ParamId, Vec<f64>)],
    state: &mut OptimizerState,
) -> Result<()> {
    state.t += 1;
    let h = state.hyper;
    let bc1 = 1.0 - h.beta1.powi(state.t as i32);
    let bc2 = 1.0 - h.beta2.powi(state.t as i32);
    for (id, m, v) in &mut state.slots {
        let g = match grads.binary_search_by_key(&id.0, |(gid, _)| gid.0) {
            Ok(i) => &grads[i].1,
            Err(_) => {
                return Err(LainError::Training(format!(
                    "no gradient supplied for parameter '{}'",
                    params.get(*id).name
                )))
            }
        };
        if g.len() != m.len() {
            return Err(LainError::Training(format!(
                "gradient for '{}' has {} entries, parameter has {}",
                params.get(*id).name,
                g.len(),
                m.len()
            )));
        }
        let theta = params.get_mut(*id).tensor.data_mut();
        for i in 0..g.len() {
            m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g[i];
            v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= h.lr * m_hat / (v_hat.sqrt() + h.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Early stopping
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Wait,
    Stop,
}

/// Patience counter over a maximized validation metric. Improvement is
/// strict; `patience` consecutive non-improving epochs are tolerated, one
/// more stops the run (`patience = 0` stops on the first non-improvement).
#[derive(Debug, Clone)]
pub struct EarlyStop {
    pub patience: usize,
    pub best: Option<(usize, f64)>,
    pub since_improve: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        EarlyStop { patience, best: None, since_improve: 0 }
    }

    pub fn observe(&mut self, epoch: usize, value: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if value <= b => {
                self.since_improve += 1;
                if self.since_improve > self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Wait
                }
            }
            _ => {
                self.best = Some((epoch, value));
                self.since_improve = 0;
                StopDecision::Improved
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient-conflict probe
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConflictStats {
    pub inner_product: f64,
    /// Undefined when either gradient has zero norm.
    pub cosine: Option<f64>,
}

/// Inner product and cosine between two flattened gradient vectors.
pub fn conflict_stats(g_short: &[f64], g_long: &[f64]) -> Result<ConflictStats> {
    if g_short.len() != g_long.len() {
        return Err(LainError::Training(format!(
            "conflict probe gradients differ in length: {} vs {}",
            g_short.len(),
            g_long.len()
        )));
    }
    let inner: f64 = g_short.iter().zip(g_long).map(|(a, b)| a * b).sum();
    let ns = g_short.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nl = g_long.iter().map(|a| a * a).sum::<f64>().sqrt();
    let cosine = (ns > 0.0 && nl > 0.0).then(|| inner / (ns * nl));
    Ok(ConflictStats { inner_product: inner, cosine })
}

fn shared_gradient(model: &mut Model, batch: &[Sample]) -> Result<Vec<f64>> {
    let mut g = Graph::new(&model.params);
    let pass = model.forward_batch(&mut g, batch, Mode::Eval, None)?;
    g.backward(pass.loss)?;
    let grads = g.into_param_grads();
    model.params.clear_grads();
    for (id, grad) in grads {
        *model.params.get_mut(id).tensor.grad_mut() = grad;
    }
    model.params.flat_grad(Some(Component::Shared))
}

/// Measure agreement between the shared-parameter gradients induced by a
/// short-history batch and a long-history batch. `None` when either batch is
/// empty (the probe is skipped, not failed).
pub fn gradient_conflict_probe(
    model: &mut Model,
    batch_short: &[Sample],
    batch_long: &[Sample],
) -> Result<Option<ConflictStats>> {
    if batch_short.is_empty() || batch_long.is_empty() {
        return Ok(None);
    }
    let gs = shared_gradient(model, batch_short)?;
    let gl = shared_gradient(model, batch_long)?;
    Ok(Some(conflict_stats(&gs, &gl)?))
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub adam: AdamHyper,
    /// Record the short-vs-long gradient conflict each epoch.
    pub conflict_probe: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_epochs: 30,
            patience: 3,
            adam: AdamHyper::default(),
            conflict_probe: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(LainError::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(LainError::Config("max_epochs must be at least 1".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(LainError::Config(format!("lr must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_auc: f64,
    pub conflict_inner: Option<f64>,
    pub conflict_cosine: Option<f64>,
}

#[derive(Debug)]
pub struct TrainOutcome {
    /// Weights of the best-validation epoch.
    pub model: Model,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_valid_auc: f64,
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn stream_seed(seed: u64, tag: &str) -> u64 {
    seed ^ fnv64(tag.as_bytes())
}

/// Batched eval-mode predictions with attention traces.
#[derive(Debug)]
pub struct Evaluation {
    pub records: Vec<EvalRecord>,
    pub traces: Vec<AttentionTrace>,
    pub degenerate_traces: usize,
}

pub fn evaluate(model: &Model, samples: &[Sample], batch_size: usize) -> Result<Evaluation> {
    if batch_size == 0 {
        return Err(LainError::Config("batch_size must be at least 1".into()));
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut traces = Vec::new();
    let mut degenerate = 0;
    for chunk in samples.chunks(batch_size) {
        let mut g = Graph::new(&model.params);
        let pass = model.forward_batch(&mut g, chunk, Mode::Eval, None)?;
        let probs = g.value(pass.probs).data();
        for (s, &p) in chunk.iter().zip(probs) {
            records.push(EvalRecord {
                user_id: s.user_id,
                raw_length: s.raw_length,
                prediction: p,
                label: s.label,
            });
        }
        traces.extend(pass.traces);
        degenerate += pass.degenerate_traces;
    }
    Ok(Evaluation { records, traces, degenerate_traces: degenerate })
}

fn split_auc(model: &Model, samples: &[Sample], batch_size: usize) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let eval = evaluate(model, samples, batch_size)?;
    let preds: Vec<f64> = eval.records.iter().map(|r| r.prediction).collect();
    let labels: Vec<u8> = eval.records.iter().map(|r| r.label).collect();
    auc(&preds, &labels)
}

/// Train a fresh model on the bundle. The model's vocabulary and temperature
/// anchor come from the dataset; everything else from `model_cfg`. Returns
/// the best-validation weights and the per-epoch history.
pub fn train(
    bundle: &DatasetBundle,
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    tc.validate()?;
    if bundle.train.is_empty() {
        return Err(LainError::Training("training split is empty".into()));
    }
    let mut cfg = model_cfg.clone();
    cfg.vocab_size = bundle.vocab_size;
    cfg.l0 = bundle.l0;
    let mut model = Model::new(cfg, seed)?;

    let mut opt = OptimizerState::new(&model.params, tc.adam);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, "dropout"));

    // Fixed probe batches: the earliest short-bucket and long-bucket
    // training samples, chosen once so the per-epoch series is comparable.
    let bounds = model.cfg.bucket_bounds;
    let probe_short: Vec<Sample> = bundle
        .train
        .iter()
        .filter(|s| s.raw_length < bounds[0])
        .take(tc.batch_size)
        .cloned()
        .collect();
    let probe_long: Vec<Sample> = bundle
        .train
        .iter()
        .filter(|s| s.raw_length >= bounds[1])
        .take(tc.batch_size)
        .cloned()
        .collect();

    let n = bundle.train.len();
    let mut stopper = EarlyStop::new(tc.patience);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamSet)> = None;

    for epoch in 1..=tc.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(stream_seed(seed, &format!("shuffle.{epoch}")));
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<Sample> = chunk.iter().map(|&i| bundle.train[i].clone()).collect();
            let mut g = Graph::new(&model.params);
            let rng = (model.cfg.dropout > 0.0).then_some(&mut dropout_rng);
            let pass = model.forward_batch(&mut g, &batch, Mode::Train, rng)?;
            loss_sum += g.value(pass.loss).as_scalar() * batch.len() as f64;
            g.backward(pass.loss)?;
            let grads = g.into_param_grads();
            adam_step(&mut model.params, &grads, &mut opt)?;
        }
        let train_loss = loss_sum / n as f64;

        let valid_auc = match split_auc(&model, &bundle.valid, tc.batch_size)? {
            Some(a) => a,
            None => {
                let pos = bundle.valid.iter().filter(|s| s.label == 1).count();
                return Err(LainError::Training(format!(
                    "validation AUC is undefined in epoch {epoch}: the validation split has \
                     {} samples ({pos} positive) and needs both classes",
                    bundle.valid.len()
                )));
            }
        };

        let conflict = if tc.conflict_probe {
            gradient_conflict_probe(&mut model, &probe_short, &probe_long)?
        } else {
            None
        };

        history.push(EpochStats {
            epoch,
            train_loss,
            valid_auc,
            conflict_inner: conflict.map(|c| c.inner_product),
            conflict_cosine: conflict.and_then(|c| c.cosine),
        });

        match stopper.observe(epoch, valid_auc) {
            StopDecision::Improved => best = Some((epoch, valid_auc, model.params.clone())),
            StopDecision::Wait => {}
            StopDecision::Stop => break,
        }
    }

    let (best_epoch, best_valid_auc, best_params) =
        best.expect("the first epoch always registers as an improvement");
    model.params = best_params;
    Ok(TrainOutcome { model, history, best_epoch, best_valid_auc })
}

fn csv_f64(v: f64) -> String {
    v.to_string()
}

/// `epoch,train_loss,valid_auc,conflict_cosine` with one row per epoch;
/// a skipped probe leaves its cell empty.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,valid_auc,conflict_cosine\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch,
            csv_f64(h.train_loss),
            csv_f64(h.valid_auc),
            h.conflict_cosine.map(csv_f64).unwrap_or_default()
        ));
    }
    out
}

// ---------------------------------------------------------------------------
// Experiment matrix
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    /// Variant names; each cell trains one (variant, seed) pair.
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
    /// Optional external event-log path; when unset, the generator runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_path: Option<String>,
    pub generator: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            variants: Variant::all().iter().map(|v| v.name().to_string()).collect(),
            seeds: vec![1, 2, 3],
            data_path: None,
            generator: GeneratorConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentPlan {
    /// Structural validation. Variant names are checked per cell so a typo
    /// fails that cell alone rather than the whole matrix.
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() || self.seeds.is_empty() {
            return Err(LainError::Config("plan needs at least one variant and one seed".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for v in &self.variants {
            if !seen.insert(v.as_str()) {
                return Err(LainError::Config(format!("variant {v:?} listed twice")));
            }
        }
        let mut seeds = std::collections::BTreeSet::new();
        for s in &self.seeds {
            if !seeds.insert(*s) {
                return Err(LainError::Config(format!("seed {s} listed twice")));
            }
        }
        self.train.validate()
    }

    pub fn digest(&self) -> String {
        let text = serde_json::to_string(self).expect("plan serializes");
        format!("{:016x}", fnv64(text.as_bytes()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub variant: String,
    pub seed: u64,
    pub status: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatrixManifest {
    pub plan_digest: String,
    pub dataset_digest: String,
    pub cells: Vec<CellStatus>,
}

#[derive(Debug)]
pub struct MatrixOutcome {
    pub manifest: MatrixManifest,
    pub reports: BTreeMap<(String, u64), BucketedReport>,
    pub any_failed: bool,
    pub summary_csv: String,
}

pub fn cell_dir_name(variant: &str, seed: u64) -> String {
    format!("{variant}-s{seed}")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| LainError::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn run_cell(
    plan: &ExperimentPlan,
    bundle: &DatasetBundle,
    variant: &str,
    seed: u64,
    dir: &Path,
) -> Result<BucketedReport> {
    std::fs::create_dir_all(dir).map_err(|e| LainError::io(dir.display().to_string(), e))?;
    let v = Variant::parse(variant)?;
    let mut cfg = plan.model.clone();
    v.apply(&mut cfg);
    let outcome = train(bundle, &cfg, &plan.train, seed)?;
    outcome.model.save_checkpoint(&dir.join("checkpoint.json"))?;
    write_text(&dir.join("history.csv"), &history_csv(&outcome.history))?;
    let eval = evaluate(&outcome.model, &bundle.test, plan.train.batch_size)?;
    let report = bucketed_report(&eval.records, &eval.traces, &outcome.model.cfg, &bundle.digest)?;
    write_json(&dir.join("report.json"), &report)?;
    write_text(&dir.join("report.csv"), &report_csv(&report))?;
    Ok(report)
}

fn metric_value(m: &BucketMetrics, metric: &str) -> Option<f64> {
    match metric {
        "auc" => m.auc,
        "gauc" => m.gauc,
        "logloss" => m.logloss,
        "mean_gini" => m.mean_gini,
        "mean_entropy" => m.mean_entropy,
        _ => None,
    }
}

fn report_slice<'a>(r: &'a BucketedReport, bucket: &str) -> &'a BucketMetrics {
    match bucket {
        "short" => &r.short,
        "medium" => &r.medium,
        "long" => &r.long,
        _ => &r.overall,
    }
}

const SUMMARY_BUCKETS: [&str; 4] = ["short", "medium", "long", "overall"];
const SUMMARY_METRICS: [&str; 5] = ["auc", "gauc", "logloss", "mean_gini", "mean_entropy"];

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `variant,bucket,metric,mean,std,rel_gain_vs_baseline` aggregated over
/// seeds; relative gains are percentages against the baseline variant's mean
/// (empty when the baseline is absent or its mean is zero/undefined).
pub fn summary_csv(
    variants: &[String],
    seeds: &[u64],
    reports: &BTreeMap<(String, u64), BucketedReport>,
) -> String {
    let mean_of = |variant: &str, bucket: &str, metric: &str| -> Option<(f64, f64)> {
        let values: Vec<f64> = seeds
            .iter()
            .filter_map(|&s| reports.get(&(variant.to_string(), s)))
            .filter_map(|r| metric_value(report_slice(r, bucket), metric))
            .collect();
        if values.is_empty() {
            None
        } else {
            Some(mean_std(&values))
        }
    };
    let mut out = String::from("variant,bucket,metric,mean,std,rel_gain_vs_baseline\n");
    for variant in variants {
        for bucket in SUMMARY_BUCKETS {
            for metric in SUMMARY_METRICS {
                let (mean_cell, std_cell, gain_cell) = match mean_of(variant, bucket, metric) {
                    Some((mean, std)) => {
                        let gain = mean_of("baseline", bucket, metric)
                            .filter(|(b, _)| b.abs() > 1e-300)
                            .map(|(b, _)| format!("{:+.4}%", (mean - b) / b * 100.0))
                            .unwrap_or_default();
                        (mean.to_string(), std.to_string(), gain)
                    }
                    None => (String::new(), String::new(), String::new()),
                };
                out.push_str(&format!(
                    "{variant},{bucket},{metric},{mean_cell},{std_cell},{gain_cell}\n"
                ));
            }
        }
    }
    out
}

/// Load or generate the plan's dataset.
pub fn plan_bundle(plan: &ExperimentPlan) -> Result<DatasetBundle> {
    match &plan.data_path {
        Some(p) => load_external(Path::new(p), plan.model.max_len),
        None => {
            let generated = generate_synthetic(&plan.generator)?;
            bundle_from_log(&generated.log, plan.model.max_len, 0)
        }
    }
}

/// Run every (variant, seed) cell, continuing past individual failures.
/// `bundle` is the dataset the plan describes (see [`plan_bundle`]). With
/// `resume`, cells the manifest records as done (and whose report still
/// parses) are not recomputed. The manifest is rewritten after every cell so
/// an interrupted matrix can pick up where it stopped.
pub fn run_experiment_matrix(
    plan: &ExperimentPlan,
    bundle: &DatasetBundle,
    out_dir: &Path,
    resume: bool,
) -> Result<MatrixOutcome> {
    plan.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| LainError::io(out_dir.display().to_string(), e))?;
    let plan_digest = plan.digest();

    let manifest_path = out_dir.join("manifest.json");
    let previous: Option<MatrixManifest> = if resume && manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path)
            .map_err(|e| LainError::io(manifest_path.display().to_string(), e))?;
        let m: MatrixManifest = serde_json::from_str(&text)?;
        if m.plan_digest != plan_digest || m.dataset_digest != bundle.digest {
            return Err(LainError::Config(
                "existing manifest belongs to a different plan or dataset; \
                 rerun without --resume or use a fresh output directory"
                    .into(),
            ));
        }
        Some(m)
    } else {
        None
    };
    let done_before: std::collections::BTreeSet<(String, u64)> = previous
        .iter()
        .flat_map(|m| m.cells.iter())
        .filter(|c| c.status == "done")
        .map(|c| (c.variant.clone(), c.seed))
        .collect();

    let mut manifest = MatrixManifest {
        plan_digest,
        dataset_digest: bundle.digest.clone(),
        cells: Vec::new(),
    };
    let mut reports = BTreeMap::new();
    let mut any_failed = false;

    for variant in &plan.variants {
        for &seed in &plan.seeds {
            let key = (variant.clone(), seed);
            let dir = out_dir.join(cell_dir_name(variant, seed));
            let mut reused = false;
            if done_before.contains(&key) {
                if let Ok(text) = std::fs::read_to_string(dir.join("report.json")) {
                    if let Ok(r) = serde_json::from_str::<BucketedReport>(&text) {
                        reports.insert(key.clone(), r);
                        reused = true;
                    }
                }
            }
            let status = if reused {
                CellStatus { variant: variant.clone(), seed, status: "done".into(), error: None }
            } else {
                match run_cell(plan, bundle, variant, seed, &dir) {
                    Ok(report) => {
                        reports.insert(key, report);
                        CellStatus {
                            variant: variant.clone(),
                            seed,
                            status: "done".into(),
                            error: None,
                        }
                    }
                    Err(e) => {
                        any_failed = true;
                        CellStatus {
                            variant: variant.clone(),
                            seed,
                            status: "failed".into(),
                            error: Some(e.to_string()),
                        }
                    }
                }
            };
            manifest.cells.push(status);
            write_json(&manifest_path, &manifest)?;
        }
    }

    let summary = summary_csv(&plan.variants, &plan.seeds, &reports);
    write_text(&out_dir.join("summary.csv"), &summary)?;
    Ok(MatrixOutcome { manifest, reports, any_failed, summary_csv: summary })
}
