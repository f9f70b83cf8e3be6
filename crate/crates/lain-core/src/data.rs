//! Synthetic length-imbalanced interaction data, the JSONL interchange
//! format, length-bucket assignment, and the temporal train/valid/test
//! split.
//!
//! ## JSONL interchange format
//!
//! One JSON object per line: `{"user_id": "...", "item_id": "...", "ts": N,
//! "label": 0|1}`. Lines with `ts >= 0` are impressions; each becomes a
//! Sample whose history is every click strictly before it. Lines with
//! `ts < 0` are pre-window history (clicks that happened before logging
//! started): they seed the user's history but are never sampled, so a
//! round trip through export/import reconstructs the exact same samples.
//! Backfill lines must carry label 1 since they are clicks by definition.

use std::collections::HashMap;
use std::io::{BufRead, Write as IoWrite};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{LainError, Result};

pub const DEFAULT_BUCKET_BOUNDS: [u32; 2] = [100, 200];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Short,
    Medium,
    Long,
}

impl Bucket {
    pub fn label(self) -> &'static str {
        match self {
            Bucket::Short => "short",
            Bucket::Medium => "medium",
            Bucket::Long => "long",
        }
    }

    pub fn all() -> [Bucket; 3] {
        [Bucket::Short, Bucket::Medium, Bucket::Long]
    }
}

/// Half-open length buckets: short `< b1`, medium `[b1, b2)`, long `>= b2`.
pub fn bucket_of(raw_length: u32, bounds: [u32; 2]) -> Bucket {
    debug_assert!(bounds[0] < bounds[1], "bucket bounds must increase");
    if raw_length < bounds[0] {
        Bucket::Short
    } else if raw_length < bounds[1] {
        Bucket::Medium
    } else {
        Bucket::Long
    }
}

/// One impression with its click history at emission time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub user_id: u64,
    pub target_item_id: u32,
    /// Chronological clicked-item ids, truncated to the last `max_len`.
    pub behavior_ids: Vec<u32>,
    /// Pre-truncation history length.
    pub raw_length: u32,
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserEvents {
    pub name: String,
    /// Clicks before the impression window, chronological.
    pub base: Vec<u32>,
    /// (item, label) impressions, chronological.
    pub impressions: Vec<(u32, u8)>,
}

/// Per-user event streams with the string id tables they index into.
/// `item_names[0]` is the reserved padding slot and never appears in events.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventLog {
    pub users: Vec<UserEvents>,
    pub item_names: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Item vocabulary including the padding slot 0.
    pub vocab_size: u32,
    /// Mean raw length over training samples.
    pub l0: f64,
    /// FNV-1a 64 digest of the canonical event stream.
    pub digest: String,
    pub user_names: Vec<String>,
    /// Lines whose per-user timestamps arrived out of order.
    pub ts_warnings: usize,
}

impl DatasetBundle {
    pub fn split(&self, which: &str) -> Result<&[Sample]> {
        match which {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(LainError::Config(format!(
                "unknown split {other:?}; expected train, valid, or test"
            ))),
        }
    }
}

// ---------------------------------------------------------------------------
// Cohort specification (defaults follow the observed production skew)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub name: String,
    pub user_fraction: f64,
    pub mean_length: f64,
    pub std_length: f64,
    pub base_click_rate: f64,
    pub click_rate_std: f64,
    pub impressions_per_user: f64,
    pub interest_dims: usize,
}

pub fn default_cohorts() -> Vec<CohortSpec> {
    vec![
        CohortSpec {
            name: "short".into(),
            user_fraction: 0.57,
            mean_length: 37.1,
            std_length: 26.9,
            base_click_rate: 0.0828,
            click_rate_std: 0.0419,
            impressions_per_user: 5.5,
            interest_dims: 3,
        },
        CohortSpec {
            name: "medium".into(),
            user_fraction: 0.18,
            mean_length: 144.2,
            std_length: 28.7,
            base_click_rate: 0.0860,
            click_rate_std: 0.0304,
            impressions_per_user: 13.4,
            interest_dims: 4,
        },
        CohortSpec {
            name: "long".into(),
            user_fraction: 0.25,
            mean_length: 401.4,
            std_length: 183.3,
            base_click_rate: 0.0941,
            click_rate_std: 0.0252,
            impressions_per_user: 32.0,
            interest_dims: 5,
        },
    ]
}

pub fn validate_cohorts(cohorts: &[CohortSpec], n_topics: usize) -> Result<()> {
    if cohorts.is_empty() {
        return Err(LainError::Config("cohort list is empty".into()));
    }
    let total: f64 = cohorts.iter().map(|c| c.user_fraction).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(LainError::Config(format!(
            "cohort user fractions sum to {total}, expected 1"
        )));
    }
    for c in cohorts {
        if c.mean_length <= 0.0 || c.std_length <= 0.0 {
            return Err(LainError::Config(format!(
                "cohort {:?}: lengths must be positive (mean {}, std {})",
                c.name, c.mean_length, c.std_length
            )));
        }
        if !(c.base_click_rate > 0.0 && c.base_click_rate < 1.0) {
            return Err(LainError::Config(format!(
                "cohort {:?}: click rate {} outside (0,1)",
                c.name, c.base_click_rate
            )));
        }
        if c.click_rate_std < 0.0 {
            return Err(LainError::Config(format!("cohort {:?}: negative rate std", c.name)));
        }
        if c.impressions_per_user < 1.0 {
            return Err(LainError::Config(format!(
                "cohort {:?}: impressions_per_user must be >= 1",
                c.name
            )));
        }
        if c.interest_dims == 0 || c.interest_dims > n_topics {
            return Err(LainError::Config(format!(
                "cohort {:?}: interest_dims {} outside 1..={n_topics}",
                c.name, c.interest_dims
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub seed: u64,
    pub max_len: usize,
    pub cohorts: Vec<CohortSpec>,
    /// Latent topic-space dimensionality.
    pub topic_dim: usize,
    pub n_topics: usize,
    /// Logit weight on target-interest affinity.
    pub affinity_scale: f64,
    /// Probability an impression candidate is drawn from the user's topics.
    pub on_topic_prob: f64,
    /// Interpolation between the user's initial and final interest mix.
    pub drift: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_users: 2000,
            n_items: 5000,
            seed: 0,
            max_len: 1000,
            cohorts: default_cohorts(),
            topic_dim: 16,
            n_topics: 8,
            affinity_scale: 2.0,
            on_topic_prob: 0.5,
            drift: 0.35,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CohortStats {
    pub name: String,
    pub users: usize,
    pub user_share: f64,
    pub mean_base_length: f64,
    pub mean_impressions: f64,
    pub realized_click_rate: f64,
    pub mean_true_rate: f64,
    pub train_sample_share: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GeneratorStats {
    pub cohorts: Vec<CohortStats>,
    pub total_users: usize,
    pub total_impressions: usize,
}

pub struct Generated {
    pub log: EventLog,
    pub stats: GeneratorStats,
    /// Cohort index per user, aligned with `log.users`.
    pub cohort_of: Vec<usize>,
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(rng)).collect();
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

fn normalize(v: &mut [f64]) {
    let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean of `max(3, Poisson(lambda))`, in closed form.
fn floored_poisson_mean(lambda: f64) -> f64 {
    let e = (-lambda).exp();
    lambda + e * (3.0 + 2.0 * lambda + lambda * lambda / 2.0)
}

/// Invert `floored_poisson_mean` so realized impression counts match the
/// requested mean despite the floor of 3 (needed so every user appears in
/// train, valid, and test).
fn poisson_rate_for_mean(target: f64) -> f64 {
    let mut lo = 1e-6;
    let mut hi = target.max(4.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if floored_poisson_mean(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn draw_impression_count(rng: &mut ChaCha8Rng, lambda: f64) -> usize {
    let p = Poisson::new(lambda).expect("positive lambda");
    (p.sample(rng) as usize).max(3)
}

/// Solve the cohort intercept so the expected click rate over sampled
/// (affinity, user-noise) pairs hits the target.
fn calibrate_intercept(affinities: &[f64], noises: &[f64], target: f64) -> f64 {
    let mean_rate = |intercept: f64| -> f64 {
        let mut acc = 0.0;
        for (a, n) in affinities.iter().zip(noises) {
            acc += crate::tensor::sigmoid(intercept + a + n);
        }
        acc / affinities.len() as f64
    };
    let (mut lo, mut hi) = (-12.0, 6.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_rate(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct UserProfile {
    cohort: usize,
    base_len: usize,
    n_impressions: usize,
    topics: Vec<usize>,
    start_mix: Vec<f64>,
    end_mix: Vec<f64>,
    interest: Vec<f64>,
    noise: f64,
}

struct ItemSpace {
    vectors: Vec<Vec<f64>>,
    by_topic: Vec<Vec<u32>>,
}

fn build_items(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, centers: &[Vec<f64>]) -> ItemSpace {
    let normal = Normal::new(0.0, 0.35).expect("item noise");
    let mut vectors = vec![vec![0.0; cfg.topic_dim]];
    let mut by_topic = vec![Vec::new(); cfg.n_topics];
    for id in 1..=cfg.n_items {
        let topic = rng.gen_range(0..cfg.n_topics);
        let mut v: Vec<f64> =
            centers[topic].iter().map(|c| c + normal.sample(rng)).collect();
        normalize(&mut v);
        vectors.push(v);
        by_topic[topic].push(id as u32);
    }
    ItemSpace { vectors, by_topic }
}

fn mix_for(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut mix: Vec<f64> = (0..k).map(|_| -rng.gen::<f64>().max(1e-12).ln()).collect();
    let total: f64 = mix.iter().sum();
    for m in mix.iter_mut() {
        *m /= total;
    }
    mix
}

fn pick_topic(rng: &mut ChaCha8Rng, topics: &[usize], mix: &[f64]) -> usize {
    let mut u = rng.gen::<f64>();
    for (t, m) in topics.iter().zip(mix) {
        if u < *m {
            return *t;
        }
        u -= m;
    }
    *topics.last().expect("nonempty topics")
}

fn draw_item(
    rng: &mut ChaCha8Rng,
    items: &ItemSpace,
    topics: &[usize],
    mix: &[f64],
    on_topic_prob: f64,
    n_items: usize,
) -> u32 {
    if rng.gen::<f64>() < on_topic_prob {
        let t = pick_topic(rng, topics, mix);
        if !items.by_topic[t].is_empty() {
            let i = rng.gen_range(0..items.by_topic[t].len());
            return items.by_topic[t][i];
        }
    }
    rng.gen_range(1..=n_items) as u32
}

pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<Generated> {
    validate_cohorts(&cfg.cohorts, cfg.n_topics)?;
    if cfg.n_users == 0 || cfg.n_items == 0 {
        return Err(LainError::Config("n_users and n_items must be positive".into()));
    }
    if cfg.max_len == 0 {
        return Err(LainError::Config("max_len must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<f64>> =
        (0..cfg.n_topics).map(|_| unit_vector(&mut rng, cfg.topic_dim)).collect();
    let items = build_items(cfg, &mut rng, &centers);

    // Cohort boundaries: deterministic contiguous blocks of users.
    let mut counts: Vec<usize> =
        cfg.cohorts.iter().map(|c| (c.user_fraction * cfg.n_users as f64).round() as usize).collect();
    let assigned: usize = counts.iter().sum();
    if let Some(last) = counts.last_mut() {
        *last = (*last + cfg.n_users).saturating_sub(assigned);
    }

    let lambdas: Vec<f64> =
        cfg.cohorts.iter().map(|c| poisson_rate_for_mean(c.impressions_per_user)).collect();
    let noise_sigmas: Vec<f64> = cfg
        .cohorts
        .iter()
        .map(|c| {
            let p = c.base_click_rate;
            c.click_rate_std / (p * (1.0 - p))
        })
        .collect();

    // Profiles first, so intercept calibration can see the whole cohort.
    let mut profiles: Vec<UserProfile> = Vec::with_capacity(cfg.n_users);
    for (cohort, (&count, spec)) in counts.iter().zip(&cfg.cohorts).enumerate() {
        let len_dist = Normal::new(spec.mean_length, spec.std_length)
            .map_err(|e| LainError::Config(format!("cohort {:?}: {e}", spec.name)))?;
        let noise_dist = Normal::new(0.0, noise_sigmas[cohort].max(1e-9))
            .map_err(|e| LainError::Config(format!("cohort {:?}: {e}", spec.name)))?;
        for _ in 0..count {
            let base_len = len_dist.sample(&mut rng).round().clamp(1.0, cfg.max_len as f64) as usize;
            let n_impressions = draw_impression_count(&mut rng, lambdas[cohort]);
            let mut topics = Vec::with_capacity(spec.interest_dims);
            while topics.len() < spec.interest_dims {
                let t = rng.gen_range(0..cfg.n_topics);
                if !topics.contains(&t) {
                    topics.push(t);
                }
            }
            let start_mix = mix_for(&mut rng, spec.interest_dims);
            let mut end_mix: Vec<f64> = start_mix
                .iter()
                .map(|m| (m + cfg.drift * rng.gen::<f64>()).max(1e-9))
                .collect();
            let total: f64 = end_mix.iter().sum();
            for m in end_mix.iter_mut() {
                *m /= total;
            }
            let mut interest = vec![0.0; cfg.topic_dim];
            for (t, m) in topics.iter().zip(&end_mix) {
                for (x, c) in interest.iter_mut().zip(&centers[*t]) {
                    *x += m * c;
                }
            }
            normalize(&mut interest);
            let noise = noise_dist.sample(&mut rng);
            profiles.push(UserProfile {
                cohort,
                base_len,
                n_impressions,
                topics,
                start_mix,
                end_mix,
                interest,
                noise,
            });
        }
    }

    // Calibrate one intercept per cohort against a Monte Carlo affinity
    // sample drawn through the same candidate process the impressions use.
    let mut intercepts = vec![0.0; cfg.cohorts.len()];
    {
        let mut cal_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xA5A5_5A5A_DEAD_BEEF);
        for (cohort, spec) in cfg.cohorts.iter().enumerate() {
            let members: Vec<&UserProfile> =
                profiles.iter().filter(|p| p.cohort == cohort).collect();
            if members.is_empty() {
                continue;
            }
            let mut affinities = Vec::with_capacity(4000);
            let mut noises = Vec::with_capacity(4000);
            for _ in 0..4000 {
                let p = members[cal_rng.gen_range(0..members.len())];
                let item = draw_item(
                    &mut cal_rng,
                    &items,
                    &p.topics,
                    &p.end_mix,
                    cfg.on_topic_prob,
                    cfg.n_items,
                );
                affinities
                    .push(cfg.affinity_scale * dot(&items.vectors[item as usize], &p.interest));
                noises.push(p.noise);
            }
            intercepts[cohort] = calibrate_intercept(&affinities, &noises, spec.base_click_rate);
        }
    }

    // Emit event streams.
    let width = (cfg.n_users.max(2) - 1).to_string().len().max(4);
    let item_width = cfg.n_items.to_string().len().max(4);
    let mut users = Vec::with_capacity(cfg.n_users);
    let mut cohort_of = Vec::with_capacity(cfg.n_users);
    let mut true_rate_sums = vec![0.0; cfg.cohorts.len()];
    let mut click_counts = vec![0usize; cfg.cohorts.len()];
    let mut impression_counts = vec![0usize; cfg.cohorts.len()];

    for (idx, profile) in profiles.iter().enumerate() {
        // Base history follows the start mix; labels follow the end mix.
        // The gap between them is the interest drift the model must absorb.
        let base: Vec<u32> = (0..profile.base_len)
            .map(|_| {
                draw_item(
                    &mut rng,
                    &items,
                    &profile.topics,
                    &profile.start_mix,
                    cfg.on_topic_prob.max(0.8),
                    cfg.n_items,
                )
            })
            .collect();
        let mut impressions = Vec::with_capacity(profile.n_impressions);
        let mut rate_acc = 0.0;
        for _ in 0..profile.n_impressions {
            let item = draw_item(
                &mut rng,
                &items,
                &profile.topics,
                &profile.end_mix,
                cfg.on_topic_prob,
                cfg.n_items,
            );
            let affinity =
                cfg.affinity_scale * dot(&items.vectors[item as usize], &profile.interest);
            let p_click = crate::tensor::sigmoid(
                intercepts[profile.cohort] + affinity + profile.noise,
            );
            rate_acc += p_click;
            let label = u8::from(rng.gen::<f64>() < p_click);
            if label == 1 {
                click_counts[profile.cohort] += 1;
            }
            impressions.push((item, label));
        }
        impression_counts[profile.cohort] += profile.n_impressions;
        true_rate_sums[profile.cohort] += rate_acc / profile.n_impressions as f64;
        users.push(UserEvents {
            name: format!("u{idx:0width$}"),
            base,
            impressions,
        });
        cohort_of.push(profile.cohort);
    }

    let mut item_names = vec![String::new()];
    for id in 1..=cfg.n_items {
        item_names.push(format!("i{id:0item_width$}"));
    }

    // Cohort stats for the manifest and calibration tests.
    let mut stats = Vec::new();
    let total_impressions: usize = impression_counts.iter().sum();
    let train_counts: Vec<usize> = (0..cfg.cohorts.len())
        .map(|c| {
            users
                .iter()
                .zip(&cohort_of)
                .filter(|(_, &co)| co == c)
                .map(|(u, _)| u.impressions.len().saturating_sub(2))
                .sum()
        })
        .collect();
    let train_total: usize = train_counts.iter().sum();
    for (c, spec) in cfg.cohorts.iter().enumerate() {
        let n = counts[c];
        let base_len_sum: usize = profiles
            .iter()
            .filter(|p| p.cohort == c)
            .map(|p| p.base_len)
            .sum();
        stats.push(CohortStats {
            name: spec.name.clone(),
            users: n,
            user_share: n as f64 / cfg.n_users as f64,
            mean_base_length: base_len_sum as f64 / n.max(1) as f64,
            mean_impressions: impression_counts[c] as f64 / n.max(1) as f64,
            realized_click_rate: click_counts[c] as f64 / impression_counts[c].max(1) as f64,
            mean_true_rate: true_rate_sums[c] / n.max(1) as f64,
            train_sample_share: train_counts[c] as f64 / train_total.max(1) as f64,
        });
    }

    Ok(Generated {
        log: EventLog { users, item_names },
        stats: GeneratorStats {
            cohorts: stats,
            total_users: cfg.n_users,
            total_impressions,
        },
        cohort_of,
    })
}

// ---------------------------------------------------------------------------
// JSONL import/export
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct JsonEvent {
    user_id: String,
    item_id: String,
    ts: i64,
    label: u8,
}

pub fn export_jsonl(log: &EventLog, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| LainError::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    for user in &log.users {
        let base_len = user.base.len() as i64;
        for (i, item) in user.base.iter().enumerate() {
            let ev = JsonEvent {
                user_id: user.name.clone(),
                item_id: log.item_names[*item as usize].clone(),
                ts: i as i64 - base_len,
                label: 1,
            };
            serde_json::to_writer(&mut w, &ev)?;
            w.write_all(b"\n").map_err(|e| LainError::io(path.display().to_string(), e))?;
        }
        for (ts, (item, label)) in user.impressions.iter().enumerate() {
            let ev = JsonEvent {
                user_id: user.name.clone(),
                item_id: log.item_names[*item as usize].clone(),
                ts: ts as i64,
                label: *label,
            };
            serde_json::to_writer(&mut w, &ev)?;
            w.write_all(b"\n").map_err(|e| LainError::io(path.display().to_string(), e))?;
        }
    }
    w.flush().map_err(|e| LainError::io(path.display().to_string(), e))
}

/// Parse a JSONL event file. Returns the log plus the count of lines whose
/// per-user timestamps were out of order (they are sorted, not rejected).
pub fn parse_jsonl(path: &Path) -> Result<(EventLog, usize)> {
    let file = std::fs::File::open(path).map_err(|e| LainError::io(path.display().to_string(), e))?;
    let reader = std::io::BufReader::new(file);

    struct RawEvent {
        item: String,
        ts: i64,
        label: u8,
    }
    let mut per_user: HashMap<String, Vec<RawEvent>> = HashMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| LainError::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: JsonEvent = serde_json::from_str(&line).map_err(|e| {
            LainError::Data(format!("line {}: malformed event: {e}", lineno + 1))
        })?;
        if ev.label > 1 {
            return Err(LainError::Data(format!(
                "line {}: label {} is not 0 or 1",
                lineno + 1,
                ev.label
            )));
        }
        if ev.ts < 0 && ev.label != 1 {
            return Err(LainError::Data(format!(
                "line {}: pre-window history (ts < 0) must be clicks (label 1)",
                lineno + 1
            )));
        }
        if ev.item_id.is_empty() {
            return Err(LainError::Data(format!("line {}: empty item_id", lineno + 1)));
        }
        per_user.entry(ev.user_id).or_default().push(RawEvent {
            item: ev.item_id,
            ts: ev.ts,
            label: ev.label,
        });
    }
    if per_user.is_empty() {
        return Err(LainError::Data("no users in event file".into()));
    }

    let mut user_names: Vec<String> = per_user.keys().cloned().collect();
    user_names.sort();

    let mut item_names: Vec<String> = per_user
        .values()
        .flat_map(|evs| evs.iter().map(|e| e.item.clone()))
        .collect();
    item_names.sort();
    item_names.dedup();
    let item_index: HashMap<&str, u32> = item_names
        .iter()
        .enumerate()
        .map(|(i, name)| (name.as_str(), i as u32 + 1))
        .collect();

    let mut warnings = 0usize;
    let mut users = Vec::with_capacity(user_names.len());
    for name in &user_names {
        let mut events = per_user.remove(name).expect("user present");
        for w in events.windows(2) {
            if w[1].ts < w[0].ts {
                warnings += 1;
            }
        }
        events.sort_by_key(|e| e.ts);
        let mut base = Vec::new();
        let mut impressions = Vec::new();
        for e in events {
            let item = item_index[e.item.as_str()];
            if e.ts < 0 {
                base.push(item);
            } else {
                impressions.push((item, e.label));
            }
        }
        users.push(UserEvents { name: name.clone(), base, impressions });
    }

    let mut names = vec![String::new()];
    names.extend(item_names);
    Ok((EventLog { users, item_names: names }, warnings))
}

// ---------------------------------------------------------------------------
// Digest, samples, split
// ---------------------------------------------------------------------------

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

fn fnv1a(hash: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *hash ^= b as u64;
        *hash = hash.wrapping_mul(FNV_PRIME);
    }
}

/// 64-bit FNV-1a over the canonical event serialization.
pub fn digest_of_log(log: &EventLog) -> String {
    let mut h = FNV_OFFSET;
    for user in &log.users {
        fnv1a(&mut h, user.name.as_bytes());
        fnv1a(&mut h, &[0xFF]);
        for item in &user.base {
            fnv1a(&mut h, log.item_names[*item as usize].as_bytes());
            fnv1a(&mut h, &[0xFD]);
        }
        for (item, label) in &user.impressions {
            fnv1a(&mut h, log.item_names[*item as usize].as_bytes());
            fnv1a(&mut h, &[*label, 0xFE]);
        }
    }
    format!("{h:016x}")
}

/// Expand event streams into samples: every impression becomes one Sample
/// whose history is all clicks strictly before it.
pub fn samples_per_user(log: &EventLog, max_len: usize) -> Vec<Vec<Sample>> {
    log.users
        .iter()
        .enumerate()
        .map(|(uid, user)| {
            let mut history: Vec<u32> = user.base.clone();
            let mut out = Vec::with_capacity(user.impressions.len());
            for (item, label) in &user.impressions {
                let raw = history.len();
                let start = raw.saturating_sub(max_len);
                out.push(Sample {
                    user_id: uid as u64,
                    target_item_id: *item,
                    behavior_ids: history[start..].to_vec(),
                    raw_length: raw as u32,
                    label: *label,
                });
                if *label == 1 {
                    history.push(*item);
                }
            }
            out
        })
        .collect()
}

/// Per-user temporal split: last impression to test, second-to-last to
/// valid, the rest to train. Users with two impressions skip valid; users
/// with one go to train only.
pub fn bundle_from_log(log: &EventLog, max_len: usize, ts_warnings: usize) -> Result<DatasetBundle> {
    if log.users.is_empty() {
        return Err(LainError::Data("no users in event log".into()));
    }
    let per_user = samples_per_user(log, max_len);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for samples in per_user {
        match samples.len() {
            0 => {}
            1 => train.extend(samples),
            2 => {
                let mut it = samples.into_iter();
                train.push(it.next().expect("two samples"));
                test.push(it.next().expect("two samples"));
            }
            n => {
                for (i, s) in samples.into_iter().enumerate() {
                    if i == n - 1 {
                        test.push(s);
                    } else if i == n - 2 {
                        valid.push(s);
                    } else {
                        train.push(s);
                    }
                }
            }
        }
    }
    if train.is_empty() {
        return Err(LainError::Data("no training samples after split".into()));
    }
    let l0 = train.iter().map(|s| s.raw_length as f64).sum::<f64>() / train.len() as f64;
    Ok(DatasetBundle {
        vocab_size: log.item_names.len() as u32,
        l0,
        digest: digest_of_log(log),
        user_names: log.users.iter().map(|u| u.name.clone()).collect(),
        ts_warnings,
        train,
        valid,
        test,
    })
}

pub fn load_external(path: &Path, max_len: usize) -> Result<DatasetBundle> {
    let (log, warnings) = parse_jsonl(path)?;
    bundle_from_log(&log, max_len, warnings)
}
