//! Evaluation suite: AUC (midrank), per-user GAUC, logloss, and attention
//! concentration statistics (Gini, entropy), aggregated per length bucket.
//!
//! Undefined metrics (single-class AUC, empty buckets) are `None`, which is
//! deliberately distinct from `Err`: an error means the inputs were invalid,
//! `None` means the metric has no value on valid inputs.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::backbone::{AttentionTrace, ModelConfig};
use crate::data::{bucket_of, Bucket};
use crate::error::{LainError, Result};
use crate::tensor::bce_loss;

fn check_scores(op: &str, scores: &[f64]) -> Result<()> {
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(LainError::Metric(format!("{op}: non-finite score {s}")));
    }
    Ok(())
}

fn check_labels(op: &str, labels: &[u8]) -> Result<()> {
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(LainError::Metric(format!("{op}: label {l} is not 0/1")));
    }
    Ok(())
}

/// Probability that a uniformly random positive outranks a uniformly random
/// negative, ties counted half. Rank-statistic form: O(n log n).
/// `None` when only one class is present.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(LainError::Metric(format!(
            "auc: {} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    check_scores("auc", scores)?;
    check_labels("auc", labels)?;
    let n = scores.len();
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = n - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = midrank;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..n).filter(|&k| labels[k] == 1).map(|k| ranks[k]).sum();
    let p = pos as f64;
    Ok(Some((rank_sum - p * (p + 1.0) / 2.0) / (p * neg as f64)))
}

/// Quadratic reference implementation of the same quantity, kept public so
/// validation suites can pin the fast path against it.
pub fn pairwise_auc(scores: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if scores.len() != labels.len() {
        return Err(LainError::Metric("pairwise_auc: length mismatch".into()));
    }
    check_scores("pairwise_auc", scores)?;
    check_labels("pairwise_auc", labels)?;
    let mut wins = 0.0;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        if li != 1 {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj != 0 {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    Ok(if pairs == 0 { None } else { Some(wins / pairs as f64) })
}

/// Mean of per-user AUC with uniform user weighting; users lacking both
/// classes are skipped. `None` when no user is eligible.
pub fn gauc(per_user: &BTreeMap<u64, (Vec<f64>, Vec<u8>)>) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut eligible = 0usize;
    for (scores, labels) in per_user.values() {
        if let Some(a) = auc(scores, labels)? {
            sum += a;
            eligible += 1;
        }
    }
    Ok(if eligible == 0 { None } else { Some(sum / eligible as f64) })
}

/// Mean clamped binary cross entropy. `None` on an empty slice.
pub fn logloss(predictions: &[f64], labels: &[u8]) -> Result<Option<f64>> {
    if predictions.is_empty() && labels.is_empty() {
        return Ok(None);
    }
    check_labels("logloss", labels)?;
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    Ok(Some(bce_loss(predictions, &y)?))
}

fn normalized(op: &str, weights: &[f64]) -> Result<Option<Vec<f64>>> {
    if weights.is_empty() {
        return Ok(None);
    }
    if let Some(w) = weights.iter().find(|w| !w.is_finite() || **w < 0.0) {
        return Err(LainError::Metric(format!("{op}: weight {w} is not a finite non-negative value")));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(LainError::Metric(format!("{op}: weights sum to {total}, need a positive mass")));
    }
    Ok(Some(weights.iter().map(|w| w / total).collect()))
}

/// Gini concentration of a weight vector, renormalized internally:
/// `G = sum_i (2i - n - 1) w_(i) / n` over ascending-sorted weights.
/// 0 for uniform, (n-1)/n for one-hot. `None` on an empty vector.
pub fn gini(weights: &[f64]) -> Result<Option<f64>> {
    let Some(mut w) = normalized("gini", weights)? else {
        return Ok(None);
    };
    w.sort_by(f64::total_cmp);
    let n = w.len() as f64;
    let g: f64 = w
        .iter()
        .enumerate()
        .map(|(i, wi)| (2.0 * (i + 1) as f64 - n - 1.0) * wi)
        .sum::<f64>()
        / n;
    Ok(Some(g))
}

/// Shannon entropy in nats with `0 ln 0 = 0`, renormalized internally.
/// Maximum `ln n` at uniform. `None` on an empty vector.
pub fn entropy(weights: &[f64]) -> Result<Option<f64>> {
    let Some(w) = normalized("entropy", weights)? else {
        return Ok(None);
    };
    Ok(Some(w.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()))
}

/// One evaluated sample: what the model predicted, what happened, and the
/// user/length context needed for grouped metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub user_id: u64,
    pub raw_length: u32,
    pub prediction: f64,
    pub label: u8,
}

/// Metrics over one slice of the evaluation set. `None` = undefined on this
/// slice (not an error).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    pub logloss: Option<f64>,
    pub mean_gini: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub n_samples: usize,
    pub n_users: usize,
}

/// Per-length-bucket evaluation report, plus the across-bucket spread of
/// mean attention Gini (the polarization-balance signal).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketedReport {
    pub config: ModelConfig,
    pub dataset_digest: String,
    pub short: BucketMetrics,
    pub medium: BucketMetrics,
    pub long: BucketMetrics,
    pub overall: BucketMetrics,
    /// Population variance of the three per-bucket mean Ginis; `None` if any
    /// bucket has no traces.
    pub gini_variance: Option<f64>,
    /// max - min of the three per-bucket mean Ginis.
    pub gini_range: Option<f64>,
}

impl BucketedReport {
    pub fn bucket(&self, b: Bucket) -> &BucketMetrics {
        match b {
            Bucket::Short => &self.short,
            Bucket::Medium => &self.medium,
            Bucket::Long => &self.long,
        }
    }
}

fn slice_metrics(records: &[&EvalRecord], traces: &[&AttentionTrace]) -> Result<BucketMetrics> {
    let preds: Vec<f64> = records.iter().map(|r| r.prediction).collect();
    let labels: Vec<u8> = records.iter().map(|r| r.label).collect();
    let mut per_user: BTreeMap<u64, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for r in records {
        let entry = per_user.entry(r.user_id).or_default();
        entry.0.push(r.prediction);
        entry.1.push(r.label);
    }
    let mut gini_sum = 0.0;
    let mut entropy_sum = 0.0;
    let mut n_traces = 0usize;
    for t in traces {
        let g = gini(&t.weights)?
            .ok_or_else(|| LainError::Metric("trace with no attention weights".into()))?;
        let e = entropy(&t.weights)?.expect("non-empty by the line above");
        gini_sum += g;
        entropy_sum += e;
        n_traces += 1;
    }
    Ok(BucketMetrics {
        auc: auc(&preds, &labels)?,
        gauc: gauc(&per_user)?,
        logloss: logloss(&preds, &labels)?,
        mean_gini: (n_traces > 0).then(|| gini_sum / n_traces as f64),
        mean_entropy: (n_traces > 0).then(|| entropy_sum / n_traces as f64),
        n_samples: records.len(),
        n_users: per_user.len(),
    })
}

fn gini_spread(buckets: [&BucketMetrics; 3]) -> (Option<f64>, Option<f64>) {
    let mut means = [0.0; 3];
    for (slot, b) in means.iter_mut().zip(buckets) {
        match b.mean_gini {
            Some(g) => *slot = g,
            None => return (None, None),
        }
    }
    let mean = means.iter().sum::<f64>() / 3.0;
    let var = means.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / 3.0;
    let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
    (Some(var), Some(max - min))
}

/// Partition records and traces by length bucket and compute the full
/// report. Trace bucket labels are taken as recorded; record buckets come
/// from `config.bucket_bounds`.
pub fn bucketed_report(
    records: &[EvalRecord],
    traces: &[AttentionTrace],
    config: &ModelConfig,
    dataset_digest: &str,
) -> Result<BucketedReport> {
    let mut rec_by: BTreeMap<Bucket, Vec<&EvalRecord>> = BTreeMap::new();
    for b in Bucket::all() {
        rec_by.insert(b, Vec::new());
    }
    for r in records {
        rec_by
            .get_mut(&bucket_of(r.raw_length, config.bucket_bounds))
            .expect("all buckets preinserted")
            .push(r);
    }
    let mut tr_by: BTreeMap<Bucket, Vec<&AttentionTrace>> = BTreeMap::new();
    for b in Bucket::all() {
        tr_by.insert(b, Vec::new());
    }
    for t in traces {
        tr_by.get_mut(&t.bucket).expect("all buckets preinserted").push(t);
    }
    let short = slice_metrics(&rec_by[&Bucket::Short], &tr_by[&Bucket::Short])?;
    let medium = slice_metrics(&rec_by[&Bucket::Medium], &tr_by[&Bucket::Medium])?;
    let long = slice_metrics(&rec_by[&Bucket::Long], &tr_by[&Bucket::Long])?;
    let all_records: Vec<&EvalRecord> = records.iter().collect();
    let all_traces: Vec<&AttentionTrace> = traces.iter().collect();
    let overall = slice_metrics(&all_records, &all_traces)?;
    let (gini_variance, gini_range) = gini_spread([&short, &medium, &long]);
    Ok(BucketedReport {
        config: config.clone(),
        dataset_digest: dataset_digest.to_string(),
        short,
        medium,
        long,
        overall,
        gini_variance,
        gini_range,
    })
}

fn csv_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One row per bucket plus the overall row; undefined metrics are empty
/// cells.
pub fn report_csv(r: &BucketedReport) -> String {
    let mut out = String::from("bucket,auc,gauc,logloss,mean_gini,mean_entropy,n_samples,n_users\n");
    let rows: [(&str, &BucketMetrics); 4] = [
        ("short", &r.short),
        ("medium", &r.medium),
        ("long", &r.long),
        ("overall", &r.overall),
    ];
    for (name, m) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            name,
            csv_cell(m.auc),
            csv_cell(m.gauc),
            csv_cell(m.logloss),
            csv_cell(m.mean_gini),
            csv_cell(m.mean_entropy),
            m.n_samples,
            m.n_users
        ));
    }
    out
}

/// Distinct users across all records (convenience for report consumers).
pub fn distinct_users(records: &[EvalRecord]) -> usize {
    records.iter().map(|r| r.user_id).collect::<BTreeSet<_>>().len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_temp;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn auc_hand_cases() {
        assert_eq!(auc(&[0.9, 0.1], &[1, 0]).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.1, 0.9], &[1, 0]).unwrap(), Some(0.0));
        assert_eq!(auc(&[0.3, 0.4], &[1, 1]).unwrap(), None, "single class is undefined");
        assert_eq!(auc(&[], &[]).unwrap(), None);
        assert!(auc(&[0.1], &[1, 0]).is_err());
        assert!(auc(&[f64::NAN, 0.2], &[1, 0]).is_err());
        assert!(auc(&[0.1, 0.2], &[1, 2]).is_err());
    }

    #[test]
    fn rank_auc_equals_pairwise_oracle_with_heavy_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..40 {
            let n = rng.gen_range(2..=300);
            // A small score alphabet forces plenty of exact ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..7) as f64 / 7.0).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.4) as u8).collect();
            let fast = auc(&scores, &labels).unwrap();
            let slow = pairwise_auc(&scores, &labels).unwrap();
            match (fast, slow) {
                (Some(a), Some(b)) => close(a, b, 1e-12),
                (None, None) => {}
                other => panic!("trial {trial}: definedness mismatch {other:?}"),
            }
        }
    }

    #[test]
    fn auc_invariant_under_increasing_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let n = rng.gen_range(2..=60);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.5) as u8).collect();
            labels[0] = 1;
            labels[n - 1] = 0;
            let base = auc(&scores, &labels).unwrap().unwrap();
            let exp: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let affine: Vec<f64> = scores.iter().map(|s| 2.5 * s + 7.0).collect();
            assert_eq!(auc(&exp, &labels).unwrap().unwrap(), base);
            assert_eq!(auc(&affine, &labels).unwrap().unwrap(), base);
        }
    }

    #[test]
    fn gauc_hand_cases_and_oracle() {
        let mut users = BTreeMap::new();
        users.insert(1u64, (vec![0.8, 0.2], vec![1u8, 0]));
        assert_eq!(gauc(&users).unwrap(), Some(1.0), "singleton mean");
        users.insert(2, (vec![0.5, 0.5], vec![1, 0]));
        assert_eq!(gauc(&users).unwrap(), Some(0.75), "mean of 1.0 and 0.5");
        users.insert(3, (vec![0.9], vec![1])); // single-class: skipped
        assert_eq!(gauc(&users).unwrap(), Some(0.75));
        let mut hopeless = BTreeMap::new();
        hopeless.insert(1u64, (vec![0.9, 0.8], vec![1u8, 1]));
        assert_eq!(gauc(&hopeless).unwrap(), None, "no eligible user");

        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut pool = BTreeMap::new();
        for u in 0..30u64 {
            let n = rng.gen_range(2..=40);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_bool(0.5) as u8).collect();
            pool.insert(u, (scores, labels));
        }
        let got = gauc(&pool).unwrap().unwrap();
        let mut sum = 0.0;
        let mut k = 0;
        for (s, l) in pool.values() {
            if let Some(a) = pairwise_auc(s, l).unwrap() {
                sum += a;
                k += 1;
            }
        }
        close(got, sum / k as f64, 1e-12);
    }

    #[test]
    fn gini_hand_cases() {
        close(gini(&[0.25; 4]).unwrap().unwrap(), 0.0, 1e-15);
        close(gini(&[0.0, 0.0, 1.0, 0.0, 0.0]).unwrap().unwrap(), 0.8, 1e-15);
        close(gini(&[0.1, 0.2, 0.3, 0.4]).unwrap().unwrap(), 0.25, 1e-12);
        assert_eq!(gini(&[]).unwrap(), None);
        assert!(gini(&[0.5, -0.1]).is_err());
        assert!(gini(&[0.0, 0.0]).is_err(), "zero mass violates the precondition");
    }

    #[test]
    fn gini_matches_mean_absolute_difference_definition() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..30 {
            let n = rng.gen_range(1..=40);
            let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0) + 1e-9).collect();
            let got = gini(&w).unwrap().unwrap();
            let total: f64 = w.iter().sum();
            let p: Vec<f64> = w.iter().map(|x| x / total).collect();
            let mut mad = 0.0;
            for a in &p {
                for b in &p {
                    mad += (a - b).abs();
                }
            }
            let mean = 1.0 / n as f64;
            let oracle = mad / (2.0 * (n * n) as f64 * mean);
            close(got, oracle, 1e-12);
        }
    }

    #[test]
    fn entropy_hand_cases() {
        close(entropy(&[0.0, 1.0, 0.0]).unwrap().unwrap(), 0.0, 1e-15);
        close(entropy(&[0.125; 8]).unwrap().unwrap(), (8.0f64).ln(), 1e-12);
        close(entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap().unwrap(), (2.0f64).ln(), 1e-12);
        close(entropy(&[2.0, 2.0, 0.0, 0.0]).unwrap().unwrap(), (2.0f64).ln(), 1e-12);
        assert_eq!(entropy(&[]).unwrap(), None);
    }

    #[test]
    fn higher_temperature_never_concentrates_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..25 {
            let n = rng.gen_range(2..=12);
            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let taus = [1.0, 1.1, 1.2, 1.35, 1.5, 2.0];
            let mut last_gini = f64::INFINITY;
            let mut last_entropy = f64::NEG_INFINITY;
            for &tau in &taus {
                let w = softmax_temp(&z, tau, None).unwrap();
                let g = gini(&w).unwrap().unwrap();
                let e = entropy(&w).unwrap().unwrap();
                assert!(g <= last_gini + 1e-12, "gini must not rise with temperature");
                assert!(e >= last_entropy - 1e-12, "entropy must not fall with temperature");
                last_gini = g;
                last_entropy = e;
            }
        }
    }

    proptest! {
        #[test]
        fn gini_and_entropy_are_permutation_and_scale_invariant(
            w in proptest::collection::vec(1e-6..10.0f64, 1..20),
            scale in 0.1..50.0f64,
            seed in 0u64..1000,
        ) {
            let g0 = gini(&w).unwrap().unwrap();
            let e0 = entropy(&w).unwrap().unwrap();
            let mut shuffled = w.clone();
            // Deterministic permutation from the seed.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            let scaled: Vec<f64> = w.iter().map(|x| x * scale).collect();
            prop_assert!((gini(&shuffled).unwrap().unwrap() - g0).abs() < 1e-10);
            prop_assert!((entropy(&shuffled).unwrap().unwrap() - e0).abs() < 1e-10);
            prop_assert!((gini(&scaled).unwrap().unwrap() - g0).abs() < 1e-10);
            prop_assert!((entropy(&scaled).unwrap().unwrap() - e0).abs() < 1e-10);
            prop_assert!(g0 >= 0.0 && g0 < 1.0);
            prop_assert!(e0 >= 0.0 && e0 <= (w.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn bucket_sample_counts_sum_to_overall(
            lens in proptest::collection::vec(0u32..400, 1..60),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let records: Vec<EvalRecord> = lens
                .iter()
                .enumerate()
                .map(|(i, &raw_length)| EvalRecord {
                    user_id: (i % 7) as u64,
                    raw_length,
                    prediction: rng.gen_range(0.01..0.99),
                    label: rng.gen_bool(0.5) as u8,
                })
                .collect();
            let cfg = ModelConfig { vocab_size: 10, ..ModelConfig::default() };
            let r = bucketed_report(&records, &[], &cfg, "digest").unwrap();
            prop_assert_eq!(
                r.short.n_samples + r.medium.n_samples + r.long.n_samples,
                r.overall.n_samples
            );
            prop_assert_eq!(r.overall.n_samples, records.len());
            prop_assert_eq!(r.overall.n_users, distinct_users(&records));
        }
    }

    fn trace(bucket: Bucket, weights: &[f64]) -> AttentionTrace {
        AttentionTrace {
            user_id: 0,
            branch: "long",
            user_length: match bucket {
                Bucket::Short => 10,
                Bucket::Medium => 150,
                Bucket::Long => 300,
            },
            bucket,
            weights: weights.to_vec(),
        }
    }

    #[test]
    fn report_hand_computed_two_bucket_case() {
        let rec = |user_id, raw_length, prediction, label| EvalRecord {
            user_id,
            raw_length,
            prediction,
            label,
        };
        let records = vec![
            rec(1, 10, 0.8, 1),
            rec(1, 10, 0.2, 0),
            rec(2, 50, 0.6, 0),
            rec(2, 50, 0.7, 1),
            rec(3, 250, 0.9, 1),
            rec(3, 250, 0.4, 0),
        ];
        let traces = vec![
            trace(Bucket::Short, &[0.5, 0.5]),
            trace(Bucket::Short, &[1.0]),
            trace(Bucket::Long, &[0.7, 0.3]),
        ];
        let cfg = ModelConfig { vocab_size: 10, ..ModelConfig::default() };
        let r = bucketed_report(&records, &traces, &cfg, "d123").unwrap();

        assert_eq!(r.short.n_samples, 4);
        assert_eq!(r.short.n_users, 2);
        assert_eq!(r.short.auc, Some(1.0));
        assert_eq!(r.short.gauc, Some(1.0));
        // -(ln .8 + ln .8 + ln .4 + ln .7) / 4
        close(r.short.logloss.unwrap(), 0.42981319461032674, 1e-12);
        close(r.short.mean_gini.unwrap(), 0.0, 1e-15);
        close(r.short.mean_entropy.unwrap(), (2.0f64).ln() / 2.0, 1e-12);

        assert_eq!(r.medium.n_samples, 0);
        assert_eq!(r.medium.n_users, 0);
        assert_eq!(r.medium.auc, None);
        assert_eq!(r.medium.gauc, None);
        assert_eq!(r.medium.logloss, None);
        assert_eq!(r.medium.mean_gini, None);

        assert_eq!(r.long.n_samples, 2);
        assert_eq!(r.long.auc, Some(1.0));
        // -(ln .9 + ln .6) / 2
        close(r.long.logloss.unwrap(), 0.30809306971190849, 1e-12);
        close(r.long.mean_gini.unwrap(), 0.2, 1e-12);
        close(r.long.mean_entropy.unwrap(), 0.6108643020548935, 1e-12);

        assert_eq!(r.overall.n_samples, 6);
        assert_eq!(r.overall.n_users, 3);
        assert_eq!(r.overall.auc, Some(1.0));
        assert_eq!(r.overall.gauc, Some(1.0));

        // Medium has no traces, so the across-bucket spread is undefined.
        assert_eq!(r.gini_variance, None);
        assert_eq!(r.gini_range, None);
        assert_eq!(r.dataset_digest, "d123");
    }

    #[test]
    fn single_bucket_input_equals_overall() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let records: Vec<EvalRecord> = (0..30)
            .map(|i| EvalRecord {
                user_id: i % 5,
                raw_length: 250 + (i as u32 % 40),
                prediction: rng.gen_range(0.01..0.99),
                label: rng.gen_bool(0.5) as u8,
            })
            .collect();
        let traces: Vec<AttentionTrace> =
            (0..8).map(|_| trace(Bucket::Long, &[0.4, 0.3, 0.2, 0.1])).collect();
        let cfg = ModelConfig { vocab_size: 10, ..ModelConfig::default() };
        let r = bucketed_report(&records, &traces, &cfg, "d").unwrap();
        assert_eq!(r.long, r.overall);
        assert_eq!(r.short.n_samples, 0);
        assert_eq!(r.medium.n_samples, 0);
    }

    #[test]
    fn gini_spread_matches_direct_arithmetic_on_bucket_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut records = Vec::new();
        let mut traces = Vec::new();
        for (bi, &raw) in [10u32, 150, 300].iter().enumerate() {
            for i in 0..6 {
                records.push(EvalRecord {
                    user_id: (bi * 10 + i) as u64,
                    raw_length: raw,
                    prediction: rng.gen_range(0.01..0.99),
                    label: (i % 2) as u8,
                });
                let b = bucket_of(raw, [100, 200]);
                let w: Vec<f64> = (0..5).map(|_| rng.gen_range(0.01..1.0)).collect();
                traces.push(trace(b, &w));
            }
        }
        let cfg = ModelConfig { vocab_size: 10, ..ModelConfig::default() };
        let r = bucketed_report(&records, &traces, &cfg, "d").unwrap();
        let means = [
            r.short.mean_gini.unwrap(),
            r.medium.mean_gini.unwrap(),
            r.long.mean_gini.unwrap(),
        ];
        let mean = means.iter().sum::<f64>() / 3.0;
        let var = means.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / 3.0;
        let range = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - means.iter().cloned().fold(f64::INFINITY, f64::min);
        close(r.gini_variance.unwrap(), var, 1e-15);
        close(r.gini_range.unwrap(), range, 1e-15);
    }

    #[test]
    fn report_serializes_with_null_for_undefined() {
        let cfg = ModelConfig { vocab_size: 10, ..ModelConfig::default() };
        let records = vec![EvalRecord { user_id: 1, raw_length: 10, prediction: 0.7, label: 1 }];
        let r = bucketed_report(&records, &[], &cfg, "dig").unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert!(v["short"]["auc"].is_null(), "single-class AUC must serialize as null");
        assert_eq!(v["short"]["n_samples"], 1);
        assert_eq!(v["dataset_digest"], "dig");
        let back: BucketedReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_has_one_row_per_bucket() {
        let cfg = ModelConfig { vocab_size: 10, ..ModelConfig::default() };
        let records = vec![
            EvalRecord { user_id: 1, raw_length: 10, prediction: 0.7, label: 1 },
            EvalRecord { user_id: 1, raw_length: 10, prediction: 0.3, label: 0 },
        ];
        let r = bucketed_report(&records, &[], &cfg, "dig").unwrap();
        let csv = report_csv(&r);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("bucket,auc,gauc,"));
        assert!(lines[1].starts_with("short,1,"), "short row carries its AUC: {}", lines[1]);
        assert!(lines[2].starts_with("medium,,"), "undefined cells stay empty: {}", lines[2]);
        assert!(lines[4].starts_with("overall,"));
    }
}
