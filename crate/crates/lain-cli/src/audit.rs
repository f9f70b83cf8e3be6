//! Attention-audit computations: counterfactual re-softmaxing of recorded
//! weight vectors and the per-bucket concentration CSV.

use lain_core::backbone::AttentionTrace;
use lain_core::data::Bucket;
use lain_core::error::Result;
use lain_core::metrics::BucketedReport;
use lain_core::tensor::softmax_temp;

/// Re-softmax a recorded attention distribution at temperature `tau`:
/// `softmax(ln(w) / tau)`. At tau = 1 this is the identity; as tau grows the
/// distribution flattens toward uniform.
pub fn counterfactual_weights(weights: &[f64], tau: f64) -> Result<Vec<f64>> {
    let logits: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    softmax_temp(&logits, tau, None)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `bucket,mean_gini,mean_entropy,n_traces` rows for the three buckets and
/// overall, followed by the across-bucket variance and range of the mean
/// Gini values (the polarization-spread figures).
pub fn gini_by_bucket_csv(report: &BucketedReport, traces: &[AttentionTrace]) -> String {
    let count = |b: Bucket| traces.iter().filter(|t| t.bucket == b).count();
    let rows = [
        ("short", &report.short, count(Bucket::Short)),
        ("medium", &report.medium, count(Bucket::Medium)),
        ("long", &report.long, count(Bucket::Long)),
        ("overall", &report.overall, traces.len()),
    ];
    let mut out = String::from("bucket,mean_gini,mean_entropy,n_traces\n");
    for (name, m, n) in rows {
        out.push_str(&format!("{name},{},{},{n}\n", cell(m.mean_gini), cell(m.mean_entropy)));
    }
    out.push_str(&format!("across_bucket_variance,{},,\n", cell(report.gini_variance)));
    out.push_str(&format!("across_bucket_range,{},,\n", cell(report.gini_range)));
    out
}
