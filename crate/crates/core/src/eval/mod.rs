//! ROC AUC and the cross-seed ablation runner.

pub mod ablation;
pub mod report;

use crate::error::{Error, Result};

pub use ablation::{run_ablation, AblationGrid, TtsCell};
pub use report::{AnnotationSource, EvalReport, Method, ReportRow};

/// Area under the ROC curve via the Mann-Whitney statistic; tied
/// positive/negative pairs count one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::Metric(format!("score {i} is NaN")));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes, got {positives} positive and {negatives} negative"
        )));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks of the positives; integers doubled to stay exact.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, midrank doubled = i + j + 2
        let doubled_mid = (i + j + 2) as u128;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        doubled_rank_sum += doubled_mid * tied_pos;
        i = j + 1;
    }
    let p = positives as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2.0 * positives as f64 * negatives as f64))
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
