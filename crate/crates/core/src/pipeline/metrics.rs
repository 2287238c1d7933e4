use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::datamodel::{class_counts, Label};
use crate::error::{invalid, Result};

/// Area under the ROC curve with SZ as the positive class, via the
/// Mann–Whitney rank sum (tied scores share their mid-rank, i.e. count
/// half a concordant pair).
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(invalid!("{} scores for {} labels", scores.len(), labels.len()));
    }
    let (n_hc, n_sz) = class_counts(labels);
    if n_hc == 0 || n_sz == 0 {
        return Err(invalid!("AUC needs both classes, got {n_hc} HC and {n_sz} SZ"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(invalid!("AUC scores must be finite"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_sz = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start..end (1-based start+1..=end) share the mid-rank
        let mid = (start + 1 + end) as f64 / 2.0;
        let sz = order[start..end].iter().filter(|&&i| labels[i] == Label::Sz).count();
        rank_sum_sz += mid * sz as f64;
        start = end;
    }
    let u = rank_sum_sz - (n_sz * (n_sz + 1)) as f64 / 2.0;
    Ok(u / (n_sz * n_hc) as f64)
}

/// One-tailed paired t-test p-value for `mean(a) > mean(b)`.
///
/// When the paired differences have zero variance the p-value is 0, 1 or
/// 0.5 by the sign of the mean difference.
pub fn significance_test(a: &[f64], b: &[f64]) -> Result<f64> {
    let k = a.len();
    if k != b.len() || k < 2 {
        return Err(invalid!("paired test needs two samples of equal length >= 2"));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / k as f64;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    if var == 0.0 {
        return Ok(if mean > 0.0 {
            0.0
        } else if mean < 0.0 {
            1.0
        } else {
            0.5
        });
    }
    let t = mean / (var / k as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (k - 1) as f64).expect("positive dof");
    Ok(1.0 - dist.cdf(t))
}

/// Mean and sample (k−1) standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
