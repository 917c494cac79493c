use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// How a positive and a negative with equal scores are counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieMode {
    /// A tied pair counts one half (the usual ROC area).
    #[default]
    Average,
    /// A tied pair counts zero; only `score_p > score_n` is rewarded.
    Strict,
}

/// Area under the ROC curve with tied pairs counted as one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    auc_with(scores, labels, TieMode::Average)
}

/// Rank-based AUC in `O(n log n)`: the fraction of (positive, negative)
/// pairs ordered correctly.
pub fn auc_with(scores: &[f64], labels: &[bool], ties: TieMode) -> Result<f64> {
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
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Metric(format!(
            "AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Walk groups of equal scores. A positive in a group beats every negative
    // below the group and ties with the negatives inside it.
    let mut correct = 0.0;
    let mut tied = 0.0;
    let mut neg_below = 0usize;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let pos = order[start..end].iter().filter(|&&i| labels[i]).count();
        let neg = (end - start) - pos;
        correct += (pos * neg_below) as f64;
        tied += (pos * neg) as f64;
        neg_below += neg;
        start = end;
    }
    let tie_credit = match ties {
        TieMode::Average => 0.5,
        TieMode::Strict => 0.0,
    };
    Ok((correct + tie_credit * tied) / (n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false]).unwrap(), 0.75);
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert_eq!(auc_with(&[0.3; 4], &[true, false, true, false], TieMode::Strict).unwrap(), 0.0);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(auc(&[0.1, 0.2], &[true, true]), Err(Error::Metric(_))));
        assert!(auc(&[], &[]).is_err());
        assert!(auc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }
}
