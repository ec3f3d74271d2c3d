//! Evaluation mathematics: confusion matrix, one-vs-rest precision/recall/F1,
//! accuracy, column summaries (mean + sample standard deviation), and
//! one-vs-rest AUC computed by two independent routes that agree bit-exactly.

use crate::error::{Error, Result};

/// K x K counts; rows are actual classes, columns are predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn from_labels(actual: &[usize], predicted: &[usize], k: usize) -> Result<Self> {
        if actual.is_empty() || actual.len() != predicted.len() {
            return Err(Error::Contract(format!(
                "confusion matrix needs equal, non-empty label lists (got {} and {})",
                actual.len(),
                predicted.len()
            )));
        }
        if k == 0 {
            return Err(Error::Contract("confusion matrix needs k >= 1".into()));
        }
        let mut counts = vec![0u64; k * k];
        for (&a, &p) in actual.iter().zip(predicted) {
            if a >= k || p >= k {
                return Err(Error::Contract(format!(
                    "label pair ({a}, {p}) out of range for {k} classes"
                )));
            }
            counts[a * k + p] += 1;
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn entry(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.k + predicted]
    }

    pub fn row_total(&self, actual: usize) -> u64 {
        (0..self.k).map(|j| self.entry(actual, j)).sum()
    }

    pub fn col_total(&self, predicted: usize) -> u64 {
        (0..self.k).map(|i| self.entry(i, predicted)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn diagonal(&self) -> Vec<u64> {
        (0..self.k).map(|i| self.entry(i, i)).collect()
    }
}

/// trace / total.
pub fn accuracy_of(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("accuracy of an empty matrix".into()));
    }
    let trace: u64 = cm.diagonal().iter().sum();
    Ok(trace as f64 / total as f64)
}

/// One class's metrics. A zero denominator yields value 0 with the
/// corresponding `*_defined` flag cleared, so macro averages stay computable.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfRow {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_defined: bool,
    pub recall_defined: bool,
    pub f1_defined: bool,
}

/// One-vs-rest TP/FP/FN per class read straight off the confusion matrix.
pub fn per_class_prf(cm: &ConfusionMatrix) -> Vec<PrfRow> {
    (0..cm.k())
        .map(|c| {
            let tp = cm.entry(c, c) as f64;
            let fp = (cm.col_total(c) - cm.entry(c, c)) as f64;
            let fn_ = (cm.row_total(c) - cm.entry(c, c)) as f64;
            let precision_defined = tp + fp > 0.0;
            let recall_defined = tp + fn_ > 0.0;
            let precision = if precision_defined { tp / (tp + fp) } else { 0.0 };
            let recall = if recall_defined { tp / (tp + fn_) } else { 0.0 };
            let f1_defined = precision_defined && recall_defined && precision + recall > 0.0;
            let f1 = if f1_defined {
                2.0 * recall * precision / (recall + precision)
            } else {
                0.0
            };
            PrfRow {
                precision,
                recall,
                f1,
                precision_defined,
                recall_defined,
                f1_defined,
            }
        })
        .collect()
}

/// Arithmetic mean plus sample (n-1) standard deviation. The deviation is
/// undefined (None) for a single value; an empty list is a contract error.
pub fn column_mean_std(values: &[f64]) -> Result<(f64, Option<f64>)> {
    if values.is_empty() {
        return Err(Error::Contract("mean/std of an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return Ok((mean, None));
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    Ok((mean, Some((ss / (n - 1.0)).sqrt())))
}

/// One-vs-rest AUC via the Mann-Whitney pair count: concordant pairs score 1,
/// ties score 1/2, over n_pos * n_neg pairs. Returns None when either side is
/// empty (single-class input).
pub fn ovr_auc_pair_count(scores: &[f64], is_positive: &[bool]) -> Result<Option<f64>> {
    check_auc_inputs(scores, is_positive)?;
    let pos: Vec<f64> = scores
        .iter()
        .zip(is_positive)
        .filter(|(_, &p)| p)
        .map(|(&s, _)| s)
        .collect();
    let neg: Vec<f64> = scores
        .iter()
        .zip(is_positive)
        .filter(|(_, &p)| !p)
        .map(|(&s, _)| s)
        .collect();
    if pos.is_empty() || neg.is_empty() {
        return Ok(None);
    }
    // numerator counts in half-units so ties stay integral
    let mut num: u128 = 0;
    for &sp in &pos {
        for &sn in &neg {
            if sp > sn {
                num += 2;
            } else if sp == sn {
                num += 1;
            }
        }
    }
    let den = 2u128 * pos.len() as u128 * neg.len() as u128;
    Ok(Some(num as f64 / den as f64))
}

/// The same quantity as the trapezoidal area under the ROC curve, swept over
/// distinct score thresholds. Both routes compute an exact integer numerator
/// over 2 * n_pos * n_neg, so they agree bit-for-bit.
pub fn ovr_auc_trapezoid(scores: &[f64], is_positive: &[bool]) -> Result<Option<f64>> {
    check_auc_inputs(scores, is_positive)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let n_pos = is_positive.iter().filter(|&&p| p).count() as u128;
    let n_neg = is_positive.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut num: u128 = 0; // sum over threshold groups of dFP * (TP_prev + TP_cur)
    let (mut tp, mut fp) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut dtp, mut dfp) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if is_positive[order[j]] {
                dtp += 1;
            } else {
                dfp += 1;
            }
            j += 1;
        }
        num += dfp * (tp + (tp + dtp));
        tp += dtp;
        fp += dfp;
        i = j;
    }
    debug_assert_eq!(tp, n_pos);
    debug_assert_eq!(fp, n_neg);
    let den = 2u128 * n_pos * n_neg;
    Ok(Some(num as f64 / den as f64))
}

fn check_auc_inputs(scores: &[f64], is_positive: &[bool]) -> Result<()> {
    if scores.is_empty() || scores.len() != is_positive.len() {
        return Err(Error::Contract(format!(
            "AUC needs equal, non-empty score/label lists (got {} and {})",
            scores.len(),
            is_positive.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("AUC scores must be finite".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_matrix_hand_count() {
        let cm = ConfusionMatrix::from_labels(&[0, 0, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!(cm.entry(0, 0), 1);
        assert_eq!(cm.entry(0, 1), 1);
        assert_eq!(cm.entry(1, 0), 0);
        assert_eq!(cm.entry(1, 1), 1);
        assert_eq!(cm.total(), 3);
    }

    #[test]
    fn perfect_predictions_land_on_the_diagonal() {
        let labels = [0usize, 1, 1, 2, 2, 2];
        let cm = ConfusionMatrix::from_labels(&labels, &labels, 3).unwrap();
        assert_eq!(cm.diagonal(), vec![1, 2, 3]);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(cm.entry(i, j), 0);
                }
            }
        }
        assert_eq!(accuracy_of(&cm).unwrap(), 1.0);
    }

    #[test]
    fn confusion_matrix_contract_errors() {
        assert!(ConfusionMatrix::from_labels(&[], &[], 2).is_err());
        assert!(ConfusionMatrix::from_labels(&[0], &[0, 1], 2).is_err());
        assert!(ConfusionMatrix::from_labels(&[2], &[0], 2).is_err());
    }

    #[test]
    fn prf_hand_values() {
        // cm [[2,1],[1,6]]: class 0 has TP=2, FP=1, FN=1
        let cm = ConfusionMatrix::from_labels(
            &[0, 0, 0, 1, 1, 1, 1, 1, 1, 1],
            &[0, 0, 1, 0, 1, 1, 1, 1, 1, 1],
            2,
        )
        .unwrap();
        assert_eq!(cm.entry(0, 0), 2);
        assert_eq!(cm.entry(0, 1), 1);
        assert_eq!(cm.entry(1, 0), 1);
        assert_eq!(cm.entry(1, 1), 6);
        let rows = per_class_prf(&cm);
        assert!((rows[0].precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((rows[0].recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((rows[0].f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn prf_degenerate_cases_are_flagged_not_thrown() {
        // class 1 never occurs and is never predicted
        let cm = ConfusionMatrix::from_labels(&[0, 0], &[0, 0], 2).unwrap();
        let rows = per_class_prf(&cm);
        assert_eq!(rows[0].precision, 1.0);
        assert!(!rows[1].precision_defined);
        assert!(!rows[1].recall_defined);
        assert!(!rows[1].f1_defined);
        assert_eq!(rows[1].f1, 0.0);
    }

    #[test]
    fn f1_is_harmonic_mean_instance() {
        // precision .5, recall 1 -> F1 = 2/3
        let cm = ConfusionMatrix::from_labels(&[0, 1], &[0, 0], 2).unwrap();
        let rows = per_class_prf(&cm);
        assert!((rows[0].precision - 0.5).abs() < 1e-12);
        assert!((rows[0].recall - 1.0).abs() < 1e-12);
        assert!((rows[0].f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn accuracy_hand_value() {
        // [[1,1],[0,2]] -> 3/4
        let cm = ConfusionMatrix::from_labels(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(accuracy_of(&cm).unwrap(), 0.75);
    }

    #[test]
    fn mean_std_reproduces_published_precision_column() {
        let precision = [0.9458, 0.9495, 0.9468, 0.9421, 0.9917, 0.9126, 0.9897];
        let (mean, std) = column_mean_std(&precision).unwrap();
        assert_eq!(format!("{mean:.4}"), "0.9540");
        assert_eq!(format!("{:.4}", std.unwrap()), "0.0280");
    }

    #[test]
    fn mean_std_reproduces_published_recall_column() {
        let recall = [0.9984, 0.9930, 0.9564, 0.9926, 0.9204, 0.9538, 0.9091];
        let (mean, std) = column_mean_std(&recall).unwrap();
        assert_eq!(format!("{mean:.4}"), "0.9605");
        assert_eq!(format!("{:.4}", std.unwrap()), "0.0361");
    }

    #[test]
    fn mean_std_degenerate_lists() {
        let (mean, std) = column_mean_std(&[0.5; 7]).unwrap();
        assert_eq!(mean, 0.5);
        assert_eq!(std.unwrap(), 0.0);
        let (_, std1) = column_mean_std(&[0.3]).unwrap();
        assert!(std1.is_none());
        assert!(column_mean_std(&[]).is_err());
    }

    #[test]
    fn auc_fixed_instances() {
        // perfectly separated
        let a = ovr_auc_pair_count(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(a, Some(1.0));
        // all identical -> tie convention 0.5
        let b = ovr_auc_pair_count(&[0.4; 6], &[true, true, false, false, false, true]).unwrap();
        assert_eq!(b, Some(0.5));
        // pos {0.9, 0.4}, neg {0.6, 0.1} -> 3/4
        let c = ovr_auc_pair_count(&[0.9, 0.4, 0.6, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(c, Some(0.75));
    }

    #[test]
    fn auc_single_class_is_undefined() {
        assert_eq!(
            ovr_auc_pair_count(&[0.5, 0.25], &[true, true]).unwrap(),
            None
        );
        assert_eq!(
            ovr_auc_trapezoid(&[0.5, 0.25], &[false, false]).unwrap(),
            None
        );
    }

    #[test]
    fn auc_routes_agree_exactly_on_fixed_cases() {
        let cases: Vec<(Vec<f64>, Vec<bool>)> = vec![
            (vec![0.9, 0.8, 0.2, 0.1], vec![true, true, false, false]),
            (vec![0.4; 6], vec![true, true, false, false, false, true]),
            (vec![0.9, 0.4, 0.6, 0.1], vec![true, true, false, false]),
            (
                vec![0.3, 0.3, 0.7, 0.1, 0.7, 0.5],
                vec![false, true, true, false, false, true],
            ),
        ];
        for (scores, pos) in cases {
            let a = ovr_auc_pair_count(&scores, &pos).unwrap().unwrap();
            let b = ovr_auc_trapezoid(&scores, &pos).unwrap().unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn auc_rejects_nan_scores() {
        assert!(matches!(
            ovr_auc_pair_count(&[f64::NAN, 0.1], &[true, false]),
            Err(Error::Numeric(_))
        ));
    }
}
