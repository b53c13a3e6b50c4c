//! Binary classification metrics with Malignant as the positive class.

use serde::{Deserialize, Serialize};

use crate::domain::BiopsyLabel;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    /// Counts for the complemented predictions.
    pub fn complement(&self) -> Self {
        ConfusionCounts {
            tp: self.fn_,
            fn_: self.tp,
            tn: self.fp,
            fp: self.tn,
        }
    }

    pub fn merge(&self, other: &ConfusionCounts) -> Self {
        ConfusionCounts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

pub fn confusion(preds: &[BiopsyLabel], truth: &[BiopsyLabel]) -> Result<ConfusionCounts> {
    if preds.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: preds.len(),
            right: truth.len(),
        });
    }
    if preds.is_empty() {
        return Err(Error::Empty);
    }
    let mut c = ConfusionCounts::default();
    for (p, t) in preds.iter().zip(truth) {
        match (p.is_positive(), t.is_positive()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Matthews correlation coefficient; 0 when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

/// Sensitivity; 0 when there are no positives.
pub fn recall(c: &ConfusionCounts) -> f64 {
    if c.positives() == 0 {
        0.0
    } else {
        c.tp as f64 / c.positives() as f64
    }
}

/// True negative rate; 0 when there are no negatives.
pub fn specificity(c: &ConfusionCounts) -> f64 {
    if c.negatives() == 0 {
        0.0
    } else {
        c.tn as f64 / c.negatives() as f64
    }
}

pub fn gmean(c: &ConfusionCounts) -> f64 {
    (recall(c) * specificity(c)).sqrt()
}

/// Geometric mean of the per-class recalls over the classes present in the truth.
/// On a single-class slice this reduces to that class's recall.
pub fn gmean_present_classes(c: &ConfusionCounts) -> Option<f64> {
    match (c.positives() > 0, c.negatives() > 0) {
        (true, true) => Some(gmean(c)),
        (true, false) => Some(recall(c)),
        (false, true) => Some(specificity(c)),
        (false, false) => None,
    }
}

/// Area under the ROC curve via the Mann-Whitney rank sum, ties counting one half.
/// `None` when either class is absent.
pub fn auc(scores: &[f64], truth: &[BiopsyLabel]) -> Result<Option<f64>> {
    if scores.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: scores.len(),
            right: truth.len(),
        });
    }
    let n_pos = truth.iter().filter(|t| t.is_positive()).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Ok(None);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // midranks (1-based), doubled to keep them integral
    let mut pos_rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let doubled_midrank = (i + 1 + j + 1) as u64;
        for &k in &order[i..=j] {
            if truth[k].is_positive() {
                pos_rank_sum2 += doubled_midrank;
            }
        }
        i = j + 1;
    }
    let (np, nn) = (n_pos as u64, n_neg as u64);
    // U = R_pos - n_pos (n_pos + 1) / 2, everything doubled
    let u2 = pos_rank_sum2 - np * (np + 1);
    Ok(Some(u2 as f64 / (2 * np * nn) as f64))
}

/// AUC, G-mean and MCC for one evaluation slice.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsTriple {
    pub auc: Option<f64>,
    pub gmean: f64,
    pub mcc: Option<f64>,
}

impl MetricsTriple {
    /// `scores` drive AUC; `preds` drive G-mean and MCC. On single-class slices
    /// AUC and MCC are undefined and reported as `None`.
    pub fn evaluate(
        scores: &[f64],
        preds: &[BiopsyLabel],
        truth: &[BiopsyLabel],
    ) -> Result<(MetricsTriple, ConfusionCounts)> {
        let counts = confusion(preds, truth)?;
        let both = counts.positives() > 0 && counts.negatives() > 0;
        let triple = MetricsTriple {
            auc: auc(scores, truth)?,
            gmean: if both {
                gmean(&counts)
            } else {
                gmean_present_classes(&counts).unwrap_or(0.0)
            },
            mcc: both.then(|| mcc(&counts)),
        };
        Ok((triple, counts))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use BiopsyLabel::{Benign as B, Malignant as M};
    use proptest::prelude::*;

    fn naive_auc(scores: &[f64], truth: &[BiopsyLabel]) -> Option<f64> {
        let mut num = 0.0;
        let mut pairs = 0u64;
        for (i, ti) in truth.iter().enumerate() {
            for (j, tj) in truth.iter().enumerate() {
                if ti.is_positive() && !tj.is_positive() {
                    pairs += 1;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        (pairs > 0).then(|| num / pairs as f64)
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion(&[M, B], &[M, B]).unwrap(), ConfusionCounts::new(1, 0, 1, 0));
        assert_eq!(confusion(&[M, M], &[B, B]).unwrap().fp, 2);
        assert!(matches!(confusion(&[M], &[M, B]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(confusion(&[], &[]), Err(Error::Empty)));
    }

    #[test]
    fn mcc_examples() {
        assert_eq!(mcc(&ConfusionCounts::new(1, 0, 1, 0)), 1.0);
        assert_eq!(mcc(&ConfusionCounts::new(0, 1, 0, 1)), -1.0);
        let c = ConfusionCounts::new(6, 1, 2, 1);
        assert!((mcc(&c) - 11.0 / 21.0).abs() < 1e-15);
        // constant predictor on mixed labels
        assert_eq!(mcc(&ConfusionCounts::new(3, 2, 0, 0)), 0.0);
    }

    #[test]
    fn gmean_examples() {
        assert_eq!(gmean(&ConfusionCounts::new(3, 0, 4, 0)), 1.0);
        assert_eq!(gmean(&ConfusionCounts::new(3, 4, 0, 0)), 0.0);
        // recall 0.9, specificity 0.4
        let c = ConfusionCounts::new(9, 6, 4, 1);
        assert!((gmean(&c) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[M, B]).unwrap(), Some(1.0));
        assert_eq!(auc(&[0.3; 4], &[M, B, B, M]).unwrap(), Some(0.5));
        assert_eq!(auc(&[0.3, 0.4], &[M, M]).unwrap(), None);
        assert!(auc(&[0.3], &[M, B]).is_err());
    }

    #[test]
    fn single_class_slices_report_nulls() {
        let (m, _) = MetricsTriple::evaluate(&[0.9, 0.2], &[M, B], &[M, M]).unwrap();
        assert_eq!(m.auc, None);
        assert_eq!(m.mcc, None);
        assert_eq!(m.gmean, 0.5);
    }

    fn labels(bits: &[bool]) -> Vec<BiopsyLabel> {
        bits.iter().map(|&b| if b { M } else { B }).collect()
    }

    proptest! {
        #[test]
        fn rank_auc_matches_pair_enumeration(
            items in proptest::collection::vec((0u8..20, any::<bool>()), 1..120)
        ) {
            let scores: Vec<f64> = items.iter().map(|(s, _)| f64::from(*s) / 19.0).collect();
            let truth = labels(&items.iter().map(|(_, b)| *b).collect::<Vec<_>>());
            let fast = auc(&scores, &truth).unwrap();
            let slow = naive_auc(&scores, &truth);
            match (fast, slow) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        #[test]
        fn auc_is_invariant_to_monotone_transforms(
            items in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..60)
        ) {
            let scores: Vec<f64> = items.iter().map(|(s, _)| *s).collect();
            let truth = labels(&items.iter().map(|(_, b)| *b).collect::<Vec<_>>());
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc(&scores, &truth).unwrap(), auc(&warped, &truth).unwrap());
        }

        #[test]
        fn mcc_flips_sign_on_complement(tp in 0u64..30, fp in 0u64..30, tn in 0u64..30, fn_ in 0u64..30) {
            let c = ConfusionCounts::new(tp, fp, tn, fn_);
            prop_assume!(c.total() > 0);
            let (a, b) = (mcc(&c), mcc(&c.complement()));
            prop_assert!((a + b).abs() < 1e-15);
            prop_assert!((-1.0..=1.0).contains(&a));
            prop_assert!((0.0..=1.0).contains(&gmean(&c)));
        }

        #[test]
        fn confusion_matches_recount(bits in proptest::collection::vec((any::<bool>(), any::<bool>()), 50)) {
            let preds = labels(&bits.iter().map(|b| b.0).collect::<Vec<_>>());
            let truth = labels(&bits.iter().map(|b| b.1).collect::<Vec<_>>());
            let c = confusion(&preds, &truth).unwrap();
            let count = |p: bool, t: bool| bits.iter().filter(|b| b.0 == p && b.1 == t).count() as u64;
            prop_assert_eq!(c, ConfusionCounts::new(count(true, true), count(true, false), count(false, false), count(false, true)));
        }
    }
}
