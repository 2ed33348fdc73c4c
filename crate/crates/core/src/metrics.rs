//! Membership-inference metrics. "Member" is the positive class throughout.

use serde::{Deserialize, Serialize};

use crate::error::{MiaError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(false positive rate, true positive rate)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub auc: f64,
}

/// Sweeps the threshold over every distinct score, highest first. Tied
/// scores move the curve diagonally, which credits ties with one half.
pub fn roc_auc(scores: &[f64], members: &[bool]) -> Result<RocCurve> {
    if scores.len() != members.len() {
        return Err(MiaError::shape("one label per score required"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(MiaError::numeric("NaN score"));
    }
    let pos = members.iter().filter(|&&m| m).count();
    let neg = members.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MiaError::input("ROC needs both members and nonmembers"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (tp0, fp0) = (tp, fp);
        while i < order.len() && scores[order[i]] == s {
            if members[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        // Trapezoid in count units; normalized once at the end.
        auc += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(RocCurve { points, auc: auc / (pos as f64 * neg as f64) })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    /// No positive predictions; precision reported as 0.
    pub precision_undefined: bool,
    /// No positive labels; recall reported as 0.
    pub recall_undefined: bool,
}

pub fn classification_metrics(predicted: &[bool], members: &[bool]) -> Result<ClassificationMetrics> {
    if predicted.len() != members.len() {
        return Err(MiaError::shape("predictions and labels differ in length"));
    }
    if predicted.is_empty() {
        return Err(MiaError::input("no predictions"));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_ = 0usize;
    let mut correct = 0usize;
    for (&p, &m) in predicted.iter().zip(members) {
        match (p, m) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
        correct += usize::from(p == m);
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Ok(ClassificationMetrics {
        accuracy: correct as f64 / predicted.len() as f64,
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        precision_undefined: tp + fp == 0,
        recall_undefined: tp + fn_ == 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// P(member score > nonmember score) + P(tie) / 2 over all pairs.
    fn pairwise_auc(scores: &[f64], members: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &mi) in members.iter().enumerate() {
            for (j, &mj) in members.iter().enumerate() {
                if mi && !mj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_and_degenerate() {
        let r = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap();
        assert_eq!(r.auc, 1.0);
        let r = roc_auc(&[0.3; 6], &[true, false, true, false, true, false]).unwrap();
        assert_eq!(r.auc, 0.5);
        assert_eq!(r.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_auc(&[0.1], &[true, false]).is_err());
    }

    #[test]
    fn metric_examples() {
        let all = classification_metrics(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((all.accuracy, all.precision, all.recall), (1.0, 1.0, 1.0));
        let m = classification_metrics(&[true; 4], &[true, false, true, false]).unwrap();
        assert_eq!((m.accuracy, m.precision, m.recall), (0.5, 0.5, 1.0));
        let none = classification_metrics(&[false, false], &[true, false]).unwrap();
        assert!(none.precision_undefined && none.precision == 0.0);
        assert!(classification_metrics(&[], &[]).is_err());
        assert!(classification_metrics(&[true], &[]).is_err());
    }

    #[test]
    fn random_guessing_is_near_half() {
        use rand::Rng;
        let mut rng = crate::rng::stream(77, &[]);
        let p: Vec<bool> = (0..1000).map(|_| rng.random()).collect();
        let l: Vec<bool> = (0..1000).map(|_| rng.random()).collect();
        let m = classification_metrics(&p, &l).unwrap();
        assert!((m.accuracy - 0.5).abs() <= 0.05, "{}", m.accuracy);
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                prop::collection::vec(prop_oneof![(0u8..5).prop_map(f64::from), -3.0f64..3.0], n),
                prop::collection::vec(any::<bool>(), n),
            )
        })
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_oracle((scores, members) in scored()) {
            prop_assume!(members.iter().any(|&m| m) && members.iter().any(|&m| !m));
            let r = roc_auc(&scores, &members).unwrap();
            prop_assert!((r.auc - pairwise_auc(&scores, &members)).abs() <= 1e-12);
        }

        #[test]
        fn roc_is_monotone_and_reversal_complements((scores, members) in scored()) {
            prop_assume!(members.iter().any(|&m| m) && members.iter().any(|&m| !m));
            let r = roc_auc(&scores, &members).unwrap();
            prop_assert_eq!(r.points.first().copied(), Some((0.0, 0.0)));
            prop_assert_eq!(r.points.last().copied(), Some((1.0, 1.0)));
            for w in r.points.windows(2) {
                prop_assert!(w[1].0 >= w[0].0 && w[1].1 >= w[0].1);
            }
            prop_assert!((0.0..=1.0).contains(&r.auc));
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let flipped = roc_auc(&neg, &members).unwrap();
            prop_assert!((flipped.auc - (1.0 - r.auc)).abs() <= 1e-12);
        }
    }
}
