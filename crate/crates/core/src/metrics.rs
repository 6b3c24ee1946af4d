//! Binary classification metrics. The responder class is positive.

use serde::{Deserialize, Serialize};

use crate::qeasl::Label;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no samples")]
    Empty,
    #[error("AUC needs both classes present")]
    SingleClass,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub f1: f64,
    /// Absent when only one class is present.
    pub auc: Option<f64>,
}

impl Metrics {
    /// `scores` are positive-class scores used for AUC.
    pub fn compute(pred: &[Label], truth: &[Label], scores: &[f64]) -> Result<Metrics, MetricsError> {
        if scores.len() != truth.len() {
            return Err(MetricsError::LengthMismatch(scores.len(), truth.len()));
        }
        Ok(Metrics {
            accuracy: accuracy(pred, truth)?,
            f1: f1_binary(pred, truth, Label::Responder)?,
            auc: match auc(scores, truth) {
                Ok(a) => Some(a),
                Err(MetricsError::SingleClass) => None,
                Err(e) => return Err(e),
            },
        })
    }
}

fn check(a: usize, b: usize) -> Result<(), MetricsError> {
    if a != b {
        return Err(MetricsError::LengthMismatch(a, b));
    }
    if a == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

pub fn accuracy<T: PartialEq>(pred: &[T], truth: &[T]) -> Result<f64, MetricsError> {
    check(pred.len(), truth.len())?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// F1 of `positive`; 0 when precision + recall = 0.
pub fn f1_binary(pred: &[Label], truth: &[Label], positive: Label) -> Result<f64, MetricsError> {
    check(pred.len(), truth.len())?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == positive, t == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    // 2PR/(P+R) = 2TP/(2TP+FP+FN)
    let denom = 2 * tp + fp + fn_;
    Ok(if tp == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 })
}

/// ROC AUC as the normalized Mann–Whitney statistic with half credit for
/// ties, computed from mid-ranks in O(n log n).
pub fn auc(scores: &[f64], truth: &[Label]) -> Result<f64, MetricsError> {
    check(scores.len(), truth.len())?;
    let n_pos = truth.iter().filter(|&&t| t == Label::Responder).count();
    let n_neg = truth.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of doubled positive ranks keeps tie mid-ranks integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share the mid-rank (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| truth[k] == Label::Responder).count() as u128;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let np = n_pos as u128;
    // 2U = 2R - n_pos(n_pos+1)
    let twice_u = twice_rank_sum - np * (np + 1);
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use Label::{NonResponder as N, Responder as R};

    fn labels(v: &[u8]) -> Vec<Label> {
        v.iter().map(|&b| Label::from_index(b as usize)).collect()
    }

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&labels(&[1, 1, 0, 0]), &labels(&[1, 0, 0, 0])).unwrap(), 0.75);
        assert_eq!(accuracy(&labels(&[1, 0]), &labels(&[1, 0])).unwrap(), 1.0);
        assert_eq!(accuracy(&labels(&[1]), &labels(&[1, 0])), Err(MetricsError::LengthMismatch(1, 2)));
        assert_eq!(accuracy::<Label>(&[], &[]), Err(MetricsError::Empty));
    }

    #[test]
    fn accuracy_counting_oracle() {
        let mut rng = crate::seed::rng(1);
        let a: Vec<Label> = (0..200).map(|_| Label::from_index(rng.random_range(0..2))).collect();
        let b: Vec<Label> = (0..200).map(|_| Label::from_index(rng.random_range(0..2))).collect();
        let mut same = 0;
        for i in 0..200 {
            if a[i] == b[i] {
                same += 1;
            }
        }
        assert_eq!(accuracy(&a, &b).unwrap(), same as f64 / 200.0);
    }

    #[test]
    fn f1_cases() {
        assert_eq!(f1_binary(&[R, N, R], &[R, N, R], R).unwrap(), 1.0);
        assert_eq!(f1_binary(&[N, N, N], &[R, N, R], R).unwrap(), 0.0);
        // TP=3, FP=1, FN=2: P=0.75, R=0.6
        let pred = [R, R, R, R, N, N, N];
        let truth = [R, R, R, N, R, R, N];
        let f1 = f1_binary(&pred, &truth, R).unwrap();
        let (p, r) = (0.75, 0.6);
        assert!((f1 - 2.0 * p * r / (p + r)).abs() < 1e-15);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[0.9, 0.8, 0.3], &[R, R, N]).unwrap(), 1.0);
        assert_eq!(auc(&[0.4; 6], &[R, N, R, N, N, R]).unwrap(), 0.5);
        assert_eq!(auc(&[0.1, 0.2], &[R, R]), Err(MetricsError::SingleClass));
        assert_eq!(auc(&[0.1, 0.9], &[R, N]).unwrap(), 0.0);
    }

    fn brute_force_auc(scores: &[f64], truth: &[Label]) -> f64 {
        let mut credit = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if truth[i] == R && truth[j] == N {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        credit += 1.0;
                    } else if scores[i] == scores[j] {
                        credit += 0.5;
                    }
                }
            }
        }
        credit / pairs
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = crate::seed::rng(2);
        for _ in 0..50 {
            let n = rng.random_range(2..=50);
            let truth: Vec<Label> = (0..n).map(|i| if i < 1 { R } else if i < 2 { N } else { Label::from_index(rng.random_range(0..2)) }).collect();
            // coarse grid forces ties
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..8) as f64 / 8.0).collect();
            assert_eq!(auc(&scores, &truth).unwrap(), brute_force_auc(&scores, &truth));
        }
    }

    #[test]
    fn metrics_handle_single_class() {
        let m = Metrics::compute(&[R, R], &[R, R], &[0.9, 0.8]).unwrap();
        assert_eq!(m, Metrics { accuracy: 1.0, f1: 1.0, auc: None });
    }

    #[test]
    fn permutation_invariance() {
        let pred = [R, N, R, R, N];
        let truth = [R, R, N, R, N];
        let perm = [3, 0, 4, 1, 2];
        let pp: Vec<Label> = perm.iter().map(|&i| pred[i]).collect();
        let tp: Vec<Label> = perm.iter().map(|&i| truth[i]).collect();
        assert_eq!(accuracy(&pred, &truth), accuracy(&pp, &tp));
        assert_eq!(f1_binary(&pred, &truth, R), f1_binary(&pp, &tp, R));
    }
}
