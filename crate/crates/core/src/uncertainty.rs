//! Monte Carlo dropout inference and confidence triage.
//!
//! Each node's final class is the majority vote over stochastic passes and
//! its confidence is the fraction of passes that agree with that vote.
//! Triage drops nodes whose confidence falls below a threshold.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::gcn::{argmax_rows, GcnError, GcnModel, Mode, N_CLASSES};
use crate::graph::PatientGraph;
use crate::metrics::{Metrics, MetricsError};
use crate::qeasl::Label;
use crate::seed;

pub const DEFAULT_MC_SAMPLES: usize = 100;
pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.85, 0.90, 0.95];

#[derive(Debug, thiserror::Error)]
pub enum UncertaintyError {
    #[error("n_samples must be >= 1")]
    InvalidSampleCount,
    #[error("node index {0} out of range")]
    NodeOutOfRange(usize),
    #[error("threshold must lie in (0.5, 1], got {0}")]
    InvalidThreshold(f64),
    #[error("no predictions to triage")]
    EmptyPredictions,
    #[error("{0} predictions but {1} labels")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Gcn(#[from] GcnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McPrediction {
    pub node: usize,
    /// Per-class vote counts, summing to the number of passes.
    pub votes: Vec<usize>,
    pub final_label: Label,
    pub confidence: f64,
    pub mean_prob: Vec<f64>,
}

impl McPrediction {
    pub fn positive_score(&self) -> f64 {
        self.mean_prob[Label::Responder.index()]
    }
}

/// Seed of MC pass `pass`.
pub fn mc_pass_seed(seed: u64, pass: usize) -> u64 {
    seed::derive(seed, "mc-pass", pass as u64)
}

/// Majority class; vote ties go to the larger mean probability, then class 0.
pub fn majority(votes: &[usize], mean_prob: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..votes.len() {
        if votes[c] > votes[best] || (votes[c] == votes[best] && mean_prob[c] > mean_prob[best]) {
            best = c;
        }
    }
    best
}

pub fn mc_predict_on(
    model: &GcnModel,
    a_hat: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    nodes: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<McPrediction>, UncertaintyError> {
    if n_samples == 0 {
        return Err(UncertaintyError::InvalidSampleCount);
    }
    if let Some(&bad) = nodes.iter().find(|&&i| i >= x.nrows()) {
        return Err(UncertaintyError::NodeOutOfRange(bad));
    }
    let mut votes = vec![[0usize; N_CLASSES]; nodes.len()];
    let mut prob_sum = vec![[0.0f64; N_CLASSES]; nodes.len()];
    for pass in 0..n_samples {
        let p = model.forward(a_hat, x, Mode::Stochastic(mc_pass_seed(seed, pass)))?.probabilities;
        let hard = argmax_rows(&p);
        for (k, &node) in nodes.iter().enumerate() {
            votes[k][hard[node]] += 1;
            for c in 0..N_CLASSES {
                prob_sum[k][c] += p[[node, c]];
            }
        }
    }
    Ok(nodes
        .iter()
        .enumerate()
        .map(|(k, &node)| {
            let mean_prob: Vec<f64> = prob_sum[k].iter().map(|s| s / n_samples as f64).collect();
            let winner = majority(&votes[k], &mean_prob);
            McPrediction {
                node,
                votes: votes[k].to_vec(),
                final_label: Label::from_index(winner),
                confidence: votes[k][winner] as f64 / n_samples as f64,
                mean_prob,
            }
        })
        .collect())
}

pub fn mc_predict(
    model: &GcnModel,
    graph: &PatientGraph,
    nodes: &[usize],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<McPrediction>, UncertaintyError> {
    mc_predict_on(model, graph.normalized.view(), graph.features.view(), nodes, n_samples, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageReport {
    pub threshold: f64,
    pub retained: Vec<usize>,
    pub flagged: Vec<usize>,
    pub metrics_all: Metrics,
    /// Absent when every node was flagged.
    pub metrics_retained: Option<Metrics>,
}

impl TriageReport {
    /// Retained minus all, in percentage points.
    pub fn improvement_pct(&self) -> Option<Metrics> {
        let r = self.metrics_retained?;
        let a = self.metrics_all;
        Some(Metrics {
            accuracy: 100.0 * (r.accuracy - a.accuracy),
            f1: 100.0 * (r.f1 - a.f1),
            auc: r.auc.zip(a.auc).map(|(r, a)| 100.0 * (r - a)),
        })
    }
}

pub fn validate_threshold(t: f64) -> Result<(), UncertaintyError> {
    if t > 0.5 && t <= 1.0 {
        Ok(())
    } else {
        Err(UncertaintyError::InvalidThreshold(t))
    }
}

fn metrics_of(preds: &[&McPrediction], truth: &[Label]) -> Result<Metrics, MetricsError> {
    let pred: Vec<Label> = preds.iter().map(|p| p.final_label).collect();
    let scores: Vec<f64> = preds.iter().map(|p| p.positive_score()).collect();
    Metrics::compute(&pred, truth, &scores)
}

/// `truth[k]` is the true label of `preds[k]`.
pub fn triage(preds: &[McPrediction], truth: &[Label], threshold: f64) -> Result<TriageReport, UncertaintyError> {
    validate_threshold(threshold)?;
    if preds.is_empty() {
        return Err(UncertaintyError::EmptyPredictions);
    }
    if preds.len() != truth.len() {
        return Err(UncertaintyError::LengthMismatch(preds.len(), truth.len()));
    }
    let all: Vec<&McPrediction> = preds.iter().collect();
    let keep: Vec<usize> = (0..preds.len()).filter(|&k| preds[k].confidence >= threshold).collect();
    let kept: Vec<&McPrediction> = keep.iter().map(|&k| &preds[k]).collect();
    let kept_truth: Vec<Label> = keep.iter().map(|&k| truth[k]).collect();
    Ok(TriageReport {
        threshold,
        retained: kept.iter().map(|p| p.node).collect(),
        flagged: preds.iter().filter(|p| p.confidence < threshold).map(|p| p.node).collect(),
        metrics_all: metrics_of(&all, truth)?,
        metrics_retained: if kept.is_empty() { None } else { Some(metrics_of(&kept, &kept_truth)?) },
    })
}

/// Aligned text table: node id, final label, confidence, true label, retained.
pub fn render_triage_table(preds: &[McPrediction], ids: &[String], truth: &[Option<Label>], threshold: f64) -> String {
    let id_width = preds.iter().map(|p| ids[p.node].len()).chain(std::iter::once(7)).max().unwrap_or(7);
    let mut out = format!("{:<id_width$}  {:>5}  {:>10}  {:>4}  {:>8}\n", "node_id", "final", "confidence", "true", "retained");
    for (k, p) in preds.iter().enumerate() {
        out.push_str(&format!(
            "{:<id_width$}  {:>5}  {:>10.2}  {:>4}  {:>8}\n",
            ids[p.node],
            p.final_label.code(),
            p.confidence,
            truth[k].map_or("-", Label::code),
            if p.confidence >= threshold { "yes" } else { "no" },
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::Rng;

    fn setup(p: f64, seed_: u64) -> (GcnModel, PatientGraph) {
        let mut rng = seed::rng(seed_);
        let n = 10;
        let mut w = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..i {
                if rng.random_bool(0.4) {
                    let v = rng.random_range(0.0..1.0);
                    w[[i, j]] = v;
                    w[[j, i]] = v;
                }
            }
        }
        let x = Array2::from_shape_simple_fn((n, 4), || rng.random_range(-1.0..1.0));
        let graph = PatientGraph::from_parts(x, w).unwrap();
        let model = GcnModel {
            w0: Array2::from_shape_simple_fn((4, 6), || rng.random_range(-1.0..1.0)),
            w1: Array2::from_shape_simple_fn((6, 2), || rng.random_range(-1.0..1.0)),
            dropout_rate: p,
        };
        (model, graph)
    }

    #[test]
    fn zero_dropout_is_fully_confident() {
        let (m, g) = setup(0.0, 1);
        let nodes: Vec<usize> = (0..10).collect();
        let preds = mc_predict(&m, &g, &nodes, 20, 3).unwrap();
        assert!(preds.iter().all(|p| p.confidence == 1.0));
        let truth: Vec<Label> = (0..10).map(|i| Label::from_index(i % 2)).collect();
        for t in DEFAULT_THRESHOLDS {
            assert_eq!(triage(&preds, &truth, t).unwrap().retained.len(), 10);
        }
    }

    #[test]
    fn vote_tally_matches_recount() {
        let (m, g) = setup(0.15, 2);
        let nodes: Vec<usize> = vec![0, 3, 5, 9];
        let preds = mc_predict(&m, &g, &nodes, 100, 77).unwrap();
        assert_eq!(preds, mc_predict(&m, &g, &nodes, 100, 77).unwrap());
        let mut counts = vec![[0usize; 2]; 4];
        for pass in 0..100 {
            let p = m.forward(g.normalized.view(), g.features.view(), Mode::Stochastic(mc_pass_seed(77, pass))).unwrap().probabilities;
            for (k, &node) in nodes.iter().enumerate() {
                let c = if p[[node, 1]] > p[[node, 0]] { 1 } else { 0 };
                counts[k][c] += 1;
            }
        }
        for (k, pred) in preds.iter().enumerate() {
            assert_eq!(pred.votes, counts[k].to_vec());
            assert_eq!(pred.votes.iter().sum::<usize>(), 100);
            let winner = pred.final_label.index();
            assert!(pred.votes[winner] >= pred.votes[1 - winner]);
            assert_eq!(pred.confidence, pred.votes[winner] as f64 / 100.0);
            assert!((pred.mean_prob.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn majority_and_ties() {
        assert_eq!(majority(&[37, 63], &[0.6, 0.4]), 1);
        assert_eq!(majority(&[50, 50], &[0.4, 0.6]), 1);
        assert_eq!(majority(&[50, 50], &[0.6, 0.4]), 0);
        assert_eq!(majority(&[50, 50], &[0.5, 0.5]), 0);
    }

    fn pred(node: usize, conf: f64, label: Label, score: f64) -> McPrediction {
        let winner = label.index();
        let mut votes = vec![0, 0];
        votes[winner] = (conf * 100.0).round() as usize;
        votes[1 - winner] = 100 - votes[winner];
        McPrediction { node, votes, final_label: label, confidence: conf, mean_prob: vec![1.0 - score, score] }
    }

    #[test]
    fn triage_filters_by_confidence() {
        let preds = vec![
            pred(1, 0.6, Label::Responder, 0.55),
            pred(2, 0.9, Label::Responder, 0.8),
            pred(3, 1.0, Label::NonResponder, 0.1),
        ];
        let truth = [Label::NonResponder, Label::Responder, Label::NonResponder];
        let r = triage(&preds, &truth, 0.85).unwrap();
        assert_eq!(r.retained, vec![2, 3]);
        assert_eq!(r.flagged, vec![1]);
        assert!((r.metrics_all.accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.metrics_retained.unwrap().accuracy, 1.0);
        assert!((r.improvement_pct().unwrap().accuracy - 100.0 / 3.0).abs() < 1e-9);
        // one-class retained set leaves AUC undefined
        let r = triage(&preds, &truth, 0.95).unwrap();
        assert_eq!(r.metrics_retained.unwrap().auc, None);
    }

    #[test]
    fn triage_preconditions() {
        let preds = vec![pred(0, 1.0, Label::Responder, 0.9)];
        assert!(matches!(triage(&preds, &[Label::Responder], 0.5), Err(UncertaintyError::InvalidThreshold(_))));
        assert!(matches!(triage(&[], &[], 0.9), Err(UncertaintyError::EmptyPredictions)));
        let (m, g) = setup(0.1, 3);
        assert!(matches!(mc_predict(&m, &g, &[0], 0, 1), Err(UncertaintyError::InvalidSampleCount)));
    }

    #[test]
    fn table_is_aligned() {
        let preds = vec![pred(0, 0.6, Label::Responder, 0.55), pred(1, 0.95, Label::NonResponder, 0.1)];
        let ids = vec!["P0001".to_string(), "P0002".to_string()];
        let t = render_triage_table(&preds, &ids, &[Some(Label::NonResponder), None], 0.9);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines.iter().all(|l| l.len() == lines[0].len()));
        assert!(lines[1].ends_with("no") && lines[2].ends_with("yes"));
    }

    proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]
        #[test]
        fn node_order_and_nesting(seed_ in any::<u64>(), mc_seed in any::<u64>()) {
            let (m, g) = setup(0.3, seed_);
            let fwd: Vec<usize> = (0..10).collect();
            let rev: Vec<usize> = (0..10).rev().collect();
            let a = mc_predict(&m, &g, &fwd, 25, mc_seed).unwrap();
            let mut b = mc_predict(&m, &g, &rev, 25, mc_seed).unwrap();
            b.reverse();
            prop_assert_eq!(&a, &b);
            let truth: Vec<Label> = (0..10).map(|i| Label::from_index(i % 2)).collect();
            let mut prev: Option<Vec<usize>> = None;
            for t in [0.55, 0.7, 0.85, 0.9, 0.95, 1.0] {
                let r = triage(&a, &truth, t).unwrap();
                prop_assert_eq!(r.retained.len() + r.flagged.len(), 10);
                prop_assert!(r.retained.iter().all(|n| a[*n].confidence >= t));
                if let Some(p) = &prev {
                    prop_assert!(r.retained.iter().all(|n| p.contains(n)));
                }
                prev = Some(r.retained);
            }
        }
    }
}
