//! Stratified cross-validation of the GCN pipeline, edge-attribute
//! ablations and the PCA + random-forest baseline.
//!
//! Every variant run on one [`PreparedFolds`] sees the same folds, the same
//! per-fold features and the same per-fold seeds, so differences between
//! rows come from the graph alone.

use std::fmt::Write as _;

use ndarray::{concatenate, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{stratified_kfold, Cohort, DatasetError, Fold};
use crate::encoder::{cohort_inputs, train_autoencoder_rows, EncoderConfig, EncoderError};
use crate::forest::{rf_predict, train_random_forest, ForestError, ForestParams};
use crate::gcn::{train_on, GcnError, TrainConfig};
use crate::graph::{adjacency_from_parts, edge_attribute_table, feature_matrix, normalize_adjacency, GraphConfig, GraphError};
use crate::metrics::{Metrics, MetricsError};
use crate::pca::{Pca, PcaError};
use crate::qeasl::Label;
use crate::seed;
use crate::uncertainty::{mc_predict_on, triage, McPrediction, TriageReport, UncertaintyError, DEFAULT_MC_SAMPLES, DEFAULT_THRESHOLDS};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Gcn(#[from] GcnError),
    #[error(transparent)]
    Uncertainty(#[from] UncertaintyError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Forest(#[from] ForestError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error("invalid evaluation config: {0}")]
    InvalidConfig(String),
}

/// Where node features come from inside each fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Use the cohort's stored feature vectors as-is.
    #[default]
    Precomputed,
    /// Fit an autoencoder on the fold's training volumes and encode everyone.
    Autoencoder(EncoderConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvConfig {
    pub k: usize,
    pub n_mc: usize,
    pub seed: u64,
    pub thresholds: Vec<f64>,
    pub features: FeatureSource,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { k: 10, n_mc: DEFAULT_MC_SAMPLES, seed: 0, thresholds: DEFAULT_THRESHOLDS.to_vec(), features: FeatureSource::Precomputed }
    }
}

/// Inputs of the PCA + random-forest baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RfBaseline {
    pub forest: ForestParams,
    pub pca_components: usize,
    /// Binary attributes appended to the PCA scores.
    pub attrs: Vec<String>,
}

impl Default for RfBaseline {
    fn default() -> Self {
        RfBaseline { forest: ForestParams::default(), pca_components: 16, attrs: GraphConfig::default().edge_attrs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutOfFold {
    pub node: usize,
    pub fold: usize,
    pub truth: Label,
    pub predicted: Label,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub method: String,
    pub per_fold: Vec<Metrics>,
    pub mean: Metrics,
    /// Population standard deviation across folds.
    pub std: Metrics,
    /// Pooled test predictions, sorted by node.
    pub out_of_fold: Vec<OutOfFold>,
    /// Pooled MC-dropout predictions (GCN rows only), sorted by node.
    pub mc_predictions: Vec<McPrediction>,
    /// Pooled triage, one report per configured threshold (GCN rows only).
    pub triage: Vec<TriageReport>,
}

impl CvResult {
    pub fn triage_at(&self, threshold: f64) -> Option<&TriageReport> {
        self.triage.iter().find(|r| r.threshold == threshold)
    }
}

/// Mean and population std of each metric; AUC over folds where it is defined.
pub fn summarize(per_fold: &[Metrics]) -> (Metrics, Metrics) {
    fn stats(v: &[f64]) -> (f64, f64) {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
    }
    let acc: Vec<f64> = per_fold.iter().map(|m| m.accuracy).collect();
    let f1: Vec<f64> = per_fold.iter().map(|m| m.f1).collect();
    let auc: Vec<f64> = per_fold.iter().filter_map(|m| m.auc).collect();
    let (am, asd) = stats(&acc);
    let (fm, fsd) = stats(&f1);
    let (um, usd) = if auc.is_empty() { (None, None) } else { let (m, s) = stats(&auc); (Some(m), Some(s)) };
    (Metrics { accuracy: am, f1: fm, auc: um }, Metrics { accuracy: asd, f1: fsd, auc: usd })
}

#[derive(Debug, Clone)]
pub struct PreparedFold {
    pub fold: Fold,
    /// Node features for the whole cohort, fitted on this fold's training rows.
    pub features: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct PreparedFolds {
    pub folds: Vec<PreparedFold>,
    pub config: CvConfig,
}

fn fold_seed(cv: &CvConfig, tag: &str, fold: usize) -> u64 {
    seed::derive(cv.seed, tag, fold as u64)
}

/// Split the cohort and compute each fold's features.
pub fn prepare_folds(cohort: &Cohort, cv: &CvConfig) -> Result<PreparedFolds, EvalError> {
    if cv.n_mc == 0 {
        return Err(EvalError::InvalidConfig("n_mc must be >= 1".into()));
    }
    for &t in &cv.thresholds {
        crate::uncertainty::validate_threshold(t)?;
    }
    let folds = stratified_kfold(cohort, cv.k, cv.seed)?;
    let mut out = Vec::with_capacity(folds.len());
    match &cv.features {
        FeatureSource::Precomputed => {
            let x = feature_matrix(cohort)?;
            for fold in folds {
                out.push(PreparedFold { fold, features: x.clone() });
            }
        }
        FeatureSource::Autoencoder(enc) => {
            let inputs = cohort_inputs(cohort)?;
            for (f, fold) in folds.into_iter().enumerate() {
                let cfg = EncoderConfig { seed: fold_seed(cv, "cv-ae", f), ..enc.clone() };
                let ae = train_autoencoder_rows(inputs.select(Axis(0), &fold.train).view(), &cfg)?;
                let features = ae.model.encode_rows(inputs.view())?;
                out.push(PreparedFold { fold, features });
            }
        }
    }
    Ok(PreparedFolds { folds: out, config: cv.clone() })
}

fn truth_of(cohort: &Cohort, node: usize) -> Label {
    cohort.patients[node].label.expect("fold members are labelled")
}

fn finish(method: &str, cohort: &Cohort, per_fold: Vec<Metrics>, mut oof: Vec<OutOfFold>, mut mc: Vec<McPrediction>, thresholds: &[f64]) -> Result<CvResult, EvalError> {
    let (mean, std) = summarize(&per_fold);
    oof.sort_by_key(|o| o.node);
    mc.sort_by_key(|p| p.node);
    let reports = if mc.is_empty() {
        Vec::new()
    } else {
        let truth: Vec<Label> = mc.iter().map(|p| truth_of(cohort, p.node)).collect();
        thresholds.iter().map(|&t| triage(&mc, &truth, t)).collect::<Result<_, _>>()?
    };
    Ok(CvResult { method: method.to_string(), per_fold, mean, std, out_of_fold: oof, mc_predictions: mc, triage: reports })
}

/// Transductive GCN cross-validation: the graph spans all patients, the loss
/// sees only the fold's training labels, and test nodes are scored with MC
/// dropout.
pub fn run_gcn_cv(cohort: &Cohort, prepared: &PreparedFolds, graph_cfg: &GraphConfig, train_cfg: &TrainConfig, method: &str) -> Result<CvResult, EvalError> {
    let cv = &prepared.config;
    let attrs = edge_attribute_table(cohort, graph_cfg)?;
    let n = cohort.len();
    let labels: Vec<usize> = cohort.patients.iter().map(|p| p.label.map_or(0, Label::index)).collect();
    let mut per_fold = Vec::new();
    let mut oof = Vec::new();
    let mut mc = Vec::new();
    for (f, pf) in prepared.folds.iter().enumerate() {
        let w = adjacency_from_parts(pf.features.view(), &attrs, graph_cfg.correlation_weighting)?;
        let a_hat = normalize_adjacency(w.view())?;
        let mut mask = vec![false; n];
        for &i in &pf.fold.train {
            mask[i] = true;
        }
        let cfg = TrainConfig { seed: fold_seed(cv, "cv-gcn", f), ..train_cfg.clone() };
        let trained = train_on(a_hat.view(), pf.features.view(), &labels, &mask, &cfg)?;
        let preds = mc_predict_on(&trained.model, a_hat.view(), pf.features.view(), &pf.fold.test, cv.n_mc, fold_seed(cv, "cv-mc", f))?;
        let truth: Vec<Label> = pf.fold.test.iter().map(|&i| truth_of(cohort, i)).collect();
        let pred: Vec<Label> = preds.iter().map(|p| p.final_label).collect();
        let scores: Vec<f64> = preds.iter().map(McPrediction::positive_score).collect();
        per_fold.push(Metrics::compute(&pred, &truth, &scores)?);
        for (k, p) in preds.iter().enumerate() {
            oof.push(OutOfFold { node: p.node, fold: f, truth: truth[k], predicted: p.final_label, score: scores[k] });
        }
        mc.extend(preds);
    }
    finish(method, cohort, per_fold, oof, mc, &cv.thresholds)
}

/// Full pipeline with default labelling of the row.
pub fn run_pipeline_cv(cohort: &Cohort, graph_cfg: &GraphConfig, train_cfg: &TrainConfig, cv: &CvConfig) -> Result<CvResult, EvalError> {
    let prepared = prepare_folds(cohort, cv)?;
    run_gcn_cv(cohort, &prepared, graph_cfg, train_cfg, "GCN")
}

/// PCA (fitted on training rows) + binary attributes, classified by a random forest.
pub fn run_rf_cv(cohort: &Cohort, prepared: &PreparedFolds, rf: &RfBaseline) -> Result<CvResult, EvalError> {
    let cv = &prepared.config;
    let attr_cfg = GraphConfig { edge_attrs: rf.attrs.clone(), ..GraphConfig::default() };
    let attrs = edge_attribute_table(cohort, &attr_cfg)?;
    let attr_block = Array2::from_shape_fn((cohort.len(), rf.attrs.len()), |(i, j)| f64::from(attrs[i][j]));
    let mut per_fold = Vec::new();
    let mut oof = Vec::new();
    for (f, pf) in prepared.folds.iter().enumerate() {
        let pca = Pca::fit(pf.features.select(Axis(0), &pf.fold.train).view(), rf.pca_components)?;
        let scores = pca.transform(pf.features.view())?;
        let design = concatenate![Axis(1), scores, attr_block];
        let train_labels: Vec<Label> = pf.fold.train.iter().map(|&i| truth_of(cohort, i)).collect();
        let params = ForestParams { seed: fold_seed(cv, "cv-rf", f), ..rf.forest.clone() };
        let forest = train_random_forest(design.select(Axis(0), &pf.fold.train).view(), &train_labels, &params)?;
        let (pred, frac) = rf_predict(&forest, design.select(Axis(0), &pf.fold.test).view())?;
        let truth: Vec<Label> = pf.fold.test.iter().map(|&i| truth_of(cohort, i)).collect();
        per_fold.push(Metrics::compute(&pred, &truth, &frac)?);
        for (k, &node) in pf.fold.test.iter().enumerate() {
            oof.push(OutOfFold { node, fold: f, truth: truth[k], predicted: pred[k], score: frac[k] });
        }
    }
    finish("PCA+RF", cohort, per_fold, oof, Vec::new(), &cv.thresholds)
}

/// Edge-attribute ablation names and graph configs, full graph first.
pub fn ablation_variants(graph_cfg: &GraphConfig) -> Vec<(String, GraphConfig)> {
    let mut v = vec![("GCN".to_string(), graph_cfg.clone())];
    for a in &graph_cfg.edge_attrs {
        v.push((format!("w/o {a}"), graph_cfg.without(a)));
    }
    if graph_cfg.edge_attrs.len() > 1 {
        v.push(("w/o non-imaging".to_string(), GraphConfig { edge_attrs: Vec::new(), ..graph_cfg.clone() }));
    }
    v
}

/// GCN with every ablation variant, then the RF baseline if requested.
pub fn run_ablations(cohort: &Cohort, graph_cfg: &GraphConfig, train_cfg: &TrainConfig, rf: Option<&RfBaseline>, cv: &CvConfig) -> Result<Vec<CvResult>, EvalError> {
    let prepared = prepare_folds(cohort, cv)?;
    let mut rows = Vec::new();
    for (name, cfg) in ablation_variants(graph_cfg) {
        rows.push(run_gcn_cv(cohort, &prepared, &cfg, train_cfg, &name)?);
    }
    if let Some(rf) = rf {
        rows.push(run_rf_cv(cohort, &prepared, rf)?);
    }
    Ok(rows)
}

fn pm(mean: Option<f64>, std: Option<f64>) -> String {
    match (mean, std) {
        (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
        _ => "-".to_string(),
    }
}

/// `Method | Accuracy (std) | F1 (std) | AUC (std)` text table.
pub fn render_table(rows: &[CvResult]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.method.clone(),
                pm(Some(r.mean.accuracy), Some(r.std.accuracy)),
                pm(Some(r.mean.f1), Some(r.std.f1)),
                pm(r.mean.auc, r.std.auc),
            ]
        })
        .collect();
    let header = ["Method", "Accuracy (std)", "F1 (std)", "AUC (std)"];
    let mut width = header.map(|h| h.chars().count());
    for c in &cells {
        for j in 0..4 {
            width[j] = width[j].max(c[j].chars().count());
        }
    }
    let line = |c: &[String; 4]| {
        let mut s = String::new();
        for j in 0..4 {
            let pad = width[j] - c[j].chars().count();
            if j > 0 {
                s.push_str(" | ");
            }
            s.push_str(&c[j]);
            s.push_str(&" ".repeat(pad));
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&header.map(String::from));
    out.push_str(&width.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-|-"));
    out.push('\n');
    for c in &cells {
        out.push_str(&line(c));
    }
    out
}

/// One line per (method, fold).
pub fn per_fold_csv(rows: &[CvResult]) -> String {
    let mut out = String::from("method,fold,accuracy,f1,auc\n");
    for r in rows {
        for (f, m) in r.per_fold.iter().enumerate() {
            let auc = m.auc.map_or(String::new(), |a| a.to_string());
            writeln!(out, "{},{f},{},{},{auc}", r.method, m.accuracy, m.f1).expect("string write");
        }
    }
    out
}
