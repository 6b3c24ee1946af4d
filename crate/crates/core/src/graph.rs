//! Population graph: one node per patient.
//!
//! Each binary attribute whose value two patients share contributes one
//! unit of edge weight; the summed agreement count is scaled by the
//! (non-negative) Pearson correlation of the two patients' feature vectors.
//! The GCN propagates over the renormalized adjacency
//! `D^{-1/2} (W + I) D^{-1/2}` with `D_ii = 1 + Σ_j W_ij`.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::dataset::Cohort;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("vectors have lengths {0} and {1}")]
    LengthMismatch(usize, usize),
    #[error("correlation needs at least 2 entries, got {0}")]
    TooShort(usize),
    #[error("patient `{0}` has no feature vector")]
    MissingFeatureVector(String),
    #[error("unknown edge attribute `{0}`")]
    UnknownAttribute(String),
    #[error("adjacency is not symmetric at ({0}, {1})")]
    AsymmetricInput(usize, usize),
    #[error("adjacency has negative weight at ({0}, {1})")]
    NegativeWeight(usize, usize),
    #[error("adjacency has a non-zero or non-finite entry on the diagonal at {0}")]
    NonZeroDiagonal(usize),
    #[error("adjacency must be square, got {0}x{1}")]
    NotSquare(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeCorrelationPolicy {
    #[default]
    ClampToZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub edge_attrs: Vec<String>,
    pub correlation_weighting: bool,
    pub negative_correlation_policy: NegativeCorrelationPolicy,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            edge_attrs: vec!["Cirrhosis".into(), "Sorafenib".into()],
            correlation_weighting: true,
            negative_correlation_policy: NegativeCorrelationPolicy::ClampToZero,
        }
    }
}

impl GraphConfig {
    pub fn without(&self, attr: &str) -> GraphConfig {
        GraphConfig { edge_attrs: self.edge_attrs.iter().filter(|a| *a != attr).cloned().collect(), ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientGraph {
    /// n × d, row i is patient i.
    pub features: Array2<f64>,
    /// Weighted adjacency W (n × n).
    pub adjacency: Array2<f64>,
    /// Renormalized propagation matrix Â (n × n).
    pub normalized: Array2<f64>,
}

impl PatientGraph {
    pub fn n_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn from_parts(features: Array2<f64>, adjacency: Array2<f64>) -> Result<PatientGraph, GraphError> {
        let normalized = normalize_adjacency(adjacency.view())?;
        Ok(PatientGraph { features, adjacency, normalized })
    }
}

/// Pearson correlation clamped to `[0, 1]`; 0 when either vector is constant.
pub fn pearson_similarity(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64, GraphError> {
    if x.len() != y.len() {
        return Err(GraphError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 2 {
        return Err(GraphError::TooShort(n));
    }
    let mx = x.sum() / n as f64;
    let my = y.sum() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y.iter()) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(0.0, 1.0))
}

/// Feature matrix in cohort order.
pub fn feature_matrix(cohort: &Cohort) -> Result<Array2<f64>, GraphError> {
    let mut rows = Vec::with_capacity(cohort.len());
    for p in &cohort.patients {
        rows.push(p.feature_vector.as_ref().ok_or_else(|| GraphError::MissingFeatureVector(p.id.clone()))?);
    }
    let d = rows.first().map_or(0, |r| r.len());
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(GraphError::LengthMismatch(d, r.len()));
    }
    Ok(Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i][j]))
}

/// Per-patient values of the configured edge attributes, `[node][attr]`.
pub fn edge_attribute_table(cohort: &Cohort, cfg: &GraphConfig) -> Result<Vec<Vec<u8>>, GraphError> {
    if let Some(a) = cfg.edge_attrs.iter().find(|a| !cohort.attr_names.contains(a)) {
        return Err(GraphError::UnknownAttribute(a.clone()));
    }
    Ok(cohort
        .patients
        .iter()
        .map(|p| cfg.edge_attrs.iter().map(|a| p.binary_attrs[a]).collect())
        .collect())
}

/// W_ij = (number of shared attribute values) × similarity(x_i, x_j), W_ii = 0.
pub fn adjacency_from_parts(
    features: ArrayView2<'_, f64>,
    attrs: &[Vec<u8>],
    correlation_weighting: bool,
) -> Result<Array2<f64>, GraphError> {
    let n = features.nrows();
    if attrs.len() != n {
        return Err(GraphError::LengthMismatch(n, attrs.len()));
    }
    let mut w = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let agree = attrs[i].iter().zip(&attrs[j]).filter(|(a, b)| a == b).count();
            if agree == 0 {
                continue;
            }
            let sim = if correlation_weighting { pearson_similarity(features.row(i), features.row(j))? } else { 1.0 };
            let v = agree as f64 * sim;
            w[[i, j]] = v;
            w[[j, i]] = v;
        }
    }
    Ok(w)
}

pub fn build_adjacency(cohort: &Cohort, cfg: &GraphConfig) -> Result<Array2<f64>, GraphError> {
    let attrs = edge_attribute_table(cohort, cfg)?;
    let x = feature_matrix(cohort)?;
    adjacency_from_parts(x.view(), &attrs, cfg.correlation_weighting)
}

pub fn normalize_adjacency(w: ArrayView2<'_, f64>) -> Result<Array2<f64>, GraphError> {
    let (n, m) = w.dim();
    if n != m {
        return Err(GraphError::NotSquare(n, m));
    }
    for i in 0..n {
        if w[[i, i]] != 0.0 {
            return Err(GraphError::NonZeroDiagonal(i));
        }
        for j in 0..i {
            if w[[i, j]] != w[[j, i]] {
                return Err(GraphError::AsymmetricInput(i, j));
            }
            if !(w[[i, j]] >= 0.0) || !w[[i, j]].is_finite() {
                return Err(GraphError::NegativeWeight(i, j));
            }
        }
    }
    let degree: Vec<f64> = (0..n).map(|i| 1.0 + w.row(i).sum()).collect();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        let a = if i == j { 1.0 } else { w[[i, j]] };
        a / (degree[i] * degree[j]).sqrt()
    }))
}

pub fn build_graph(cohort: &Cohort, cfg: &GraphConfig) -> Result<PatientGraph, GraphError> {
    let attrs = edge_attribute_table(cohort, cfg)?;
    let features = feature_matrix(cohort)?;
    let adjacency = adjacency_from_parts(features.view(), &attrs, cfg.correlation_weighting)?;
    PatientGraph::from_parts(features, adjacency)
}

#[derive(Serialize)]
struct GraphDump<'a> {
    n: usize,
    attr_names: &'a [String],
    #[serde(rename = "W")]
    w: Vec<f64>,
    #[serde(rename = "A_hat")]
    a_hat: Vec<f64>,
}

/// Debug dump `{n, attr_names, W, A_hat}` with row-major matrices.
pub fn graph_to_json(graph: &PatientGraph, attr_names: &[String]) -> serde_json::Result<String> {
    serde_json::to_string_pretty(&GraphDump {
        n: graph.n_nodes(),
        attr_names,
        w: graph.adjacency.iter().copied().collect(),
        a_hat: graph.normalized.iter().copied().collect(),
    })
}

pub fn save_graph_dump(graph: &PatientGraph, attr_names: &[String], path: impl AsRef<Path>) -> std::io::Result<()> {
    let text = graph_to_json(graph, attr_names).map_err(std::io::Error::other)?;
    fs::write(path, text + "\n")
}
