//! Two-layer graph convolutional classifier.
//!
//! ```text
//! H = ReLU(Â · drop(X) · W0)
//! P = softmax(Â · drop(H) · W1)
//! ```
//!
//! `drop` is inverted dropout in stochastic mode and the identity in
//! deterministic mode. The loss is cross-entropy averaged over the training
//! mask plus an L2 penalty on `W0`; message passing always uses every node.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecError};
use crate::graph::PatientGraph;
use crate::linalg::glorot_uniform;
use crate::seed;

pub const N_CLASSES: usize = 2;
/// Probabilities are floored here inside the log of the loss.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum GcnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFiniteInput(&'static str),
    #[error("training mask selects no nodes")]
    EmptyMask,
    #[error("trace was produced by different weights")]
    StaleTrace,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub hidden_dim: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.01, weight_decay: 5e-4, epochs: 200, dropout_rate: 0.15, hidden_dim: 16, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GcnError> {
        let bad = |m: String| Err(GcnError::InvalidConfig(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.hidden_dim == 0 {
            return bad("hidden_dim must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    /// d × h
    pub w0: Array2<f64>,
    /// h × c
    pub w1: Array2<f64>,
    pub dropout_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Deterministic,
    /// Dropout active, masks drawn from this seed.
    Stochastic(u64),
}

/// Inverted-dropout scale factors (0 or 1/(1-p)) for both dropout sites.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks {
    pub input: Array2<f64>,
    pub hidden: Array2<f64>,
}

impl DropoutMasks {
    /// Input mask (n × d) then hidden mask (n × h), each drawn row-major.
    pub fn sample(seed: u64, n: usize, d: usize, h: usize, p: f64) -> DropoutMasks {
        let mut rng = seed::rng(seed);
        let keep = 1.0 / (1.0 - p);
        let mut draw = |rows, cols| Array2::from_shape_simple_fn((rows, cols), || if rng.random::<f64>() < p { 0.0 } else { keep });
        let input = draw(n, d);
        let hidden = draw(n, h);
        DropoutMasks { input, hidden }
    }
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub masks: Option<DropoutMasks>,
    pub dropped_input: Array2<f64>,
    pub pre_activation: Array2<f64>,
    pub hidden: Array2<f64>,
    pub dropped_hidden: Array2<f64>,
    pub logits: Array2<f64>,
    pub probabilities: Array2<f64>,
    fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w0: Array2<f64>,
    pub w1: Array2<f64>,
}

impl GcnModel {
    pub fn feature_dim(&self) -> usize {
        self.w0.nrows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w0.ncols()
    }

    pub fn n_classes(&self) -> usize {
        self.w1.ncols()
    }

    /// Hash of the exact weight bits; ties a trace to the weights it used.
    pub fn fingerprint(&self) -> u64 {
        self.w0
            .iter()
            .chain(self.w1.iter())
            .fold(self.dropout_rate.to_bits(), |h, v| seed::derive(h, "w", v.to_bits()))
    }

    fn check_shapes(&self, a_hat: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>) -> Result<(), GcnError> {
        let n = x.nrows();
        if a_hat.dim() != (n, n) {
            return Err(GcnError::ShapeMismatch(format!("Â is {:?}, X has {n} rows", a_hat.dim())));
        }
        if x.ncols() != self.feature_dim() {
            return Err(GcnError::ShapeMismatch(format!("X has {} columns, W0 expects {}", x.ncols(), self.feature_dim())));
        }
        if self.w1.nrows() != self.hidden_dim() {
            return Err(GcnError::ShapeMismatch("W1 rows != W0 columns".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(GcnError::NonFiniteInput("features"));
        }
        if a_hat.iter().any(|v| !v.is_finite()) {
            return Err(GcnError::NonFiniteInput("normalized adjacency"));
        }
        Ok(())
    }

    pub fn forward(&self, a_hat: ArrayView2<'_, f64>, x: ArrayView2<'_, f64>, mode: Mode) -> Result<ForwardTrace, GcnError> {
        self.check_shapes(a_hat, x)?;
        let masks = match mode {
            Mode::Deterministic => None,
            Mode::Stochastic(s) => Some(DropoutMasks::sample(s, x.nrows(), self.feature_dim(), self.hidden_dim(), self.dropout_rate)),
        };
        let dropped_input = match &masks {
            Some(m) => &x * &m.input,
            None => x.to_owned(),
        };
        let pre_activation = a_hat.dot(&dropped_input.dot(&self.w0));
        let hidden = pre_activation.mapv(relu);
        let dropped_hidden = match &masks {
            Some(m) => &hidden * &m.hidden,
            None => hidden.clone(),
        };
        let logits = a_hat.dot(&dropped_hidden.dot(&self.w1));
        let probabilities = softmax_rows(&logits);
        Ok(ForwardTrace {
            masks,
            dropped_input,
            pre_activation,
            hidden,
            dropped_hidden,
            logits,
            probabilities,
            fingerprint: self.fingerprint(),
        })
    }

    /// Exact gradients of [`masked_loss`] through the recorded pass.
    pub fn backward(
        &self,
        a_hat: ArrayView2<'_, f64>,
        trace: &ForwardTrace,
        labels: &[usize],
        mask: &[bool],
        weight_decay: f64,
    ) -> Result<Gradients, GcnError> {
        if trace.fingerprint != self.fingerprint() {
            return Err(GcnError::StaleTrace);
        }
        let d_logits = logit_gradient(&trace.probabilities, labels, mask)?;
        let d_support1 = a_hat.t().dot(&d_logits);
        let w1 = trace.dropped_hidden.t().dot(&d_support1);
        let mut d_hidden = d_support1.dot(&self.w1.t());
        if let Some(m) = &trace.masks {
            d_hidden *= &m.hidden;
        }
        Zip::from(&mut d_hidden).and(&trace.pre_activation).for_each(|g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        let d_support0 = a_hat.t().dot(&d_hidden);
        let mut w0 = trace.dropped_input.t().dot(&d_support0);
        if weight_decay != 0.0 {
            w0.scaled_add(weight_decay, &self.w0);
        }
        Ok(Gradients { w0, w1 })
    }
}

pub(crate) fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    p
}

fn check_mask(n: usize, labels: &[usize], mask: &[bool], classes: usize) -> Result<usize, GcnError> {
    if labels.len() != n || mask.len() != n {
        return Err(GcnError::ShapeMismatch(format!("{n} nodes, {} labels, {} mask entries", labels.len(), mask.len())));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(GcnError::EmptyMask);
    }
    if let Some(i) = (0..n).find(|&i| mask[i] && labels[i] >= classes) {
        return Err(GcnError::ShapeMismatch(format!("label {} of node {i} out of range", labels[i])));
    }
    Ok(count)
}

/// Mean masked cross-entropy plus `weight_decay / 2 · ‖W0‖²`.
pub fn masked_loss(probabilities: &Array2<f64>, labels: &[usize], mask: &[bool], w0: &Array2<f64>, weight_decay: f64) -> Result<f64, GcnError> {
    let count = check_mask(probabilities.nrows(), labels, mask, probabilities.ncols())?;
    let mut ce = 0.0;
    for i in 0..labels.len() {
        if mask[i] {
            ce -= probabilities[[i, labels[i]]].max(LOG_FLOOR).ln();
        }
    }
    let l2: f64 = w0.iter().map(|w| w * w).sum();
    Ok(ce / count as f64 + 0.5 * weight_decay * l2)
}

/// d(loss)/d(logits): (P - Y) / m on masked rows, zero elsewhere. Rows whose
/// true-class probability sits under the log floor have zero gradient.
pub(crate) fn logit_gradient(probabilities: &Array2<f64>, labels: &[usize], mask: &[bool]) -> Result<Array2<f64>, GcnError> {
    let count = check_mask(probabilities.nrows(), labels, mask, probabilities.ncols())?;
    let mut g = Array2::zeros(probabilities.dim());
    let scale = 1.0 / count as f64;
    for i in 0..labels.len() {
        if !mask[i] || probabilities[[i, labels[i]]] < LOG_FLOOR {
            continue;
        }
        for c in 0..probabilities.ncols() {
            let target = if c == labels[i] { 1.0 } else { 0.0 };
            g[[i, c]] = (probabilities[[i, c]] - target) * scale;
        }
    }
    Ok(g)
}

/// Hard labels; ties go to the lower class index (non-responder).
pub fn argmax_rows(p: &Array2<f64>) -> Vec<usize> {
    p.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for c in 1..row.len() {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

pub fn init_model(d: usize, cfg: &TrainConfig) -> GcnModel {
    let mut rng = seed::stage_rng(cfg.seed, "gcn-init", 0);
    let w0 = glorot_uniform(d, cfg.hidden_dim, &mut rng);
    let w1 = glorot_uniform(cfg.hidden_dim, N_CLASSES, &mut rng);
    GcnModel { w0, w1, dropout_rate: cfg.dropout_rate }
}

/// Seed of the dropout masks used in training epoch `epoch`.
pub fn epoch_dropout_seed(cfg: &TrainConfig, epoch: usize) -> u64 {
    seed::derive(cfg.seed, "gcn-dropout", epoch as u64)
}

/// Adam with bias correction over a fixed list of parameter matrices.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: i32,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, shapes: &[(usize, usize)]) -> Adam {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
            second: shapes.iter().map(|&s| Array2::zeros(s)).collect(),
        }
    }

    pub fn update(&mut self, params: &mut [&mut Array2<f64>], grads: &[&Array2<f64>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            Zip::from(&mut **p).and(*g).and(&mut self.first[k]).and(&mut self.second[k]).for_each(|w, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainedGcn {
    pub model: GcnModel,
    /// Training loss of each epoch's stochastic pass, before its update.
    pub loss_history: Vec<f64>,
}

/// Full-batch training on a graph given as (Â, X).
pub fn train_on(
    a_hat: ArrayView2<'_, f64>,
    x: ArrayView2<'_, f64>,
    labels: &[usize],
    train_mask: &[bool],
    cfg: &TrainConfig,
) -> Result<TrainedGcn, GcnError> {
    cfg.validate()?;
    check_mask(x.nrows(), labels, train_mask, N_CLASSES)?;
    let mut model = init_model(x.ncols(), cfg);
    let mut adam = Adam::new(cfg.learning_rate, &[model.w0.dim(), model.w1.dim()]);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let trace = model.forward(a_hat, x, Mode::Stochastic(epoch_dropout_seed(cfg, epoch)))?;
        history.push(masked_loss(&trace.probabilities, labels, train_mask, &model.w0, cfg.weight_decay)?);
        let g = model.backward(a_hat, &trace, labels, train_mask, cfg.weight_decay)?;
        adam.update(&mut [&mut model.w0, &mut model.w1], &[&g.w0, &g.w1]);
    }
    if let Some(e) = history.iter().position(|l| !l.is_finite()) {
        return Err(GcnError::InvalidConfig(format!("training loss became non-finite at epoch {e}")));
    }
    Ok(TrainedGcn { model, loss_history: history })
}

pub fn train(graph: &PatientGraph, labels: &[usize], train_mask: &[bool], cfg: &TrainConfig) -> Result<TrainedGcn, GcnError> {
    train_on(graph.normalized.view(), graph.features.view(), labels, train_mask, cfg)
}

pub fn predict(model: &GcnModel, graph: &PatientGraph, mode: Mode) -> Result<Array2<f64>, GcnError> {
    Ok(model.forward(graph.normalized.view(), graph.features.view(), mode)?.probabilities)
}

pub fn accuracy_on(probabilities: &Array2<f64>, labels: &[usize], mask: &[bool]) -> f64 {
    let pred = argmax_rows(probabilities);
    let (hit, total) = (0..labels.len())
        .filter(|&i| mask[i])
        .fold((0usize, 0usize), |(h, t), i| (h + (pred[i] == labels[i]) as usize, t + 1));
    hit as f64 / total.max(1) as f64
}

// ---------------------------------------------------------------------------
// Checkpoint

#[derive(Serialize, Deserialize)]
struct GcnFile {
    feature_dim: usize,
    hidden_dim: usize,
    n_classes: usize,
    dropout_rate: f64,
    w0: String,
    w1: String,
}

impl GcnModel {
    /// JSON checkpoint with 32-bit float weight payloads.
    pub fn to_json(&self) -> Result<String, GcnError> {
        Ok(serde_json::to_string_pretty(&GcnFile {
            feature_dim: self.feature_dim(),
            hidden_dim: self.hidden_dim(),
            n_classes: self.n_classes(),
            dropout_rate: self.dropout_rate,
            w0: codec::encode_f64_as_f32(self.w0.iter()),
            w1: codec::encode_f64_as_f32(self.w1.iter()),
        })?)
    }

    pub fn from_json(text: &str) -> Result<GcnModel, GcnError> {
        let f: GcnFile = serde_json::from_str(text)?;
        if !(0.0..1.0).contains(&f.dropout_rate) {
            return Err(GcnError::InvalidCheckpoint(format!("dropout_rate {}", f.dropout_rate)));
        }
        let mat = |payload: &str, r: usize, c: usize| -> Result<Array2<f64>, GcnError> {
            let v = codec::decode_f32(payload, Some(r * c))?;
            Ok(Array2::from_shape_vec((r, c), v.into_iter().map(f64::from).collect()).expect("checked length"))
        };
        Ok(GcnModel {
            w0: mat(&f.w0, f.feature_dim, f.hidden_dim)?,
            w1: mat(&f.w1, f.hidden_dim, f.n_classes)?,
            dropout_rate: f.dropout_rate,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GcnError> {
        Ok(fs::write(path, self.to_json()? + "\n")?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<GcnModel, GcnError> {
        GcnModel::from_json(&fs::read_to_string(path)?)
    }
}

/// `epoch,loss` CSV of a training run.
pub fn loss_history_csv(history: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (e, l) in history.iter().enumerate() {
        out.push_str(&format!("{e},{l:?}\n"));
    }
    out
}
