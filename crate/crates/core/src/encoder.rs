//! Dense autoencoder producing per-patient latent node features.
//!
//! Inputs are the flattened liver grid followed by the flattened tumor grid,
//! standardized per dimension with statistics fitted on the training rows.
//! Hidden layers use ReLU; the latent and reconstruction layers are linear.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::codec::{self, CodecError};
use crate::dataset::{Cohort, Volume};
use crate::linalg::glorot_uniform;
use crate::seed;

/// Smallest per-dimension variance used when standardizing inputs.
pub const VARIANCE_FLOOR: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum EncoderError {
    #[error("patient `{0}` has no volume")]
    MissingVolume(String),
    #[error("reconstruction loss became non-finite at epoch {0}")]
    DivergedLoss(usize),
    #[error("invalid encoder config: {0}")]
    InvalidConfig(String),
    #[error("input has {found} values, model expects {expected}")]
    DimMismatch { expected: usize, found: usize },
    #[error("invalid checkpoint: {0}")]
    InvalidCheckpoint(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Relu,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Linear => z.clone(),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// in × out
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    fn forward(&self, a: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
        let z = a.dot(&self.weights) + &self.bias;
        let out = self.activation.apply(&z);
        (z, out)
    }

    pub fn input_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.ncols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub latent_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { latent_dim: 128, hidden_widths: Vec::new(), learning_rate: 0.01, epochs: 100, batch_size: 16, seed: 0 }
    }
}

impl EncoderConfig {
    fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::InvalidConfig(m.to_string()));
        if self.latent_dim == 0 {
            return bad("latent_dim must be >= 1");
        }
        if self.epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.hidden_widths.contains(&0) {
            return bad("hidden widths must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Autoencoder {
    pub encoder: Vec<Dense>,
    pub decoder: Vec<Dense>,
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Per-dimension standardization: x' = (x - mean) / scale.
    pub input_mean: Array1<f64>,
    pub input_scale: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedAutoencoder {
    pub model: Autoencoder,
    /// Full-data reconstruction MSE before training, then after each epoch.
    pub loss_history: Vec<f64>,
}

/// Gradients for every layer, encoder layers first.
#[derive(Debug, Clone)]
pub struct AeGradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

/// Liver voxels (row-major) followed by tumor voxels (row-major).
pub fn flatten_input(v: &Volume) -> Array1<f64> {
    v.liver.iter().chain(v.tumor.iter()).map(|&x| x as f64).collect()
}

impl Autoencoder {
    /// Random Glorot-initialized model with identity standardization.
    pub fn init(input_dim: usize, hidden_widths: &[usize], latent_dim: usize, seed: u64) -> Autoencoder {
        let mut rng = seed::stage_rng(seed, "ae-init", 0);
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden_widths);
        widths.push(latent_dim);
        widths.extend(hidden_widths.iter().rev());
        widths.push(input_dim);
        let n_enc = hidden_widths.len() + 1;
        let last = widths.len() - 2;
        let layers: Vec<Dense> = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense {
                weights: glorot_uniform(w[0], w[1], &mut rng),
                bias: Array1::zeros(w[1]),
                activation: if i + 1 == n_enc || i == last { Activation::Linear } else { Activation::Relu },
            })
            .collect();
        let (encoder, decoder) = layers.split_at(n_enc);
        Autoencoder {
            encoder: encoder.to_vec(),
            decoder: decoder.to_vec(),
            input_dim,
            latent_dim,
            input_mean: Array1::zeros(input_dim),
            input_scale: Array1::ones(input_dim),
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.encoder.iter().chain(self.decoder.iter())
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.encoder.iter_mut().chain(self.decoder.iter_mut())
    }

    pub fn standardize(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.input_mean) / &self.input_scale
    }

    /// Latent codes of already standardized rows.
    pub fn encode_standardized(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.encoder.iter().fold(x.to_owned(), |a, layer| layer.forward(&a).1)
    }

    /// Latent codes of raw input rows.
    pub fn encode_rows(&self, x: ArrayView2<'_, f64>) -> Result<Array2<f64>, EncoderError> {
        if x.ncols() != self.input_dim {
            return Err(EncoderError::DimMismatch { expected: self.input_dim, found: x.ncols() });
        }
        Ok(self.encode_standardized(self.standardize(x).view()))
    }

    pub fn encode_vector(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>, EncoderError> {
        let row = x.insert_axis(Axis(0));
        Ok(self.encode_rows(row)?.row(0).to_owned())
    }

    pub fn reconstruct_standardized(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        self.layers().fold(x.to_owned(), |a, layer| layer.forward(&a).1)
    }

    /// Mean squared reconstruction error over standardized rows and dims.
    pub fn reconstruction_loss(&self, x: ArrayView2<'_, f64>) -> f64 {
        let r = self.reconstruct_standardized(x);
        (&r - &x).mapv(|e| e * e).sum() / x.len() as f64
    }

    /// Loss and exact gradients of [`Self::reconstruction_loss`] on standardized rows.
    pub fn loss_and_gradients(&self, x: ArrayView2<'_, f64>) -> (f64, AeGradients) {
        let mut inputs = Vec::new();
        let mut pre = Vec::new();
        let mut a = x.to_owned();
        for layer in self.layers() {
            let (z, out) = layer.forward(&a);
            inputs.push(a);
            pre.push(z);
            a = out;
        }
        let diff = &a - &x;
        let count = x.len() as f64;
        let loss = diff.mapv(|e| e * e).sum() / count;

        let layers: Vec<&Dense> = self.layers().collect();
        let mut weights = vec![Array2::zeros((0, 0)); layers.len()];
        let mut biases = vec![Array1::zeros(0); layers.len()];
        let mut upstream = diff * (2.0 / count);
        for i in (0..layers.len()).rev() {
            let dz = match layers[i].activation {
                Activation::Linear => upstream,
                Activation::Relu => {
                    let mut g = upstream;
                    g.zip_mut_with(&pre[i], |g, &z| {
                        if z <= 0.0 {
                            *g = 0.0
                        }
                    });
                    g
                }
            };
            weights[i] = inputs[i].t().dot(&dz);
            biases[i] = dz.sum_axis(Axis(0));
            upstream = dz.dot(&layers[i].weights.t());
        }
        (loss, AeGradients { weights, biases })
    }

    fn step(&mut self, grads: &AeGradients, lr: f64) {
        for (layer, (gw, gb)) in self.layers_mut().zip(grads.weights.iter().zip(&grads.biases)) {
            layer.weights.scaled_add(-lr, gw);
            layer.bias.scaled_add(-lr, gb);
        }
    }
}

/// Rows of flattened volumes, in cohort order.
pub fn cohort_inputs(cohort: &Cohort) -> Result<Array2<f64>, EncoderError> {
    let mut rows = Vec::with_capacity(cohort.len());
    for p in &cohort.patients {
        let v = p.volume.as_ref().ok_or_else(|| EncoderError::MissingVolume(p.id.clone()))?;
        rows.push(flatten_input(v));
    }
    let d = rows.first().map_or(0, |r| r.len());
    if let Some(r) = rows.iter().find(|r| r.len() != d) {
        return Err(EncoderError::DimMismatch { expected: d, found: r.len() });
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Ok(Array2::from_shape_vec((cohort.len(), d), flat).expect("consistent row lengths"))
}

pub fn train_autoencoder(cohort: &Cohort, cfg: &EncoderConfig) -> Result<TrainedAutoencoder, EncoderError> {
    train_autoencoder_rows(cohort_inputs(cohort)?.view(), cfg)
}

/// Train on raw input rows. The latent width is clamped to the input width.
pub fn train_autoencoder_rows(x: ArrayView2<'_, f64>, cfg: &EncoderConfig) -> Result<TrainedAutoencoder, EncoderError> {
    cfg.validate()?;
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Err(EncoderError::InvalidConfig("no training rows".into()));
    }
    let latent = cfg.latent_dim.min(d);
    let mut model = Autoencoder::init(d, &cfg.hidden_widths, latent, cfg.seed);
    let mean = x.mean_axis(Axis(0)).expect("n > 0");
    let var = x.var_axis(Axis(0), 0.0);
    model.input_mean = mean;
    model.input_scale = var.mapv(|v| v.max(VARIANCE_FLOOR).sqrt());
    let xs = model.standardize(x);

    let mut history = vec![model.reconstruction_loss(xs.view())];
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seed::stage_rng(cfg.seed, "ae-shuffle", epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = xs.select(Axis(0), batch);
            let (_, grads) = model.loss_and_gradients(xb.view());
            model.step(&grads, cfg.learning_rate);
        }
        let loss = model.reconstruction_loss(xs.view());
        if !loss.is_finite() {
            return Err(EncoderError::DivergedLoss(epoch));
        }
        history.push(loss);
    }
    Ok(TrainedAutoencoder { model, loss_history: history })
}

pub fn encode(model: &Autoencoder, v: &Volume) -> Result<Array1<f64>, EncoderError> {
    model.encode_vector(flatten_input(v).view())
}

/// Copy of `cohort` whose feature vectors are the latent codes of each volume.
pub fn attach_features(cohort: &Cohort, model: &Autoencoder) -> Result<Cohort, EncoderError> {
    let mut out = cohort.clone();
    for p in &mut out.patients {
        let v = p.volume.as_ref().ok_or_else(|| EncoderError::MissingVolume(p.id.clone()))?;
        p.feature_vector = Some(encode(model, v)?.to_vec());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Checkpoint

#[derive(Serialize, Deserialize)]
struct LayerFile {
    shape: [usize; 2],
    activation: Activation,
    weights: String,
    bias: String,
}

#[derive(Serialize, Deserialize)]
struct AutoencoderFile {
    input_dim: usize,
    latent_dim: usize,
    input_mean: String,
    input_scale: String,
    encoder: Vec<LayerFile>,
    decoder: Vec<LayerFile>,
}

fn layer_to_file(l: &Dense) -> LayerFile {
    LayerFile {
        shape: [l.input_dim(), l.output_dim()],
        activation: l.activation,
        weights: codec::encode_f64_as_f32(l.weights.iter()),
        bias: codec::encode_f64_as_f32(l.bias.iter()),
    }
}

fn layer_from_file(l: &LayerFile) -> Result<Dense, EncoderError> {
    let [r, c] = l.shape;
    let w = codec::decode_f32(&l.weights, Some(r * c))?;
    let b = codec::decode_f32(&l.bias, Some(c))?;
    Ok(Dense {
        weights: Array2::from_shape_vec((r, c), w.into_iter().map(f64::from).collect()).expect("checked length"),
        bias: b.into_iter().map(f64::from).collect(),
        activation: l.activation,
    })
}

impl Autoencoder {
    /// JSON checkpoint; weights are stored as 32-bit floats.
    pub fn to_json(&self) -> Result<String, EncoderError> {
        let file = AutoencoderFile {
            input_dim: self.input_dim,
            latent_dim: self.latent_dim,
            input_mean: codec::encode_f64_as_f32(self.input_mean.iter()),
            input_scale: codec::encode_f64_as_f32(self.input_scale.iter()),
            encoder: self.encoder.iter().map(layer_to_file).collect(),
            decoder: self.decoder.iter().map(layer_to_file).collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Autoencoder, EncoderError> {
        let f: AutoencoderFile = serde_json::from_str(text)?;
        let vec = |s: &str| -> Result<Array1<f64>, EncoderError> {
            Ok(codec::decode_f32(s, Some(f.input_dim))?.into_iter().map(f64::from).collect())
        };
        let model = Autoencoder {
            encoder: f.encoder.iter().map(layer_from_file).collect::<Result<_, _>>()?,
            decoder: f.decoder.iter().map(layer_from_file).collect::<Result<_, _>>()?,
            input_dim: f.input_dim,
            latent_dim: f.latent_dim,
            input_mean: vec(&f.input_mean)?,
            input_scale: vec(&f.input_scale)?,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<(), EncoderError> {
        let bad = |m: String| Err(EncoderError::InvalidCheckpoint(m));
        if self.encoder.is_empty() || self.decoder.is_empty() {
            return bad("encoder and decoder need at least one layer".into());
        }
        let mut width = self.input_dim;
        for (i, l) in self.layers().enumerate() {
            if l.input_dim() != width {
                return bad(format!("layer {i} expects width {}, previous layer gives {width}", l.input_dim()));
            }
            width = l.output_dim();
        }
        if width != self.input_dim || self.encoder.last().map(Dense::output_dim) != Some(self.latent_dim) {
            return bad("encoder must end at latent_dim and decoder at input_dim".into());
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), EncoderError> {
        Ok(fs::write(path, self.to_json()? + "\n")?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Autoencoder, EncoderError> {
        Autoencoder::from_json(&fs::read_to_string(path)?)
    }
}
