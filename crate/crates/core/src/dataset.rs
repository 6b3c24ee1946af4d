//! Cohort data model, file I/O, synthetic cohorts and stratified folds.
//!
//! Node index everywhere downstream is the patient's position in
//! [`Cohort::patients`], which is the order of the cohort file.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::codec::{self, CodecError};
use crate::qeasl::{self, Label, QeaslMeasurement};
use crate::seed;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid CSV: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed record for patient `{id}`, field `{field}`: {reason}")]
    MalformedRecord { id: String, field: String, reason: String },
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("too few samples: {0}")]
    TooFewSamples(String),
    #[error("cannot write {0}")]
    Unsupported(String),
}

fn malformed(id: &str, field: &str, reason: impl Into<String>) -> DatasetError {
    DatasetError::MalformedRecord { id: id.to_string(), field: field.to_string(), reason: reason.into() }
}

/// Liver and tumor intensity grids (D×H×W, row-major) of one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub liver: Array3<f32>,
    pub tumor: Array3<f32>,
    /// cm³ per voxel
    pub voxel_volume: f64,
}

impl Volume {
    pub fn new(liver: Array3<f32>, tumor: Array3<f32>, voxel_volume: f64) -> Result<Self, String> {
        let v = Volume { liver, tumor, voxel_volume };
        v.validate()?;
        Ok(v)
    }

    pub fn shape(&self) -> [usize; 3] {
        let s = self.liver.shape();
        [s[0], s[1], s[2]]
    }

    pub fn n_voxels(&self) -> usize {
        self.liver.len()
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.liver.shape() != self.tumor.shape() {
            return Err(format!("liver shape {:?} != tumor shape {:?}", self.liver.shape(), self.tumor.shape()));
        }
        if !(self.voxel_volume > 0.0 && self.voxel_volume.is_finite()) {
            return Err(format!("voxel_volume must be positive, got {}", self.voxel_volume));
        }
        if self.liver.iter().chain(self.tumor.iter()).any(|v| !v.is_finite()) {
            return Err("non-finite intensity".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub volume: Option<Volume>,
    pub feature_vector: Option<Vec<f64>>,
    /// Attribute name to 0/1 status.
    pub binary_attrs: BTreeMap<String, u8>,
    pub qeasl_baseline: Option<Vec<QeaslMeasurement>>,
    pub qeasl_followup: Option<Vec<QeaslMeasurement>>,
    pub label: Option<Label>,
}

impl PatientRecord {
    pub fn attr(&self, name: &str) -> Option<u8> {
        self.binary_attrs.get(name).copied()
    }

    fn validate(&self, attr_names: &[String]) -> Result<(), DatasetError> {
        let id = &self.id;
        if self.volume.is_none() && self.feature_vector.is_none() {
            return Err(malformed(id, "volume", "patient needs a volume or a feature_vector"));
        }
        if let Some(v) = &self.volume {
            v.validate().map_err(|e| malformed(id, "volume", e))?;
        }
        if let Some(f) = &self.feature_vector {
            if f.is_empty() || f.iter().any(|x| !x.is_finite()) {
                return Err(malformed(id, "feature_vector", "must be non-empty and finite"));
            }
        }
        for name in attr_names {
            match self.binary_attrs.get(name) {
                None => return Err(malformed(id, name, "missing binary attribute")),
                Some(v) if *v > 1 => return Err(malformed(id, name, format!("non-binary value {v}"))),
                _ => {}
            }
        }
        if let Some(extra) = self.binary_attrs.keys().find(|k| !attr_names.contains(k)) {
            return Err(malformed(id, extra, "attribute not listed in attr_names"));
        }
        for (field, series) in [("qeasl_baseline", &self.qeasl_baseline), ("qeasl_followup", &self.qeasl_followup)] {
            if let Some(ms) = series {
                for m in ms {
                    m.validate().map_err(|e| malformed(id, field, e.to_string()))?;
                }
            }
        }
        if let (Some(label), Some(b), Some(f)) = (self.label, &self.qeasl_baseline, &self.qeasl_followup) {
            let derived = qeasl::label_from_measurements(b, f, 0.0)
                .map_err(|e| malformed(id, "label", e.to_string()))?;
            if derived != label {
                return Err(malformed(
                    id,
                    "label",
                    format!("label {} disagrees with qEASL-derived {}", label.code(), derived.code()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Cohort {
    pub patients: Vec<PatientRecord>,
    pub attr_names: Vec<String>,
}

impl Cohort {
    pub fn new(patients: Vec<PatientRecord>, attr_names: Vec<String>) -> Result<Self, DatasetError> {
        let c = Cohort { patients, attr_names };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let mut seen = HashSet::new();
        let mut feature_len = None;
        for p in &self.patients {
            if !seen.insert(p.id.as_str()) {
                return Err(malformed(&p.id, "id", "duplicate patient id"));
            }
            p.validate(&self.attr_names)?;
            if let Some(f) = &p.feature_vector {
                match feature_len {
                    None => feature_len = Some(f.len()),
                    Some(d) if d != f.len() => {
                        return Err(malformed(&p.id, "feature_vector", format!("length {} != {d}", f.len())))
                    }
                    _ => {}
                }
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<Option<Label>> {
        self.patients.iter().map(|p| p.label).collect()
    }

    pub fn labelled_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.patients[i].label.is_some()).collect()
    }
}

// ---------------------------------------------------------------------------
// File format

#[derive(Serialize, Deserialize)]
struct VolumeFile {
    shape: [usize; 3],
    voxel_volume: f64,
    liver: String,
    tumor: String,
}

#[derive(Serialize)]
struct PatientOut<'a> {
    id: &'a str,
    binary_attrs: &'a BTreeMap<String, u8>,
    #[serde(skip_serializing_if = "Option::is_none")]
    feature_vector: Option<&'a Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    volume: Option<VolumeFile>,
    #[serde(skip_serializing_if = "Option::is_none")]
    qeasl_baseline: Option<&'a Vec<QeaslMeasurement>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    qeasl_followup: Option<&'a Vec<QeaslMeasurement>>,
    label: Option<Label>,
}

#[derive(Serialize)]
struct CohortOut<'a> {
    attr_names: &'a [String],
    patients: Vec<PatientOut<'a>>,
}

#[derive(Deserialize)]
struct CohortIn {
    attr_names: Vec<String>,
    patients: Vec<Value>,
}

fn decode_volume(id: &str, v: VolumeFile) -> Result<Volume, DatasetError> {
    let n = v.shape.iter().product::<usize>();
    let grid = |field: &str, payload: &str| -> Result<Array3<f32>, DatasetError> {
        let data = codec::decode_f32(payload, Some(n)).map_err(|e: CodecError| malformed(id, field, e.to_string()))?;
        Array3::from_shape_vec((v.shape[0], v.shape[1], v.shape[2]), data)
            .map_err(|e| malformed(id, field, e.to_string()))
    };
    let liver = grid("volume.liver", &v.liver)?;
    let tumor = grid("volume.tumor", &v.tumor)?;
    Volume::new(liver, tumor, v.voxel_volume).map_err(|e| malformed(id, "volume", e))
}

fn field<T: serde::de::DeserializeOwned>(obj: &serde_json::Map<String, Value>, id: &str, name: &str) -> Result<Option<T>, DatasetError> {
    match obj.get(name) {
        None | Some(Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone()).map(Some).map_err(|e| malformed(id, name, e.to_string())),
    }
}

fn decode_patient(value: Value, position: usize) -> Result<PatientRecord, DatasetError> {
    let obj = match value {
        Value::Object(m) => m,
        _ => return Err(malformed(&format!("#{position}"), "patient", "expected a JSON object")),
    };
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        _ => return Err(malformed(&format!("#{position}"), "id", "missing or non-string id")),
    };
    let attrs_obj = match obj.get("binary_attrs") {
        Some(Value::Object(m)) => m,
        _ => return Err(malformed(&id, "binary_attrs", "missing or not an object")),
    };
    let mut binary_attrs = BTreeMap::new();
    for (name, v) in attrs_obj {
        let bit = match v.as_u64() {
            Some(b @ (0 | 1)) => b as u8,
            _ => return Err(malformed(&id, name, format!("non-binary value {v}"))),
        };
        binary_attrs.insert(name.clone(), bit);
    }
    let volume = field::<VolumeFile>(&obj, &id, "volume")?.map(|v| decode_volume(&id, v)).transpose()?;
    Ok(PatientRecord {
        feature_vector: field(&obj, &id, "feature_vector")?,
        qeasl_baseline: field(&obj, &id, "qeasl_baseline")?,
        qeasl_followup: field(&obj, &id, "qeasl_followup")?,
        label: field(&obj, &id, "label")?,
        volume,
        binary_attrs,
        id,
    })
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

pub fn load_cohort(path: impl AsRef<Path>) -> Result<Cohort, DatasetError> {
    let path = path.as_ref();
    if is_csv(path) {
        return load_cohort_csv(path);
    }
    let raw: CohortIn = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let patients = raw
        .patients
        .into_iter()
        .enumerate()
        .map(|(i, v)| decode_patient(v, i))
        .collect::<Result<Vec<_>, _>>()?;
    Cohort::new(patients, raw.attr_names)
}

/// Serialize a cohort to its JSON file representation.
pub fn cohort_to_json(cohort: &Cohort) -> Result<String, DatasetError> {
    let out = CohortOut {
        attr_names: &cohort.attr_names,
        patients: cohort
            .patients
            .iter()
            .map(|p| PatientOut {
                id: &p.id,
                binary_attrs: &p.binary_attrs,
                feature_vector: p.feature_vector.as_ref(),
                volume: p.volume.as_ref().map(|v| VolumeFile {
                    shape: v.shape(),
                    voxel_volume: v.voxel_volume,
                    liver: codec::encode_f32(v.liver.iter().copied()),
                    tumor: codec::encode_f32(v.tumor.iter().copied()),
                }),
                qeasl_baseline: p.qeasl_baseline.as_ref(),
                qeasl_followup: p.qeasl_followup.as_ref(),
                label: p.label,
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&out)?)
}

pub fn save_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<(), DatasetError> {
    let path = path.as_ref();
    cohort.validate()?;
    if is_csv(path) {
        return save_cohort_csv(cohort, path);
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(cohort_to_json(cohort)?.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

// CSV layout: id, one column per attribute, feat_0..feat_{d-1}, label.

const FEATURE_PREFIX: &str = "feat_";

fn load_cohort_csv(path: &Path) -> Result<Cohort, DatasetError> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let cols: Vec<&str> = headers.iter().collect();
    if cols.first() != Some(&"id") || cols.last() != Some(&"label") {
        return Err(malformed("<header>", "header", "CSV must start with `id` and end with `label`"));
    }
    let inner = &cols[1..cols.len() - 1];
    let first_feat = inner.iter().position(|c| c.starts_with(FEATURE_PREFIX)).unwrap_or(inner.len());
    let attr_names: Vec<String> = inner[..first_feat].iter().map(|s| s.to_string()).collect();
    let n_feat = inner.len() - first_feat;

    let mut patients = Vec::new();
    for row in reader.records() {
        let row = row?;
        let id = row.get(0).unwrap_or_default().to_string();
        let mut binary_attrs = BTreeMap::new();
        for (j, name) in attr_names.iter().enumerate() {
            let raw = row.get(1 + j).unwrap_or_default().trim();
            let bit = match raw {
                "0" => 0,
                "1" => 1,
                _ => return Err(malformed(&id, name, format!("non-binary value `{raw}`"))),
            };
            binary_attrs.insert(name.clone(), bit);
        }
        let mut features = Vec::with_capacity(n_feat);
        for j in 0..n_feat {
            let col = 1 + first_feat + j;
            let raw = row.get(col).unwrap_or_default().trim();
            let v: f64 = raw.parse().map_err(|_| malformed(&id, cols[col], format!("not a number: `{raw}`")))?;
            features.push(v);
        }
        let label = match row.get(cols.len() - 1).unwrap_or_default().trim() {
            "" => None,
            "R" => Some(Label::Responder),
            "NR" => Some(Label::NonResponder),
            other => return Err(malformed(&id, "label", format!("expected R, NR or empty, got `{other}`"))),
        };
        patients.push(PatientRecord {
            id,
            volume: None,
            feature_vector: (n_feat > 0).then_some(features),
            binary_attrs,
            qeasl_baseline: None,
            qeasl_followup: None,
            label,
        });
    }
    Cohort::new(patients, attr_names)
}

fn save_cohort_csv(cohort: &Cohort, path: &Path) -> Result<(), DatasetError> {
    if cohort.patients.iter().any(|p| p.volume.is_some() || p.qeasl_baseline.is_some() || p.qeasl_followup.is_some()) {
        return Err(DatasetError::Unsupported("volumes or qEASL series to CSV; use JSON".into()));
    }
    let d = cohort.patients.iter().find_map(|p| p.feature_vector.as_ref().map(Vec::len)).unwrap_or(0);
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["id".to_string()];
    header.extend(cohort.attr_names.iter().cloned());
    header.extend((0..d).map(|j| format!("{FEATURE_PREFIX}{j}")));
    header.push("label".into());
    w.write_record(&header)?;
    for p in &cohort.patients {
        let mut row = vec![p.id.clone()];
        row.extend(cohort.attr_names.iter().map(|a| p.binary_attrs[a].to_string()));
        let f = p.feature_vector.as_ref().ok_or_else(|| malformed(&p.id, "feature_vector", "CSV rows need features"))?;
        row.extend(f.iter().map(|v| format!("{v:?}")));
        row.push(p.label.map(|l| l.code().to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Synthetic cohorts

/// Voxel volume used for synthetic qEASL measurements. A power of two keeps
/// cm³ arithmetic exact, so generated reductions land exactly where intended.
const SYNTH_QEASL_VOXEL: f64 = 0.125;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub volume_shape: [usize; 3],
    pub latent_dim_true: usize,
    /// Fraction of responders.
    pub class_balance: f64,
    /// Probability that each attribute equals the class indicator.
    pub attr_informativeness: IndexMap<String, f64>,
    /// Voxel noise, relative to the latent signal amplitude.
    pub noise_sigma: f64,
    /// Distance between the two class means in latent units.
    pub class_separation: f64,
    /// Draw qEASL reductions from the 60–70% band around the threshold.
    pub boundary: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 120,
            volume_shape: [4, 4, 4],
            latent_dim_true: 4,
            class_balance: 0.5,
            attr_informativeness: IndexMap::from([("Cirrhosis".to_string(), 0.8), ("Sorafenib".to_string(), 0.8)]),
            noise_sigma: 0.5,
            class_separation: 1.0,
            boundary: false,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |m: String| Err(DatasetError::InvalidConfig(m));
        if self.n_patients < 4 {
            return bad(format!("n_patients must be >= 4, got {}", self.n_patients));
        }
        if self.volume_shape.contains(&0) {
            return bad(format!("volume_shape must be positive, got {:?}", self.volume_shape));
        }
        if self.latent_dim_true == 0 {
            return bad("latent_dim_true must be >= 1".into());
        }
        if !(self.class_balance > 0.0 && self.class_balance < 1.0) {
            return bad(format!("class_balance must lie in (0,1), got {}", self.class_balance));
        }
        for (name, p) in &self.attr_informativeness {
            if !(0.0..=1.0).contains(p) {
                return bad(format!("informativeness of `{name}` must lie in [0,1], got {p}"));
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.class_separation >= 0.0 && self.class_separation.is_finite()) {
            return bad(format!("class_separation must be >= 0, got {}", self.class_separation));
        }
        Ok(())
    }
}

fn normal(rng: &mut seed::StageRng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Baseline and follow-up measurement triplets whose averaged enhancing
/// volume changes by the requested number of enhancing voxels.
fn synth_qeasl(rng: &mut seed::StageRng, baseline_count: usize, followup_count: usize) -> (Vec<QeaslMeasurement>, Vec<QeaslMeasurement>) {
    let extra = rng.random_range(20..=200usize);
    let mut series = |enhancing: usize| -> Vec<QeaslMeasurement> {
        let total = baseline_count + extra;
        let mut intensities: Vec<f64> = (0..total)
            .map(|i| if i < enhancing { rng.random_range(130.0..220.0) } else { rng.random_range(20.0..80.0) })
            .collect();
        intensities.shuffle(rng);
        (0..3)
            .map(|_| QeaslMeasurement {
                tumor_intensities: intensities.clone(),
                roi_means: [rng.random_range(92.0..108.0), rng.random_range(92.0..108.0), rng.random_range(92.0..108.0)],
                voxel_volume: SYNTH_QEASL_VOXEL,
            })
            .collect()
    };
    let b = series(baseline_count);
    let f = series(followup_count);
    (b, f)
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Cohort, DatasetError> {
    cfg.validate()?;
    let n = cfg.n_patients;
    let latent = cfg.latent_dim_true;
    let [d, h, w] = cfg.volume_shape;
    let n_vox = d * h * w;

    let mut rng = seed::stage_rng(cfg.seed, "synth", 0);

    let n_resp = ((n as f64 * cfg.class_balance).round() as usize).clamp(1, n - 1);
    let mut labels: Vec<Label> = (0..n).map(|i| if i < n_resp { Label::Responder } else { Label::NonResponder }).collect();
    labels.shuffle(&mut rng);

    // Class means sit at ±separation/2 along a random unit direction.
    let mut direction: Vec<f64> = (0..latent).map(|_| normal(&mut rng)).collect();
    let norm = direction.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    direction.iter_mut().for_each(|x| *x /= norm);

    // Latent-to-voxel map and per-voxel intensity templates.
    const AMPLITUDE: f64 = 10.0;
    let scale = AMPLITUDE / (latent as f64).sqrt();
    let mixing: Vec<f64> = (0..2 * n_vox * latent).map(|_| scale * normal(&mut rng)).collect();
    let template: Vec<f64> = (0..2 * n_vox)
        .map(|i| if i < n_vox { 100.0 } else { 150.0 } + 5.0 * normal(&mut rng))
        .collect();

    let mut patients = Vec::with_capacity(n);
    for (i, &label) in labels.iter().enumerate() {
        let sign = if label == Label::Responder { 0.5 } else { -0.5 };
        let z: Vec<f64> = direction.iter().map(|u| sign * cfg.class_separation * u + normal(&mut rng)).collect();
        let voxels: Vec<f32> = (0..2 * n_vox)
            .map(|v| {
                let signal: f64 = mixing[v * latent..(v + 1) * latent].iter().zip(&z).map(|(m, z)| m * z).sum();
                (template[v] + signal + AMPLITUDE * cfg.noise_sigma * normal(&mut rng)) as f32
            })
            .collect();
        let liver = Array3::from_shape_vec((d, h, w), voxels[..n_vox].to_vec()).expect("shape");
        let tumor = Array3::from_shape_vec((d, h, w), voxels[n_vox..].to_vec()).expect("shape");

        let class_bit = label.index() as u8;
        let binary_attrs: BTreeMap<String, u8> = cfg
            .attr_informativeness
            .iter()
            .map(|(name, &p)| {
                let agree = rng.random::<f64>() < p;
                (name.clone(), if agree { class_bit } else { 1 - class_bit })
            })
            .collect();

        let (baseline_count, followup_count) = if cfg.boundary {
            let pct = match label {
                Label::Responder => rng.random_range(66..=70usize),
                Label::NonResponder => rng.random_range(60..=65usize),
            };
            (100, 100 - pct)
        } else {
            let b = rng.random_range(60..=300usize);
            let reduction = match label {
                Label::Responder => rng.random_range(0.70..=0.99),
                Label::NonResponder => rng.random_range(0.0..=0.60),
            };
            (b, (b as f64 * (1.0 - reduction)).round() as usize)
        };
        let (qeasl_baseline, qeasl_followup) = synth_qeasl(&mut rng, baseline_count, followup_count);
        debug_assert_eq!(qeasl::label_from_measurements(&qeasl_baseline, &qeasl_followup, 0.0), Ok(label));

        patients.push(PatientRecord {
            id: format!("P{:04}", i + 1),
            volume: Some(Volume { liver, tumor, voxel_volume: 0.125 }),
            feature_vector: None,
            binary_attrs,
            qeasl_baseline: Some(qeasl_baseline),
            qeasl_followup: Some(qeasl_followup),
            label: Some(label),
        });
    }
    Cohort::new(patients, cfg.attr_informativeness.keys().cloned().collect())
}

// ---------------------------------------------------------------------------
// Cross-validation folds

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified k-fold split of the labelled patients.
///
/// Each class is shuffled and dealt round-robin into the folds, so per-class
/// counts differ by at most one between folds. Unlabelled patients appear in
/// neither set.
pub fn stratified_kfold(cohort: &Cohort, k: usize, seed: u64) -> Result<Vec<Fold>, DatasetError> {
    let labels = cohort.labels();
    stratified_kfold_labels(&labels, k, seed)
}

pub fn stratified_kfold_labels(labels: &[Option<Label>], k: usize, seed: u64) -> Result<Vec<Fold>, DatasetError> {
    if k < 2 {
        return Err(DatasetError::TooFewSamples(format!("k must be >= 2, got {k}")));
    }
    let mut rng = seed::stage_rng(seed, "kfold", 0);
    let mut assignment: Vec<Option<usize>> = vec![None; labels.len()];
    let mut next = 0usize;
    for class in [Label::NonResponder, Label::Responder] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == Some(class)).collect();
        if members.len() < k {
            return Err(DatasetError::TooFewSamples(format!(
                "class {} has {} labelled members, k = {k}",
                class.code(),
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for i in members {
            assignment[i] = Some(next % k);
            next += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let (test, train) = (0..labels.len())
                .filter(|&i| assignment[i].is_some())
                .partition(|&i| assignment[i] == Some(f));
            Fold { train, test }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn patient(id: &str, attrs: &[(&str, u8)], feat: Vec<f64>, label: Option<Label>) -> PatientRecord {
        PatientRecord {
            id: id.into(),
            volume: None,
            feature_vector: Some(feat),
            binary_attrs: attrs.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            qeasl_baseline: None,
            qeasl_followup: None,
            label,
        }
    }

    fn names() -> Vec<String> {
        vec!["Cirrhosis".into(), "Sorafenib".into()]
    }

    #[test]
    fn three_patient_file_keeps_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let c = Cohort::new(
            vec![
                patient("b", &[("Cirrhosis", 1), ("Sorafenib", 0)], vec![1.0, 2.0], Some(Label::Responder)),
                patient("a", &[("Cirrhosis", 0), ("Sorafenib", 0)], vec![0.5, -1.0], None),
                patient("c", &[("Cirrhosis", 1), ("Sorafenib", 1)], vec![0.1, 0.2], Some(Label::NonResponder)),
            ],
            names(),
        )
        .unwrap();
        save_cohort(&c, &path).unwrap();
        let back = load_cohort(&path).unwrap();
        assert_eq!(back.patients.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), ["b", "a", "c"]);
        assert_eq!(back, c);
    }

    #[test]
    fn missing_attribute_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"attr_names":["Cirrhosis","Sorafenib"],"patients":[
                {"id":"p1","binary_attrs":{"Cirrhosis":1,"Sorafenib":0},"feature_vector":[1,2],"label":"R"},
                {"id":"p2","binary_attrs":{"Cirrhosis":1},"feature_vector":[1,2],"label":null}]}"#,
        )
        .unwrap();
        match load_cohort(&path) {
            Err(DatasetError::MalformedRecord { id, field, .. }) => {
                assert_eq!(id, "p2");
                assert_eq!(field, "Sorafenib");
            }
            other => panic!("expected MalformedRecord, got {other:?}"),
        }
    }

    #[test]
    fn non_binary_attribute_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(
            &path,
            r#"{"attr_names":["Cirrhosis"],"patients":[{"id":"p1","binary_attrs":{"Cirrhosis":2},"feature_vector":[1]}]}"#,
        )
        .unwrap();
        assert!(matches!(load_cohort(&path), Err(DatasetError::MalformedRecord { field, .. }) if field == "Cirrhosis"));
    }

    #[test]
    fn volume_shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let one = codec::encode_f32([1.0f32]);
        let two = codec::encode_f32([1.0f32, 2.0]);
        std::fs::write(
            &path,
            format!(
                r#"{{"attr_names":[],"patients":[{{"id":"p1","binary_attrs":{{}},
                "volume":{{"shape":[1,1,1],"voxel_volume":1.0,"liver":"{one}","tumor":"{two}"}}}}]}}"#
            ),
        )
        .unwrap();
        assert!(matches!(load_cohort(&path), Err(DatasetError::MalformedRecord { field, .. }) if field == "volume.tumor"));
    }

    #[test]
    fn record_without_features_or_volume_is_rejected() {
        let mut p = patient("x", &[], vec![1.0], None);
        p.feature_vector = None;
        assert!(Cohort::new(vec![p], vec![]).is_err());
    }

    #[test]
    fn inconsistent_label_is_rejected() {
        let cfg = SynthConfig { n_patients: 4, ..SynthConfig::default() };
        let mut c = generate_synthetic(&cfg).unwrap();
        let l = c.patients[0].label.unwrap();
        c.patients[0].label = Some(Label::from_index(1 - l.index()));
        assert!(matches!(c.validate(), Err(DatasetError::MalformedRecord { field, .. }) if field == "label"));
    }

    #[test]
    fn empty_attribute_cohort_saves() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let c = Cohort::new(vec![patient("a", &[], vec![1.0], None)], vec![]).unwrap();
        save_cohort(&c, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"attr_names\": []"));
        assert_eq!(load_cohort(&path).unwrap(), c);
    }

    #[test]
    fn volume_payload_is_base64_le_f32() {
        let liver = Array3::from_shape_vec((2, 1, 1), vec![1.0f32, 2.0]).unwrap();
        let tumor = Array3::from_shape_vec((2, 1, 1), vec![3.0f32, 4.0]).unwrap();
        let mut p = patient("v", &[], vec![], None);
        p.feature_vector = None;
        p.volume = Some(Volume::new(liver, tumor, 0.5).unwrap());
        let c = Cohort::new(vec![p], vec![]).unwrap();
        let json: Value = serde_json::from_str(&cohort_to_json(&c).unwrap()).unwrap();
        let vol = &json["patients"][0]["volume"];
        assert_eq!(vol["shape"], serde_json::json!([2, 1, 1]));
        assert_eq!(vol["liver"], codec::encode_f32([1.0f32, 2.0]));
        assert_eq!(vol["tumor"], codec::encode_f32([3.0f32, 4.0]));
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.csv");
        let c = Cohort::new(
            vec![
                patient("a", &[("Cirrhosis", 1), ("Sorafenib", 0)], vec![0.1, -2.5e-7], Some(Label::Responder)),
                patient("b", &[("Cirrhosis", 0), ("Sorafenib", 1)], vec![1.0 / 3.0, 7.0], None),
            ],
            names(),
        )
        .unwrap();
        save_cohort(&c, &path).unwrap();
        assert_eq!(load_cohort(&path).unwrap(), c);
    }

    #[test]
    fn synthetic_is_seed_deterministic() {
        let cfg = SynthConfig { n_patients: 20, seed: 7, ..SynthConfig::default() };
        assert_eq!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&cfg).unwrap());
        let other = SynthConfig { seed: 8, ..cfg.clone() };
        assert_ne!(generate_synthetic(&cfg).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn fully_informative_attribute_equals_label() {
        let cfg = SynthConfig {
            n_patients: 50,
            noise_sigma: 0.0,
            attr_informativeness: IndexMap::from([("A".to_string(), 1.0)]),
            ..SynthConfig::default()
        };
        let c = generate_synthetic(&cfg).unwrap();
        for p in &c.patients {
            assert_eq!(p.attr("A").unwrap() as usize, p.label.unwrap().index());
        }
    }

    #[test]
    fn uninformative_attribute_binomial() {
        let cfg = SynthConfig {
            n_patients: 1000,
            volume_shape: [1, 1, 1],
            attr_informativeness: IndexMap::from([("A".to_string(), 0.5)]),
            seed: 3,
            ..SynthConfig::default()
        };
        let c = generate_synthetic(&cfg).unwrap();
        let agree = c.patients.iter().filter(|p| p.attr("A").unwrap() as usize == p.label.unwrap().index()).count();
        let rate = agree as f64 / 1000.0;
        assert!((0.45..=0.55).contains(&rate), "agreement {rate}");
    }

    #[test]
    fn synthetic_labels_match_qeasl() {
        for boundary in [false, true] {
            let cfg = SynthConfig { n_patients: 60, boundary, seed: 5, ..SynthConfig::default() };
            let c = generate_synthetic(&cfg).unwrap();
            let mut exact = 0;
            for p in &c.patients {
                let b = p.qeasl_baseline.as_ref().unwrap();
                let f = p.qeasl_followup.as_ref().unwrap();
                assert_eq!(qeasl::label_from_measurements(b, f, 0.0).unwrap(), p.label.unwrap());
                let est = |ms: &[QeaslMeasurement]| {
                    qeasl::average_qeasl(&ms.iter().map(|m| qeasl::measure_qeasl(m, 0.0).unwrap()).collect::<Vec<_>>()).unwrap()
                };
                let red = (est(b) - est(f)) / est(b);
                if boundary {
                    assert!((0.60..=0.70).contains(&red), "{red}");
                    exact += (red == 0.65) as usize;
                } else {
                    assert!(!(0.60 + 0.01..0.69).contains(&red), "{red}");
                }
            }
            if boundary {
                assert!(exact > 0, "boundary mode should hit exactly 65%");
            }
        }
    }

    #[test]
    fn synth_rejects_bad_config() {
        for cfg in [
            SynthConfig { n_patients: 3, ..SynthConfig::default() },
            SynthConfig { class_balance: 1.0, ..SynthConfig::default() },
            SynthConfig { attr_informativeness: IndexMap::from([("A".to_string(), 1.5)]), ..SynthConfig::default() },
            SynthConfig { noise_sigma: -1.0, ..SynthConfig::default() },
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(DatasetError::InvalidConfig(_))));
        }
    }

    fn labels(n0: usize, n1: usize) -> Vec<Option<Label>> {
        let mut v = vec![Some(Label::NonResponder); n0];
        v.extend(vec![Some(Label::Responder); n1]);
        v
    }

    #[test]
    fn balanced_five_fold() {
        let folds = stratified_kfold_labels(&labels(5, 5), 5, 1).unwrap();
        for f in &folds {
            assert_eq!(f.test.len(), 2);
            assert_eq!(f.test.iter().filter(|&&i| i < 5).count(), 1);
            assert_eq!(f.train.len(), 8);
        }
    }

    #[test]
    fn eighty_three_patients_ten_folds() {
        let folds = stratified_kfold_labels(&labels(40, 43), 10, 9).unwrap();
        assert!(folds.iter().all(|f| f.test.len() == 8 || f.test.len() == 9));
    }

    #[test]
    fn too_few_per_class() {
        assert!(matches!(stratified_kfold_labels(&labels(3, 10), 4, 0), Err(DatasetError::TooFewSamples(_))));
        assert!(matches!(stratified_kfold_labels(&labels(3, 10), 1, 0), Err(DatasetError::TooFewSamples(_))));
    }

    fn arb_label() -> impl Strategy<Value = Option<Label>> {
        prop_oneof![Just(None), Just(Some(Label::Responder)), Just(Some(Label::NonResponder))]
    }

    proptest! {
        #[test]
        fn folds_partition_labelled(ls in proptest::collection::vec(arb_label(), 10..120), k in 2usize..6, s in any::<u64>()) {
            let n0 = ls.iter().filter(|l| **l == Some(Label::NonResponder)).count();
            let n1 = ls.iter().filter(|l| **l == Some(Label::Responder)).count();
            prop_assume!(n0 >= k && n1 >= k);
            let folds = stratified_kfold_labels(&ls, k, s).unwrap();
            prop_assert_eq!(&folds, &stratified_kfold_labels(&ls, k, s).unwrap());
            let mut all: Vec<usize> = folds.iter().flat_map(|f| f.test.iter().copied()).collect();
            all.sort();
            let labelled: Vec<usize> = (0..ls.len()).filter(|&i| ls[i].is_some()).collect();
            prop_assert_eq!(&all, &labelled);
            let n = (n0 + n1) as f64;
            for f in &folds {
                prop_assert_eq!(f.train.len() + f.test.len(), labelled.len());
                prop_assert!(f.train.iter().all(|i| !f.test.contains(i)));
                let c1 = f.test.iter().filter(|&&i| ls[i] == Some(Label::Responder)).count() as f64;
                prop_assert!((c1 - n1 as f64 * f.test.len() as f64 / n).abs() <= 1.0);
            }
        }
    }

    fn arb_patient(i: usize, d: usize) -> impl Strategy<Value = PatientRecord> {
        (
            proptest::collection::vec(-1e6f64..1e6, d),
            any::<bool>(),
            any::<bool>(),
            prop_oneof![Just(None), Just(Some(Label::Responder)), Just(Some(Label::NonResponder))],
            proptest::option::of(proptest::collection::vec(-1e3f32..1e3, 8)),
        )
            .prop_map(move |(f, a, b, label, vox)| PatientRecord {
                id: format!("id{i}"),
                volume: vox.map(|v| Volume {
                    liver: Array3::from_shape_vec((2, 2, 1), v[..4].to_vec()).unwrap(),
                    tumor: Array3::from_shape_vec((2, 2, 1), v[4..].to_vec()).unwrap(),
                    voxel_volume: 0.3,
                }),
                feature_vector: Some(f),
                binary_attrs: [("Cirrhosis".to_string(), a as u8), ("Sorafenib".to_string(), b as u8)].into(),
                qeasl_baseline: None,
                qeasl_followup: None,
                label,
            })
    }

    fn arb_cohort() -> impl Strategy<Value = Cohort> {
        (1usize..8, 1usize..6).prop_flat_map(|(n, d)| {
            (0..n).map(|i| arb_patient(i, d)).collect::<Vec<_>>().prop_map(|ps| Cohort { patients: ps, attr_names: names() })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn save_load_round_trip(c in arb_cohort()) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("c.json");
            save_cohort(&c, &path).unwrap();
            prop_assert_eq!(load_cohort(&path).unwrap(), c);
        }
    }
}
