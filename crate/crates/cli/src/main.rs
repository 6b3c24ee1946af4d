//! `hccgraph` — synthetic cohorts, labelling, feature extraction, graph
//! construction, GCN training, MC-dropout prediction and evaluation.
//!
//! Primary outputs go to `--out` (or stdout when absent). Errors are a single
//! JSON object on stderr and a nonzero exit code.

mod config;

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hccgraph::dataset::{generate_synthetic, load_cohort, save_cohort, Cohort, DatasetError};
use hccgraph::encoder::{attach_features, train_autoencoder, EncoderError};
use hccgraph::evaluation::{per_fold_csv, prepare_folds, render_table, run_ablations, run_gcn_cv, CvResult, EvalError};
use hccgraph::gcn::{loss_history_csv, train, GcnError, GcnModel};
use hccgraph::graph::{build_graph, graph_to_json, GraphError};
use hccgraph::qeasl::{label_from_measurements, Label, QeaslError};
use hccgraph::uncertainty::{mc_predict, render_triage_table, triage, McPrediction, TriageReport, UncertaintyError};
use serde::{Deserialize, Serialize};

use config::{CvFeatures, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("missing required path: {0}")]
    MissingPath(&'static str),
    #[error("patients without qEASL measurements: {}", .0.join(", "))]
    MissingMeasurements(Vec<String>),
    #[error("patient `{id}`: {source}")]
    Qeasl { id: String, source: QeaslError },
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
    Eval(#[from] EvalError),
    #[error("invalid JSON in {path}: {message}")]
    Json { path: PathBuf, message: String },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> CliError {
        CliError::Io { path: path.to_path_buf(), source }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Io { .. } => "IoError",
            CliError::Config(_) => "InvalidConfig",
            CliError::MissingPath(_) => "MissingPath",
            CliError::MissingMeasurements(_) => "MissingMeasurements",
            CliError::Qeasl { .. } => "QeaslError",
            CliError::Dataset(_) => "DatasetError",
            CliError::Encoder(_) => "EncoderError",
            CliError::Graph(_) => "GraphError",
            CliError::Gcn(_) => "GcnError",
            CliError::Uncertainty(_) => "UncertaintyError",
            CliError::Eval(_) => "EvaluationError",
            CliError::Json { .. } => "JsonError",
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::MissingPath(_) => 2,
            CliError::Io { .. } | CliError::Json { .. } => 3,
            _ => 1,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "hccgraph", version, about = "Treatment-response prediction on patient graphs")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; every stage seed is derived from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Primary output path (stdout when absent).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress human-readable summaries.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort.
    Synth {
        #[arg(long)]
        n_patients: Option<usize>,
        /// Sample qEASL reductions around the responder threshold.
        #[arg(long)]
        boundary: bool,
    },
    /// Derive responder labels from qEASL measurements.
    Label {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        k_sigma: Option<f64>,
        /// Leave patients without measurements unlabelled instead of failing.
        #[arg(long)]
        allow_missing: bool,
    },
    /// Train the autoencoder and attach latent features to every patient.
    Encode {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Also write the autoencoder checkpoint here.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Build the population graph and dump W and Â.
    Graph {
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the GCN on every labelled patient.
    Train {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Per-epoch training loss as CSV.
        #[arg(long)]
        loss_history: Option<PathBuf>,
    },
    /// MC-dropout predictions for every patient.
    Predict {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        n_mc: Option<usize>,
    },
    /// Stratified k-fold evaluation of the full pipeline.
    Crossval {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        n_mc: Option<usize>,
        #[arg(long, value_enum)]
        features: Option<CvFeatures>,
        /// Per-fold metrics as CSV.
        #[arg(long)]
        folds_csv: Option<PathBuf>,
    },
    /// Edge-attribute ablations plus the PCA + random-forest baseline.
    Ablate {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        n_mc: Option<usize>,
        #[arg(long, value_enum)]
        features: Option<CvFeatures>,
        #[arg(long)]
        folds_csv: Option<PathBuf>,
    },
    /// Confidence triage of a predictions file against known labels.
    Triage {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Comma-separated thresholds in (0.5, 1].
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct PredictionRow {
    id: String,
    #[serde(flatten)]
    prediction: McPrediction,
}

#[derive(Debug, Serialize)]
struct EvaluationReport<'a> {
    node_ids: Vec<&'a str>,
    rows: &'a [CvResult],
}

#[derive(Debug, Serialize)]
struct TriageOutput {
    n_predictions: usize,
    n_labelled: usize,
    reports: Vec<TriageReport>,
}

struct Ctx {
    cfg: RunConfig,
    out: Option<PathBuf>,
    quiet: bool,
}

impl Ctx {
    fn emit(&self, body: &str) -> Result<(), CliError> {
        match &self.out {
            Some(p) => write_file(p, body),
            None => {
                say(body);
                Ok(())
            }
        }
    }

    fn out_path(&self) -> Result<&Path, CliError> {
        self.out.as_deref().ok_or(CliError::MissingPath("--out"))
    }

    fn note(&self, text: &str) {
        if !self.quiet && self.out.is_some() {
            say(text);
        }
    }

    fn cohort(&self, flag: Option<PathBuf>) -> Result<Cohort, CliError> {
        let path = flag.or_else(|| self.cfg.paths.cohort.clone()).ok_or(CliError::MissingPath("--input"))?;
        load_cohort(&path).map_err(|e| match e {
            DatasetError::Io(source) => CliError::io(&path, source),
            other => other.into(),
        })
    }
}

/// Stdout write that tolerates a closed pipe (e.g. `| head`).
fn say(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn write_file(path: &Path, body: &str) -> Result<(), CliError> {
    std::fs::write(path, body).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable report");
    s.push('\n');
    s
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Json { path: path.to_path_buf(), message: e.to_string() })
}

fn labelled_targets(cohort: &Cohort) -> (Vec<usize>, Vec<bool>) {
    let labels = cohort.patients.iter().map(|p| p.label.map_or(0, Label::index)).collect();
    let mask = cohort.patients.iter().map(|p| p.label.is_some()).collect();
    (labels, mask)
}

fn cmd_label(ctx: &Ctx, mut cohort: Cohort, allow_missing: bool) -> Result<(), CliError> {
    let mut missing = Vec::new();
    let mut counts = BTreeMap::<&str, usize>::new();
    for p in &mut cohort.patients {
        match (&p.qeasl_baseline, &p.qeasl_followup) {
            (Some(b), Some(f)) => {
                let label = label_from_measurements(b, f, ctx.cfg.k_sigma).map_err(|source| CliError::Qeasl { id: p.id.clone(), source })?;
                p.label = Some(label);
                *counts.entry(label.code()).or_default() += 1;
            }
            _ => {
                p.label = None;
                missing.push(p.id.clone());
            }
        }
    }
    if !missing.is_empty() && !allow_missing {
        return Err(CliError::MissingMeasurements(missing));
    }
    cohort.validate()?;
    match &ctx.out {
        Some(p) => save_cohort(&cohort, p)?,
        None => say(&(hccgraph::dataset::cohort_to_json(&cohort)? + "\n")),
    }
    ctx.note(&format!("labelled: {counts:?}, unlabelled: {}\n", missing.len()));
    Ok(())
}

fn run_eval(ctx: &Ctx, cohort: &Cohort, ablate: bool, folds_csv: Option<PathBuf>) -> Result<(), CliError> {
    let all_volumes = cohort.patients.iter().all(|p| p.volume.is_some());
    let cv = ctx.cfg.cv_config(all_volumes);
    let train_cfg = ctx.cfg.train_config();
    let rows = if ablate {
        run_ablations(cohort, &ctx.cfg.graph, &train_cfg, Some(&ctx.cfg.rf), &cv)?
    } else {
        let prepared = prepare_folds(cohort, &cv)?;
        vec![run_gcn_cv(cohort, &prepared, &ctx.cfg.graph, &train_cfg, "GCN")?]
    };
    let report = EvaluationReport { node_ids: cohort.patients.iter().map(|p| p.id.as_str()).collect(), rows: &rows };
    ctx.emit(&to_json(&report))?;
    if let Some(p) = folds_csv {
        write_file(&p, &per_fold_csv(&rows))?;
    }
    ctx.note(&render_table(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.common.seed {
        cfg.seed = s;
    }
    let out = cli.common.out.clone().or_else(|| cfg.paths.out.clone());
    match &cli.command {
        Command::Label { k_sigma: Some(k), .. } => cfg.k_sigma = *k,
        Command::Predict { n_mc: Some(n), .. } | Command::Crossval { n_mc: Some(n), .. } | Command::Ablate { n_mc: Some(n), .. } => {
            cfg.n_mc_samples = *n
        }
        Command::Triage { thresholds: Some(t), .. } => cfg.triage_thresholds = t.clone(),
        _ => {}
    }
    if let Command::Crossval { folds, features, .. } | Command::Ablate { folds, features, .. } = &cli.command {
        if let Some(k) = folds {
            cfg.k_folds = *k;
        }
        if let Some(f) = features {
            cfg.cv_features = *f;
        }
    }
    cfg.validate()?;
    let ctx = Ctx { cfg, out, quiet: cli.common.quiet };

    match cli.command {
        Command::Synth { n_patients, boundary } => {
            let mut synth = ctx.cfg.synth_config();
            if let Some(n) = n_patients {
                synth.n_patients = n;
            }
            synth.boundary |= boundary;
            let cohort = generate_synthetic(&synth)?;
            save_cohort(&cohort, ctx.out_path()?)?;
            let r = cohort.labels().iter().filter(|l| **l == Some(Label::Responder)).count();
            ctx.note(&format!("{} patients, {r} responders\n", cohort.len()));
        }
        Command::Label { input, allow_missing, .. } => cmd_label(&ctx, ctx.cohort(input)?, allow_missing)?,
        Command::Encode { input, model } => {
            let cohort = ctx.cohort(input)?;
            let trained = train_autoencoder(&cohort, &ctx.cfg.encoder_config())?;
            let encoded = attach_features(&cohort, &trained.model)?;
            save_cohort(&encoded, ctx.out_path()?)?;
            if let Some(p) = model.or_else(|| ctx.cfg.paths.encoder.clone()) {
                trained.model.save(p)?;
            }
            let last = trained.loss_history.last().copied().unwrap_or(f64::NAN);
            ctx.note(&format!("latent_dim {}, final reconstruction MSE {last:.6}\n", trained.model.latent_dim));
        }
        Command::Graph { input } => {
            let cohort = ctx.cohort(input)?;
            let graph = build_graph(&cohort, &ctx.cfg.graph)?;
            let body = graph_to_json(&graph, &ctx.cfg.graph.edge_attrs).map_err(|e| CliError::Config(e.to_string()))?;
            ctx.emit(&(body + "\n"))?;
            let edges = graph.adjacency.iter().filter(|&&w| w > 0.0).count() / 2;
            ctx.note(&format!("{} nodes, {edges} weighted edges\n", graph.n_nodes()));
        }
        Command::Train { input, loss_history } => {
            let cohort = ctx.cohort(input)?;
            let graph = build_graph(&cohort, &ctx.cfg.graph)?;
            let (labels, mask) = labelled_targets(&cohort);
            let trained = train(&graph, &labels, &mask, &ctx.cfg.train_config())?;
            ctx.emit(&(trained.model.to_json()? + "\n"))?;
            if let Some(p) = loss_history {
                write_file(&p, &loss_history_csv(&trained.loss_history))?;
            }
            let last = trained.loss_history.last().copied().unwrap_or(f64::NAN);
            ctx.note(&format!("trained on {} labelled nodes, final loss {last:.6}\n", mask.iter().filter(|&&m| m).count()));
        }
        Command::Predict { input, model, .. } => {
            let cohort = ctx.cohort(input)?;
            let model_path = model.or_else(|| ctx.cfg.paths.model.clone()).ok_or(CliError::MissingPath("--model"))?;
            let model = GcnModel::load(model_path)?;
            let graph = build_graph(&cohort, &ctx.cfg.graph)?;
            let nodes: Vec<usize> = (0..cohort.len()).collect();
            let preds = mc_predict(&model, &graph, &nodes, ctx.cfg.n_mc_samples, ctx.cfg.mc_seed())?;
            let rows: Vec<PredictionRow> =
                preds.into_iter().map(|p| PredictionRow { id: cohort.patients[p.node].id.clone(), prediction: p }).collect();
            ctx.emit(&to_json(&rows))?;
            ctx.note(&format!("{} predictions from {} MC passes\n", rows.len(), ctx.cfg.n_mc_samples));
        }
        Command::Crossval { input, folds_csv, .. } => run_eval(&ctx, &ctx.cohort(input)?, false, folds_csv)?,
        Command::Ablate { input, folds_csv, .. } => run_eval(&ctx, &ctx.cohort(input)?, true, folds_csv)?,
        Command::Triage { input, predictions, .. } => {
            let cohort = ctx.cohort(input)?;
            let pred_path = predictions.or_else(|| ctx.cfg.paths.predictions.clone()).ok_or(CliError::MissingPath("--predictions"))?;
            let rows: Vec<PredictionRow> = read_json(&pred_path)?;
            let index: BTreeMap<&str, usize> = cohort.patients.iter().enumerate().map(|(i, p)| (p.id.as_str(), i)).collect();
            let mut preds = Vec::new();
            let mut truth = Vec::new();
            let mut all_truth = Vec::new();
            for r in &rows {
                let &i = index
                    .get(r.id.as_str())
                    .ok_or_else(|| CliError::Config(format!("prediction for unknown patient `{}`", r.id)))?;
                let mut p = r.prediction.clone();
                p.node = i;
                let label = cohort.patients[i].label;
                all_truth.push(label);
                if let Some(l) = label {
                    preds.push(p);
                    truth.push(l);
                }
            }
            let reports = ctx.cfg.triage_thresholds.iter().map(|&t| triage(&preds, &truth, t)).collect::<Result<Vec<_>, _>>()?;
            ctx.emit(&to_json(&TriageOutput { n_predictions: rows.len(), n_labelled: preds.len(), reports }))?;
            if !ctx.quiet && ctx.out.is_some() {
                let ids: Vec<String> = cohort.patients.iter().map(|p| p.id.clone()).collect();
                let all: Vec<McPrediction> = rows.iter().map(|r| McPrediction { node: index[r.id.as_str()], ..r.prediction.clone() }).collect();
                for &t in &ctx.cfg.triage_thresholds {
                    say(&format!("threshold {t:.2}\n{}", render_triage_table(&all, &ids, &all_truth, t)));
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::from(e.exit_code())
        }
    }
}
