//! End-to-end run: ingest → label → features → LSTM-AE → graph → GCN →
//! forest → fuse → calibrate → evaluate, with every output written to a
//! staging directory that replaces the output directory only on success.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::artifact::{Artifact, ArtifactError};
use crate::config::{hex, ConfigError, PipelineConfig};
use crate::features::{self, build_features, fit_scaler, quantile, standardize, FeatureError};
use crate::forest::{feature_importances, rf_predict_proba, train_forest, Forest, ForestError};
use crate::fusion::{apply_flag, calibrate_threshold, hybrid_score, CalibratedThreshold, FusionError, FusionWeights, ScoreTriple};
use crate::gcn::{gcn_predict_proba, train_gcn, GcnError, GcnParams};
use crate::graph::{build_temporal_graph, normalized_adjacency, GraphError};
use crate::ingestion::{load_csv, test_count, Dataset, IngestError};
use crate::labeling::{inject_theft, LabelError};
use crate::lstm_ae::{anomaly_score, make_windows, normalize_scores, train_autoencoder, LstmAeParams, LstmError, SequenceWindow};
use crate::metrics::{evaluate, evaluate_predictions, MetricsError, ReportBundle};

/// Columns appended to the scored dataset, in output order.
pub const SCORED_COLUMNS: [&str; 5] = [
    "GNN_Prob-Theft",
    "Supervised_prob_Theft",
    "TS_Anomaly_Scored_Scaled",
    "Hybrid_Theft_Score",
    "Hybrid_Theft_Flag",
];

pub const MODELS: [&str; 4] = ["lstm", "gcn", "rf", "hybrid"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Ingest,
    Label,
    Features,
    Lstm,
    Graph,
    Gcn,
    Forest,
    Fuse,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Ingest,
        Stage::Label,
        Stage::Features,
        Stage::Lstm,
        Stage::Graph,
        Stage::Gcn,
        Stage::Forest,
        Stage::Fuse,
        Stage::Evaluate,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Label => "label",
            Stage::Features => "features",
            Stage::Lstm => "lstm",
            Stage::Graph => "graph",
            Stage::Gcn => "gcn",
            Stage::Forest => "forest",
            Stage::Fuse => "fuse",
            Stage::Evaluate => "evaluate",
        }
    }
}

impl Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Stage::ALL.iter().map(|s| s.as_str()).collect();
                format!("unknown stage `{s}` (expected one of {})", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Divergence,
}

impl ErrorKind {
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorKind::Config => 1,
            ErrorKind::Data => 2,
            ErrorKind::Divergence => 3,
        }
    }
}

#[derive(Debug, Error)]
#[error("stage `{stage}` failed: {message}")]
pub struct PipelineError {
    pub stage: String,
    pub kind: ErrorKind,
    pub message: String,
}

impl PipelineError {
    fn new(stage: impl Display, kind: ErrorKind, message: impl Display) -> Self {
        Self {
            stage: stage.to_string(),
            kind,
            message: message.to_string(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        self.kind.exit_code()
    }
}

trait Classify: Display {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Data
    }
}

impl Classify for IngestError {}
impl Classify for FeatureError {}
impl Classify for GraphError {}
impl Classify for MetricsError {}
impl Classify for ArtifactError {}
impl Classify for OutputError {}

impl Classify for ConfigError {
    fn kind(&self) -> ErrorKind {
        ErrorKind::Config
    }
}

impl Classify for LabelError {
    fn kind(&self) -> ErrorKind {
        match self {
            LabelError::AlreadyLabeled => ErrorKind::Data,
            _ => ErrorKind::Config,
        }
    }
}

impl Classify for LstmError {
    fn kind(&self) -> ErrorKind {
        match self {
            LstmError::DivergedLoss(_) | LstmError::NonFinite => ErrorKind::Divergence,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for GcnError {
    fn kind(&self) -> ErrorKind {
        match self {
            GcnError::DivergedLoss(_) | GcnError::NonFiniteActivation(_) => ErrorKind::Divergence,
            GcnError::InvalidConfig(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for ForestError {
    fn kind(&self) -> ErrorKind {
        match self {
            ForestError::InvalidConfig(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

impl Classify for FusionError {
    fn kind(&self) -> ErrorKind {
        match self {
            FusionError::WeightSumViolation(_) | FusionError::NegativeWeight(_) => ErrorKind::Config,
            _ => ErrorKind::Data,
        }
    }
}

fn at<E: Classify>(stage: Stage) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::new(stage, e.kind(), e)
}

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{scores} score rows for {rows} records")]
    RowCountMismatch { rows: usize, scores: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), OutputError> {
    fs::write(path, bytes).map_err(io_err(path))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, OutputError> {
    let f = fs::File::create(path).map_err(io_err(path))?;
    Ok(csv::Writer::from_writer(f))
}

/// Input columns (plus `label` when injected) followed by [`SCORED_COLUMNS`].
pub fn write_scored_dataset(
    d: &Dataset,
    triples: &[ScoreTriple],
    hybrid: &[f64],
    flags: &[u8],
    path: &Path,
) -> Result<(), OutputError> {
    for len in [triples.len(), hybrid.len(), flags.len()] {
        if len != d.len() {
            return Err(OutputError::RowCountMismatch {
                rows: d.len(),
                scores: len,
            });
        }
    }
    let mut w = csv_writer(path)?;
    let mut header = d.output_header();
    header.extend(SCORED_COLUMNS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for i in 0..d.len() {
        let mut row = d.output_row(i);
        let t = &triples[i];
        row.extend([
            t.p_gnn.to_string(),
            t.p_rf.to_string(),
            t.s_norm.to_string(),
            hybrid[i].to_string(),
            flags[i].to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush().map_err(io_err(path))?;
    Ok(())
}

/// One JSON report per model plus ROC, PR and confusion CSVs and a
/// theft-class comparison table.
pub fn emit_reports(bundles: &[ReportBundle], dir: &Path) -> Result<Vec<PathBuf>, OutputError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut written = Vec::new();
    for b in bundles {
        let json = dir.join(format!("{}.json", b.model));
        write_file(&json, serde_json::to_string_pretty(b).expect("report serializes").as_bytes())?;
        written.push(json);

        let roc = dir.join(format!("{}_roc.csv", b.model));
        let mut w = csv_writer(&roc)?;
        w.write_record(["threshold", "fpr", "tpr"])?;
        for p in &b.roc {
            w.write_record([p.threshold.to_string(), p.x.to_string(), p.y.to_string()])?;
        }
        w.flush().map_err(io_err(&roc))?;
        written.push(roc);

        let pr = dir.join(format!("{}_pr.csv", b.model));
        let mut w = csv_writer(&pr)?;
        w.write_record(["threshold", "recall", "precision"])?;
        for p in &b.pr {
            w.write_record([p.threshold.to_string(), p.x.to_string(), p.y.to_string()])?;
        }
        w.flush().map_err(io_err(&pr))?;
        written.push(pr);

        let cm = dir.join(format!("{}_confusion.csv", b.model));
        let c = &b.confusion;
        let mut w = csv_writer(&cm)?;
        w.write_record(["actual", "predicted_normal", "predicted_theft"])?;
        w.write_record(["normal".to_string(), c.tn.to_string(), c.fp.to_string()])?;
        w.write_record(["theft".to_string(), c.fn_.to_string(), c.tp.to_string()])?;
        w.flush().map_err(io_err(&cm))?;
        written.push(cm);
    }
    let cmp = dir.join("comparison.csv");
    let mut w = csv_writer(&cmp)?;
    w.write_record(["model", "threshold", "precision", "recall", "f1", "accuracy", "roc_auc", "auprc"])?;
    for b in bundles {
        let t = &b.report.theft;
        let opt = |v: Option<f64>| v.map_or_else(String::new, |v| v.to_string());
        w.write_record([
            b.model.clone(),
            b.threshold.to_string(),
            t.precision.to_string(),
            t.recall.to_string(),
            t.f1.to_string(),
            b.report.accuracy.to_string(),
            opt(b.roc_auc),
            opt(b.auprc),
        ])?;
    }
    w.flush().map_err(io_err(&cmp))?;
    written.push(cmp);
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub fit: usize,
    pub calibration: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadlineMetrics {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub roc_auc: Option<f64>,
    pub auprc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Deterministic run summary. Wall-clock timings live in `timings.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub input_sha256: String,
    pub seed: u64,
    pub stage_seeds: BTreeMap<String, u64>,
    pub records: usize,
    pub theft_records: usize,
    pub split: SplitSummary,
    pub feature_names: Vec<String>,
    pub fusion: FusionWeights,
    pub threshold: CalibratedThreshold,
    pub lstm_threshold: f64,
    pub metrics: BTreeMap<String, HeadlineMetrics>,
    /// SHA-256 of each stage's in-memory output.
    pub stage_checksums: BTreeMap<String, String>,
    pub files: Vec<FileEntry>,
}

/// Everything a run produced, for callers that want to inspect it.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub output_dir: PathBuf,
    pub timings: BTreeMap<String, f64>,
}

struct Priors {
    lstm: Option<LstmAeParams>,
    gcn: Option<GcnParams>,
    forest: Option<Forest>,
    lstm_loss: Option<Vec<u8>>,
    gcn_loss: Option<Vec<u8>>,
}

fn sha(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn load_priors(cfg: &PipelineConfig, from: Stage) -> Result<Priors, PipelineError> {
    let out = &cfg.output_dir;
    let config_err = |m: String| PipelineError::new("resume", ErrorKind::Config, m);
    let manifest = fs::read_to_string(out.join("manifest.json"))
        .map_err(|e| config_err(format!("no previous run in {}: {e}", out.display())))?;
    let manifest: RunManifest =
        serde_json::from_str(&manifest).map_err(|e| config_err(format!("unreadable manifest: {e}")))?;
    if manifest.config_hash != cfg.hash() {
        return Err(config_err("config changed since the previous run; rerun without --stage".into()));
    }
    let read = |name: &str| Artifact::read(&out.join("models").join(name)).map_err(at(Stage::Ingest));
    let raw = |name: &str| fs::read(out.join(name)).map_err(|e| config_err(format!("missing {name}: {e}")));
    let lstm = if from > Stage::Lstm {
        Some(LstmAeParams::from_artifact(&read("lstm_ae.bin")?).map_err(at(Stage::Lstm))?)
    } else {
        None
    };
    let gcn = if from > Stage::Gcn {
        Some(GcnParams::from_artifact(&read("gcn.bin")?).map_err(at(Stage::Gcn))?)
    } else {
        None
    };
    let forest = if from > Stage::Forest {
        Some(Forest::from_artifact(&read("forest.bin")?).map_err(at(Stage::Forest))?)
    } else {
        None
    };
    Ok(Priors {
        lstm_loss: if lstm.is_some() { Some(raw("lstm_loss.csv")?) } else { None },
        gcn_loss: if gcn.is_some() { Some(raw("gcn_loss.csv")?) } else { None },
        lstm,
        gcn,
        forest,
    })
}

fn staging_dir(out: &Path) -> PathBuf {
    let name = out.file_name().map_or_else(|| "out".into(), |n| n.to_string_lossy().into_owned());
    out.with_file_name(format!(".{name}.staging"))
}

/// Runs every stage. With `resume`, trained models for stages before it are
/// loaded from the existing output directory instead of retrained.
pub fn run_pipeline(cfg: &PipelineConfig, resume: Option<Stage>) -> Result<RunOutcome, PipelineError> {
    cfg.validate().map_err(at(Stage::Ingest)).map_err(|mut e| {
        e.stage = "config".into();
        e
    })?;
    let priors = match resume {
        Some(stage) => load_priors(cfg, stage)?,
        None => Priors {
            lstm: None,
            gcn: None,
            forest: None,
            lstm_loss: None,
            gcn_loss: None,
        },
    };
    let out = cfg.output_dir.clone();
    let staging = staging_dir(&out);
    let prep = |p: &Path| -> Result<(), PipelineError> {
        if p.exists() {
            fs::remove_dir_all(p).map_err(|e| PipelineError::new("output", ErrorKind::Data, e))?;
        }
        Ok(())
    };
    prep(&staging)?;
    fs::create_dir_all(staging.join("models")).map_err(|e| PipelineError::new("output", ErrorKind::Data, e))?;
    match execute(cfg, priors, &staging) {
        Ok((manifest, timings)) => {
            prep(&out)?;
            fs::rename(&staging, &out).map_err(|e| PipelineError::new("output", ErrorKind::Data, e))?;
            Ok(RunOutcome {
                manifest,
                output_dir: out,
                timings,
            })
        }
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

struct Timer {
    start: Instant,
    laps: BTreeMap<String, f64>,
}

impl Timer {
    fn lap(&mut self, stage: Stage) {
        let now = Instant::now();
        let secs = (now - self.start).as_secs_f64();
        info!("stage {stage} finished in {secs:.2}s");
        self.laps.insert(stage.to_string(), secs);
        self.start = now;
    }
}

/// Per-record slices of the chronological split.
struct Slices {
    fit: Vec<usize>,
    calibration: Vec<usize>,
    test: Vec<usize>,
}

fn slices(d: &Dataset, cfg: &PipelineConfig) -> Result<Slices, PipelineError> {
    let mut s = Slices {
        fit: Vec::new(),
        calibration: Vec::new(),
        test: Vec::new(),
    };
    for st in d.state_index() {
        let n = st.range.len();
        if n < 3 {
            return Err(PipelineError::new(
                Stage::Ingest,
                ErrorKind::Data,
                IngestError::StateTooSmall(st.state.clone()),
            ));
        }
        let test_start = st.range.end - test_count(n, cfg.test_fraction);
        let cal_start = test_start - test_count(test_start - st.range.start, cfg.calibration_fraction);
        s.fit.extend(st.range.start..cal_start);
        s.calibration.extend(cal_start..test_start);
        s.test.extend(test_start..st.range.end);
    }
    Ok(s)
}

/// Sector channels standardized per state with fit-slice normal statistics.
fn lstm_series(d: &Dataset, in_fit: &[bool]) -> Vec<Vec<Vec<f64>>> {
    let recs = d.records();
    d.state_index()
        .iter()
        .map(|st| {
            let rows: Vec<usize> = st.range.clone().filter(|&i| in_fit[i] && !recs[i].is_theft()).collect();
            let mut mean = [0.0; 3];
            let mut std = [0.0; 3];
            for c in 0..3 {
                let vals: Vec<f64> = rows.iter().map(|&i| recs[i].sectors()[c]).collect();
                if vals.is_empty() {
                    std[c] = 1.0;
                    continue;
                }
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
                mean[c] = m;
                std[c] = if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 };
            }
            st.range
                .clone()
                .map(|i| {
                    let s = recs[i].sectors();
                    (0..3).map(|c| (s[c] - mean[c]) / std[c]).collect()
                })
                .collect()
        })
        .collect()
}

fn headline(b: &ReportBundle) -> HeadlineMetrics {
    HeadlineMetrics {
        threshold: b.threshold,
        precision: b.report.theft.precision,
        recall: b.report.theft.recall,
        f1: b.report.theft.f1,
        accuracy: b.report.accuracy,
        roc_auc: b.roc_auc,
        auprc: b.auprc,
    }
}

fn loss_csv(history: &[f64]) -> Vec<u8> {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in history.iter().enumerate() {
        s.push_str(&format!("{},{}\n", i + 1, l));
    }
    s.into_bytes()
}

fn execute(
    cfg: &PipelineConfig,
    priors: Priors,
    dir: &Path,
) -> Result<(RunManifest, BTreeMap<String, f64>), PipelineError> {
    let mut timer = Timer {
        start: Instant::now(),
        laps: BTreeMap::new(),
    };
    let mut checksums = BTreeMap::new();
    let stage_seeds: BTreeMap<String, u64> = [Stage::Label, Stage::Lstm, Stage::Gcn, Stage::Forest]
        .iter()
        .map(|s| (s.to_string(), cfg.stage_seed(s.as_str())))
        .collect();
    let out_err = |stage: Stage| at::<OutputError>(stage);

    // ingest
    let input_bytes = fs::read(&cfg.input).map_err(|source| {
        PipelineError::new(
            Stage::Ingest,
            ErrorKind::Data,
            IngestError::Io {
                path: cfg.input.display().to_string(),
                source,
            },
        )
    })?;
    let input_sha256 = sha(&input_bytes);
    let raw = load_csv(&cfg.input, &cfg.schema).map_err(at(Stage::Ingest))?;
    info!("loaded {} records across {} states", raw.len(), raw.state_index().len());
    checksums.insert(Stage::Ingest.to_string(), input_sha256.clone());
    timer.lap(Stage::Ingest);

    // label
    let d = match &cfg.attack {
        Some(spec) => {
            let inj = inject_theft(&raw, spec, stage_seeds["label"]).map_err(at(Stage::Label))?;
            let mut w = csv_writer(&dir.join("injected.csv")).map_err(out_err(Stage::Label))?;
            let write = |w: &mut csv::Writer<fs::File>| -> Result<(), csv::Error> {
                w.write_record(["record", "state", "t", "kind"])?;
                for (i, s, t, k) in inj.audit_rows() {
                    w.write_record([i.to_string(), s, t.to_string(), k.to_string()])?;
                }
                w.flush()?;
                Ok(())
            };
            write(&mut w).map_err(|e| PipelineError::new(Stage::Label, ErrorKind::Data, e))?;
            inj.dataset
        }
        None => {
            if !raw.has_labels() {
                return Err(PipelineError::new(
                    Stage::Label,
                    ErrorKind::Data,
                    "input has no label column and no attack is configured",
                ));
            }
            raw
        }
    };
    let y = d.labels();
    let theft_records = y.iter().filter(|&&l| l == 1).count();
    checksums.insert(Stage::Label.to_string(), sha(&y));
    timer.lap(Stage::Label);

    // features
    let sl = slices(&d, cfg)?;
    let mut in_fit = vec![false; d.len()];
    for &i in &sl.fit {
        in_fit[i] = true;
    }
    let (raw_features, model) = build_features(&d, &sl.fit, &cfg.features).map_err(at(Stage::Features))?;
    checksums.insert(Stage::Features.to_string(), sha(&f64_bytes(raw_features.values.as_slice())));
    timer.lap(Stage::Features);

    // lstm
    let series = lstm_series(&d, &in_fit);
    let win = cfg.lstm.window;
    let mut all_windows: Vec<(usize, SequenceWindow)> = Vec::new();
    for (st, s) in d.state_index().iter().zip(&series) {
        let ws = make_windows(&st.state, s, win, 1).map_err(at(Stage::Lstm))?;
        all_windows.extend(ws.into_iter().map(|w| (st.range.start + w.origin.1, w)));
    }
    let mut train_windows: Vec<SequenceWindow> = all_windows
        .iter()
        .filter(|(end, _)| {
            let start = end + 1 - win;
            (start - d.state_index().iter().find(|s| s.range.contains(end)).expect("in range").range.start)
                .is_multiple_of(cfg.lstm.train_stride)
                && (start..=*end).all(|i| in_fit[i] && y[i] == 0)
        })
        .map(|(_, w)| w.clone())
        .collect();
    let cap = cfg.lstm.max_train_windows;
    if cap > 0 && train_windows.len() > cap {
        let n = train_windows.len();
        train_windows = (0..cap).map(|j| train_windows[j * n / cap].clone()).collect();
    }
    info!("autoencoder trains on {} windows", train_windows.len());
    let (lstm_params, lstm_loss) = match priors.lstm {
        Some(p) => (p, priors.lstm_loss.expect("loaded with params")),
        None => {
            let t = train_autoencoder(&train_windows, &cfg.lstm, stage_seeds["lstm"]).map_err(at(Stage::Lstm))?;
            (t.params, loss_csv(&t.loss_history))
        }
    };
    let training_scores: Vec<f64> = train_windows
        .iter()
        .map(|w| anomaly_score(&lstm_params, w))
        .collect::<Result<_, _>>()
        .map_err(at(Stage::Lstm))?;
    let lstm_threshold = quantile(&training_scores, cfg.lstm.threshold_quantile).unwrap_or(0.0);
    let mut s_raw = vec![0.0; d.len()];
    for (end, w) in &all_windows {
        s_raw[*end] = anomaly_score(&lstm_params, w).map_err(at(Stage::Lstm))?;
    }
    let (lo, hi) = lstm_params.score_range.unwrap_or((0.0, 0.0));
    let mut s_norm = normalize_scores(&s_raw, lo, hi).map_err(at(Stage::Lstm))?;
    let mut has_window = vec![false; d.len()];
    for (end, _) in &all_windows {
        has_window[*end] = true;
    }
    for i in 0..d.len() {
        if !has_window[i] {
            s_norm[i] = 0.0;
        }
    }
    let lstm_artifact = lstm_params.to_artifact().to_bytes();
    write_file(&dir.join("models/lstm_ae.bin"), &lstm_artifact).map_err(out_err(Stage::Lstm))?;
    write_file(&dir.join("lstm_loss.csv"), &lstm_loss).map_err(out_err(Stage::Lstm))?;
    checksums.insert(
        Stage::Lstm.to_string(),
        sha(&[lstm_artifact, f64_bytes(&s_raw)].concat()),
    );
    timer.lap(Stage::Lstm);

    // graph
    let with_ts = raw_features
        .with_column(features::names::TS_SCORE, &s_norm)
        .map_err(at(Stage::Graph))?;
    let mut scaler = fit_scaler(&with_ts.select_rows(&sl.fit)).map_err(at(Stage::Graph))?;
    scaler.winsorization = Some(model.winsorization.clone());
    let x = standardize(&with_ts, &scaler).map_err(at(Stage::Graph))?;
    write_file(&dir.join("scaler.json"), scaler.to_json().as_bytes()).map_err(out_err(Stage::Graph))?;
    let graph = build_temporal_graph(&d, x.clone())
        .and_then(|g| g.with_masks(&sl.fit, &sl.test))
        .map_err(at(Stage::Graph))?;
    let a_hat = normalized_adjacency(&graph);
    let csv_out = |name: &str, f: &dyn Fn(fs::File) -> Result<(), csv::Error>| -> Result<(), PipelineError> {
        let path = dir.join(name);
        let file = fs::File::create(&path).map_err(|e| PipelineError::new(Stage::Graph, ErrorKind::Data, e))?;
        f(file).map_err(|e| PipelineError::new(Stage::Graph, ErrorKind::Data, e))
    };
    csv_out("edges.csv", &|f| graph.write_edges_csv(f))?;
    csv_out("nodes.csv", &|f| graph.write_nodes_csv(f))?;
    // the model never sees labels outside the train mask
    let mut train_graph = graph.clone();
    for i in 0..train_graph.n_nodes() {
        if !train_graph.train_mask[i] {
            train_graph.y[i] = 0;
        }
    }
    let edge_bytes: Vec<u8> = graph.edges.iter().flat_map(|&(a, b)| [a as u64, b as u64]).flat_map(u64::to_le_bytes).collect();
    checksums.insert(Stage::Graph.to_string(), sha(&[edge_bytes, f64_bytes(x.values.as_slice())].concat()));
    timer.lap(Stage::Graph);

    // gcn
    let (gcn_params, gcn_loss) = match priors.gcn {
        Some(p) => (p, priors.gcn_loss.expect("loaded with params")),
        None => {
            let t = train_gcn(&train_graph, &a_hat, &cfg.gcn, stage_seeds["gcn"]).map_err(at(Stage::Gcn))?;
            (t.params, loss_csv(&t.loss_history))
        }
    };
    let p_gnn = gcn_predict_proba(&train_graph, &a_hat, &gcn_params).map_err(at(Stage::Gcn))?;
    let gcn_artifact = gcn_params.to_artifact().to_bytes();
    write_file(&dir.join("models/gcn.bin"), &gcn_artifact).map_err(out_err(Stage::Gcn))?;
    write_file(&dir.join("gcn_loss.csv"), &gcn_loss).map_err(out_err(Stage::Gcn))?;
    checksums.insert(Stage::Gcn.to_string(), sha(&[gcn_artifact, f64_bytes(&p_gnn)].concat()));
    timer.lap(Stage::Gcn);

    // forest
    if x.column_index(features::names::TS_SCORE).is_none() {
        return Err(PipelineError::new(
            Stage::Forest,
            ErrorKind::Data,
            "supervised features lack the anomaly score column",
        ));
    }
    let forest = match priors.forest {
        Some(f) => f,
        None => {
            let y_fit: Vec<u8> = sl.fit.iter().map(|&i| y[i]).collect();
            train_forest(&x.select_rows(&sl.fit), &y_fit, &cfg.forest, stage_seeds["forest"])
                .map_err(at(Stage::Forest))?
        }
    };
    let p_rf = rf_predict_proba(&forest, &x).map_err(at(Stage::Forest))?;
    let mut importances = feature_importances(&forest).map_err(at(Stage::Forest))?;
    importances.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut imp_csv = String::from("feature,importance\n");
    for (name, v) in &importances {
        imp_csv.push_str(&format!("{name},{v}\n"));
    }
    write_file(&dir.join("importances.csv"), imp_csv.as_bytes()).map_err(out_err(Stage::Forest))?;
    let forest_artifact = forest.to_artifact().to_bytes();
    write_file(&dir.join("models/forest.bin"), &forest_artifact).map_err(out_err(Stage::Forest))?;
    checksums.insert(Stage::Forest.to_string(), sha(&[forest_artifact, f64_bytes(&p_rf)].concat()));
    timer.lap(Stage::Forest);

    // fuse
    let keys = &x.row_keys;
    let triples: Vec<ScoreTriple> = (0..d.len())
        .map(|i| ScoreTriple::new(p_gnn[i], p_rf[i], s_norm[i], keys[i].clone()))
        .collect::<Result<_, _>>()
        .map_err(at(Stage::Fuse))?;
    let hybrid: Vec<f64> = triples
        .iter()
        .map(|t| hybrid_score(t, &cfg.fusion))
        .collect::<Result<_, _>>()
        .map_err(at(Stage::Fuse))?;
    let cal_scores: Vec<f64> = sl.calibration.iter().map(|&i| hybrid[i]).collect();
    let cal_labels: Vec<u8> = sl.calibration.iter().map(|&i| y[i]).collect();
    let tau = calibrate_threshold(&cal_scores, &cal_labels).map_err(at(Stage::Fuse))?;
    info!("calibrated threshold {:.6} (calibration F1 {:.4})", tau.tau, tau.f1);
    let flags = apply_flag(&hybrid, &tau);
    write_scored_dataset(&d, &triples, &hybrid, &flags, &dir.join("scored.csv")).map_err(out_err(Stage::Fuse))?;
    checksums.insert(
        Stage::Fuse.to_string(),
        sha(&[f64_bytes(&hybrid), tau.tau.to_le_bytes().to_vec()].concat()),
    );
    timer.lap(Stage::Fuse);

    // evaluate
    let pick = |v: &[f64]| -> Vec<f64> { sl.test.iter().map(|&i| v[i]).collect() };
    let y_test: Vec<u8> = sl.test.iter().map(|&i| y[i]).collect();
    if !y_test.contains(&1) {
        warn!("test split holds no theft records; AUC metrics are undefined");
    }
    let lstm_scores = pick(&s_raw);
    let lstm_pred: Vec<u8> = lstm_scores.iter().map(|&s| u8::from(s > lstm_threshold)).collect();
    let bundles = vec![
        evaluate_predictions("lstm", &lstm_scores, &y_test, &lstm_pred, lstm_threshold).map_err(at(Stage::Evaluate))?,
        evaluate("gcn", &pick(&p_gnn), &y_test, 0.5).map_err(at(Stage::Evaluate))?,
        evaluate("rf", &pick(&p_rf), &y_test, 0.5).map_err(at(Stage::Evaluate))?,
        evaluate_predictions("hybrid", &pick(&hybrid), &y_test, &pick_u8(&flags, &sl.test), tau.tau)
            .map_err(at(Stage::Evaluate))?,
    ];
    emit_reports(&bundles, &dir.join("reports")).map_err(out_err(Stage::Evaluate))?;
    let metrics: BTreeMap<String, HeadlineMetrics> = bundles.iter().map(|b| (b.model.clone(), headline(b))).collect();
    checksums.insert(
        Stage::Evaluate.to_string(),
        sha(serde_json::to_string(&metrics).expect("metrics serialize").as_bytes()),
    );
    timer.lap(Stage::Evaluate);

    let manifest = RunManifest {
        config_hash: cfg.hash(),
        input_sha256,
        seed: cfg.seed,
        stage_seeds,
        records: d.len(),
        theft_records,
        split: SplitSummary {
            fit: sl.fit.len(),
            calibration: sl.calibration.len(),
            test: sl.test.len(),
        },
        feature_names: x.names.clone(),
        fusion: cfg.fusion,
        threshold: tau,
        lstm_threshold,
        metrics,
        stage_checksums: checksums,
        files: list_files(dir).map_err(out_err(Stage::Evaluate))?,
    };
    write_file(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes").as_bytes(),
    )
    .map_err(out_err(Stage::Evaluate))?;
    write_file(
        &dir.join("timings.json"),
        serde_json::to_string_pretty(&timer.laps).expect("timings serialize").as_bytes(),
    )
    .map_err(out_err(Stage::Evaluate))?;
    Ok((manifest, timer.laps))
}

fn pick_u8(v: &[u8], rows: &[usize]) -> Vec<u8> {
    rows.iter().map(|&i| v[i]).collect()
}

/// Relative path and digest of every file under `dir`, sorted by path.
fn list_files(dir: &Path) -> Result<Vec<FileEntry>, OutputError> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(io_err(&d))? {
            let path = entry.map_err(io_err(&d))?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let rel = path.strip_prefix(dir).expect("under dir");
            out.push(FileEntry {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                sha256: sha(&bytes),
                bytes: bytes.len() as u64,
            });
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}
