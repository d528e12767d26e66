//! End-to-end experiments: selection of traversals, the detect → featurize →
//! PCA → ridge → Kalman pipeline, evaluation reports and parameter sweeps.
//!
//! PCA and readout are fitted on training traversals only; test traversals
//! enter solely through [`predict_features`].

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, save_model, LabeledDataset, ModelBundle, StepRef, WaveformRecord};
use crate::detect::{detect, DetectionConfig};
use crate::eval::{
    confusion_matrix, fisher_ratio, rmse, scatter_svg, sensor_feature, Axis, BinSpec, ConfusionMatrix, Prediction,
    Rmse, Which, DEFAULT_FISHER_CAP,
};
use crate::features::{reservoir_state, WindowConfig, DEFAULT_WINDOW_S, VECTORIZATION_ORDER};
use crate::readout::{train_ridge, RidgeStrength, TrainingSet};
use crate::subspace::fit_pca;
use crate::tracking::{filter_track, KfConfig};
use crate::{Error, Result};

/// Reduced dimension: a fixed `D` (clamped to the available rank) or the
/// smallest `D` reaching a retained-variance target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Dimension {
    Fixed(usize),
    Eta(f64),
}

impl Default for Dimension {
    fn default() -> Self {
        Dimension::Fixed(60)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub window_s: f64,
    pub detection: DetectionConfig,
    pub dimension: Dimension,
    pub ridge: RidgeStrength,
    pub rms_normalize: bool,
    pub center: bool,
    pub free_bias: bool,
    /// Fixed; recorded so snapshots are self-describing.
    pub vectorization: String,
    /// Sensor ids used for features, in this order; `None` keeps the layout.
    pub sensors: Option<Vec<String>>,
    /// Largest event-to-label distance accepted as a match.
    pub match_tolerance_s: f64,
    pub kalman: Option<KfConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            window_s: DEFAULT_WINDOW_S,
            detection: DetectionConfig::default(),
            dimension: Dimension::default(),
            ridge: RidgeStrength::default(),
            rms_normalize: true,
            center: false,
            free_bias: false,
            vectorization: VECTORIZATION_ORDER.to_string(),
            sensors: None,
            match_tolerance_s: 0.1,
            kalman: Some(KfConfig::default()),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.detection.validate()?;
        if !(self.window_s.is_finite() && self.window_s > 0.0) {
            return Err(Error::Config(format!("window length must be positive, got {}", self.window_s)));
        }
        if self.vectorization != VECTORIZATION_ORDER {
            return Err(Error::Config(format!(
                "unsupported vectorization {:?}, only {VECTORIZATION_ORDER:?}",
                self.vectorization
            )));
        }
        match self.dimension {
            Dimension::Fixed(0) => return Err(Error::Config("reduced dimension must be >= 1".into())),
            Dimension::Eta(t) if !(t > 0.0 && t <= 1.0) => {
                return Err(Error::Config(format!("retained-variance target must lie in (0, 1], got {t}")))
            }
            _ => {}
        }
        let eps = match self.ridge {
            RidgeStrength::Relative(v) | RidgeStrength::Absolute(v) => v,
        };
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::Config(format!("ridge strength must be >= 0, got {eps}")));
        }
        if !(self.match_tolerance_s.is_finite() && self.match_tolerance_s > 0.0) {
            return Err(Error::Config("match tolerance must be positive".into()));
        }
        if let Some(ids) = &self.sensors {
            if ids.is_empty() {
                return Err(Error::Config("sensor subset is empty".into()));
            }
            let unique: HashSet<&String> = ids.iter().collect();
            if unique.len() != ids.len() {
                return Err(Error::Config("sensor subset lists an id twice".into()));
            }
        }
        if let Some(kf) = &self.kalman {
            kf.validate()?;
        }
        Ok(())
    }
}

/// Picks traversals of one subject: `S1:Tr1-3`, `S1:Tr2,Tr5`, `S1:*` or `S1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Selector {
    pub subject: String,
    /// `None` selects every traversal of the subject.
    pub traversals: Option<Vec<String>>,
}

impl Selector {
    pub fn matches(&self, subject: &str, traversal: &str) -> bool {
        self.subject == subject && self.traversals.as_ref().is_none_or(|t| t.iter().any(|x| x == traversal))
    }
}

fn split_prefix(s: &str) -> (&str, &str) {
    let digits = s.trim_end_matches(|c: char| c.is_ascii_digit());
    (digits, &s[digits.len()..])
}

impl FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = |why: &str| Error::Config(format!("bad selector {s:?}: {why}"));
        let (subject, rest) = match s.split_once(':') {
            Some((a, b)) => (a.trim(), Some(b.trim())),
            None => (s.trim(), None),
        };
        if subject.is_empty() {
            return Err(bad("missing subject"));
        }
        let traversals = match rest {
            None | Some("*") => None,
            Some("") => return Err(bad("empty traversal list")),
            Some(list) => {
                let mut out = Vec::new();
                for item in list.split(',').map(str::trim) {
                    match item.split_once('-') {
                        Some((a, b)) => {
                            let (prefix, lo) = split_prefix(a.trim());
                            let hi = b.trim().trim_start_matches(prefix);
                            let lo: u32 = lo.parse().map_err(|_| bad("range start is not numbered"))?;
                            let hi: u32 = hi.parse().map_err(|_| bad("range end is not numbered"))?;
                            if hi < lo {
                                return Err(bad("descending range"));
                            }
                            out.extend((lo..=hi).map(|i| format!("{prefix}{i}")));
                        }
                        None if item.is_empty() => return Err(bad("empty traversal id")),
                        None => out.push(item.to_string()),
                    }
                }
                Some(out)
            }
        };
        Ok(Selector {
            subject: subject.to_string(),
            traversals,
        })
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.traversals {
            None => write!(f, "{}:*", self.subject),
            Some(t) => write!(f, "{}:{}", self.subject, t.join(",")),
        }
    }
}

impl TryFrom<String> for Selector {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Selector> for String {
    fn from(s: Selector) -> String {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub x_bin_pitch: f64,
    pub y_bin_pitch: f64,
    pub fisher_cap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            x_bin_pitch: 1.0,
            y_bin_pitch: 0.15,
            fisher_cap: DEFAULT_FISHER_CAP,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    /// Manifest files, dataset directories, or directories of datasets.
    pub datasets: Vec<PathBuf>,
    pub train: Vec<Selector>,
    #[serde(default)]
    pub test: Vec<Selector>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    42
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if self.train.is_empty() {
            return Err(Error::Config("no training selector".into()));
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Loads every dataset named by `paths`. A directory without a manifest is
/// scanned one level deep, in sorted order.
pub fn load_datasets(paths: &[PathBuf]) -> Result<Vec<LabeledDataset>> {
    let mut manifests = Vec::new();
    for p in paths {
        if p.is_dir() {
            let direct = p.join("manifest.json");
            if direct.is_file() {
                manifests.push(direct);
                continue;
            }
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path().join("manifest.json")))
                .filter(|m| m.is_file())
                .collect();
            if found.is_empty() {
                return Err(Error::Config(format!("{} holds no dataset", p.display())));
            }
            found.sort();
            manifests.extend(found);
        } else {
            manifests.push(p.clone());
        }
    }
    manifests.iter().map(load_dataset).collect()
}

fn session_name(ds: &LabeledDataset) -> String {
    ds.session().map_or_else(|| "<unlabeled>".to_string(), |(s, t)| format!("{s}:{t}"))
}

/// Partitions datasets by selector. A dataset matched by both sides is a
/// configuration error, as is a selector matching nothing.
pub fn select_datasets<'a>(
    datasets: &'a [LabeledDataset],
    train: &[Selector],
    test: &[Selector],
) -> Result<(Vec<&'a LabeledDataset>, Vec<&'a LabeledDataset>)> {
    let hit = |sels: &[Selector], ds: &LabeledDataset| ds.session().is_some_and(|(s, t)| sels.iter().any(|x| x.matches(s, t)));
    for sel in train.iter().chain(test) {
        if !datasets.iter().any(|d| hit(std::slice::from_ref(sel), d)) {
            return Err(Error::Config(format!("selector {sel} matches no dataset")));
        }
    }
    let mut tr = Vec::new();
    let mut te = Vec::new();
    for ds in datasets {
        match (hit(train, ds), hit(test, ds)) {
            (true, true) => {
                return Err(Error::Config(format!(
                    "{} is selected for both training and testing",
                    session_name(ds)
                )))
            }
            (true, false) => tr.push(ds),
            (false, true) => te.push(ds),
            (false, false) => {}
        }
    }
    Ok((tr, te))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionStats {
    pub session: String,
    pub events: usize,
    pub matched: usize,
    /// Events with no label within tolerance, or beaten by a closer event.
    pub unmatched: usize,
    /// Labels no event was matched to.
    pub missed: usize,
    /// Matched events too early in the record for a full window.
    pub short_history: usize,
}

/// Pairs events with labels: each event takes its nearest label if within
/// `tol`, and each label keeps only its closest event. Returns
/// `(event index, label index)` pairs in event order.
pub fn match_events(event_times: &[f64], label_times: &[f64], tol: f64) -> Vec<(usize, usize)> {
    let mut best: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (e, &t) in event_times.iter().enumerate() {
        let pos = label_times.partition_point(|&l| l < t);
        let nearest = [pos.checked_sub(1), Some(pos)]
            .into_iter()
            .flatten()
            .filter(|&i| i < label_times.len())
            .min_by(|&a, &b| (label_times[a] - t).abs().total_cmp(&(label_times[b] - t).abs()));
        if let Some(l) = nearest {
            let d = (label_times[l] - t).abs();
            if d <= tol && best.get(&l).is_none_or(|&(bd, _)| d < bd) {
                best.insert(l, (d, e));
            }
        }
    }
    let mut pairs: Vec<(usize, usize)> = best.into_iter().map(|(l, (_, e))| (e, l)).collect();
    pairs.sort_unstable();
    pairs
}

/// Reservoir states of one traversal's matched steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Featurized {
    /// `N x d`, one state per row.
    pub states: DMatrix<f64>,
    pub steps: Vec<StepRef>,
    pub truth: Vec<[f64; 2]>,
    /// Window end sample of each step.
    pub samples: Vec<usize>,
    pub stats: DetectionStats,
    pub sensor_ids: Vec<String>,
    pub sample_rate_hz: f64,
}

fn feature_record(record: &WaveformRecord, sensors: Option<&[String]>) -> Result<WaveformRecord> {
    match sensors {
        None => Ok(record.clone()),
        Some(ids) => Ok(record.select_sensors(&record.layout().indices_of(ids)?)),
    }
}

/// Detects on the full layout, matches events to labels, and featurizes on
/// the configured sensor subset.
pub fn featurize_dataset(ds: &LabeledDataset, cfg: &PipelineConfig) -> Result<Featurized> {
    let full = ds.record();
    let record = feature_record(full, cfg.sensors.as_deref())?;
    let window = WindowConfig::for_record(cfg.window_s, &record)?;
    let events = detect(full, &cfg.detection)?;
    let event_times: Vec<f64> = events.timestamps.iter().map(|&s| full.time_of(s)).collect();
    let label_times: Vec<f64> = ds.labels().iter().map(|l| l.timestamp_s).collect();
    let pairs = match_events(&event_times, &label_times, cfg.match_tolerance_s);

    let mut stats = DetectionStats {
        session: session_name(ds),
        events: events.len(),
        matched: 0,
        unmatched: events.len() - pairs.len(),
        missed: ds.labels().len() - pairs.len(),
        short_history: 0,
    };
    let mut rows = Vec::with_capacity(pairs.len());
    let mut steps = Vec::new();
    let mut truth = Vec::new();
    let mut samples = Vec::new();
    for (e, l) in pairs {
        let s_k = events.timestamps[e];
        let state = match reservoir_state(&record, s_k, &window, cfg.rms_normalize) {
            Err(Error::InsufficientHistory { .. }) => {
                stats.short_history += 1;
                continue;
            }
            other => other?,
        };
        let label = &ds.labels()[l];
        rows.push(state.values.transpose());
        steps.push(label.step_ref());
        truth.push([label.x, label.y]);
        samples.push(s_k);
    }
    stats.matched = rows.len();
    if rows.is_empty() {
        return Err(Error::NoSteps(stats.session));
    }
    Ok(Featurized {
        states: DMatrix::from_rows(&rows),
        steps,
        truth,
        samples,
        stats,
        sensor_ids: record.layout().ids(),
        sample_rate_hz: record.sample_rate_hz(),
    })
}

/// Fits PCA and readout on the stacked training states.
pub fn fit_model(cfg: &PipelineConfig, train: &[&Featurized]) -> Result<(ModelBundle, Vec<f64>)> {
    cfg.validate()?;
    let first = train.first().ok_or(Error::Empty("training traversals"))?;
    for f in train {
        if f.sensor_ids != first.sensor_ids || f.sample_rate_hz != first.sample_rate_hz {
            return Err(Error::DimensionMismatch(format!(
                "{} uses sensors {:?} at {} Hz, {} uses {:?} at {} Hz",
                first.stats.session, first.sensor_ids, first.sample_rate_hz, f.stats.session, f.sensor_ids, f.sample_rate_hz
            )));
        }
    }
    let n: usize = train.iter().map(|f| f.states.nrows()).sum();
    let d = first.states.ncols();
    let mut states = DMatrix::zeros(n, d);
    let mut truth = Vec::with_capacity(n);
    let mut row = 0;
    for f in train {
        states.rows_mut(row, f.states.nrows()).copy_from(&f.states);
        row += f.states.nrows();
        truth.extend_from_slice(&f.truth);
    }

    let pca = fit_pca(&states, cfg.center)?;
    let eta = pca.eta_curve()?;
    let dim = match cfg.dimension {
        Dimension::Fixed(k) => k.min(pca.components()),
        Dimension::Eta(target) => pca.choose_dimension(target)?,
    };
    let pca = pca.truncated(dim)?;
    let z = pca.project_rows(&states, dim)?;
    let ts = TrainingSet::new(&z, &truth)?;
    let readout = train_ridge(&ts, cfg.ridge.resolve(&ts), cfg.free_bias)?;
    let bundle = ModelBundle::new(pca, readout, cfg.clone(), first.sensor_ids.clone(), first.sample_rate_hz)?;
    Ok((bundle, eta))
}

/// Predicts every step of one traversal, then optionally smooths the track.
pub fn predict_features(bundle: &ModelBundle, f: &Featurized) -> Result<Vec<Prediction>> {
    if f.sensor_ids != bundle.sensor_ids || f.sample_rate_hz != bundle.sample_rate_hz {
        return Err(Error::DimensionMismatch(format!(
            "model expects sensors {:?} at {} Hz, {} has {:?} at {} Hz",
            bundle.sensor_ids, bundle.sample_rate_hz, f.stats.session, f.sensor_ids, f.sample_rate_hz
        )));
    }
    let raw = bundle.predict_rows(&f.states)?;
    let filtered = match &bundle.config.kalman {
        Some(kf) => Some(filter_track(&raw, kf)?),
        None => None,
    };
    Ok(raw
        .into_iter()
        .enumerate()
        .map(|(i, p)| Prediction {
            step: f.steps[i].clone(),
            truth: f.truth[i],
            predicted: p,
            filtered: filtered.as_ref().map(|v| v[i]),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub steps: usize,
    pub raw: Rmse,
    pub filtered: Option<Rmse>,
}

fn split_metrics(preds: &[&Prediction]) -> Result<SplitMetrics> {
    let owned: Vec<Prediction> = preds.iter().map(|p| (*p).clone()).collect();
    let filtered = if owned.iter().all(|p| p.filtered.is_some()) {
        Some(rmse(&owned, Which::Filtered)?)
    } else {
        None
    };
    Ok(SplitMetrics {
        steps: owned.len(),
        raw: rmse(&owned, Which::Raw)?,
        filtered,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherRow {
    pub sensor: String,
    pub j_x: f64,
    pub j_y: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dimension: usize,
    pub epsilon: f64,
    pub train: SplitMetrics,
    pub test: Option<SplitMetrics>,
    pub detection: Vec<DetectionStats>,
    pub confusion_x_diagonal: f64,
    pub confusion_y_diagonal: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub config: PipelineConfig,
    pub eval: EvalConfig,
    pub model: ModelBundle,
    pub eta_curve: Vec<f64>,
    pub predictions: Vec<(Split, Prediction)>,
    pub metrics: Metrics,
    /// Built from test predictions, or training ones when no test split.
    pub confusion_x: ConfusionMatrix,
    pub confusion_y: ConfusionMatrix,
    /// Sensor observability over every selected traversal; `None` when the
    /// positions do not span two bins on an axis.
    pub fisher: Option<Vec<FisherRow>>,
}

fn fisher_table(
    data: &[(&LabeledDataset, &Featurized)],
    cfg: &PipelineConfig,
    eval: &EvalConfig,
) -> Result<Option<Vec<FisherRow>>> {
    let mut blocks = Vec::new();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut ids = Vec::new();
    for (ds, f) in data {
        let record = feature_record(ds.record(), cfg.sensors.as_deref())?;
        let window = WindowConfig::for_record(cfg.window_s, &record)?;
        blocks.push(sensor_feature(&record, &f.samples, &window)?);
        xs.extend(f.truth.iter().map(|p| p[0]));
        ys.extend(f.truth.iter().map(|p| p[1]));
        ids = f.sensor_ids.clone();
    }
    let n: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut features = DMatrix::zeros(n, ids.len());
    let mut row = 0;
    for b in &blocks {
        features.rows_mut(row, b.nrows()).copy_from(b);
        row += b.nrows();
    }
    let bx = BinSpec::covering(Axis::X, xs.iter().copied(), eval.x_bin_pitch)?;
    let by = BinSpec::covering(Axis::Y, ys.iter().copied(), eval.y_bin_pitch)?;
    let cx: Vec<usize> = xs.iter().map(|&v| bx.bin_of(v)).collect();
    let cy: Vec<usize> = ys.iter().map(|&v| by.bin_of(v)).collect();
    let distinct = |c: &[usize]| c.iter().collect::<HashSet<_>>().len();
    if distinct(&cx) < 2 || distinct(&cy) < 2 {
        return Ok(None);
    }
    let jx = fisher_ratio(&features, &cx, eval.fisher_cap)?;
    let jy = fisher_ratio(&features, &cy, eval.fisher_cap)?;
    Ok(Some(
        ids.into_iter()
            .zip(jx.into_iter().zip(jy))
            .map(|(sensor, (j_x, j_y))| FisherRow { sensor, j_x, j_y })
            .collect(),
    ))
}

/// Split metrics and confusion matrices of a prediction list.
#[derive(Debug, Clone, PartialEq)]
pub struct Scores {
    pub train: SplitMetrics,
    pub test: Option<SplitMetrics>,
    /// Built from test predictions, or training ones when no test split.
    pub confusion_x: ConfusionMatrix,
    pub confusion_y: ConfusionMatrix,
}

pub fn score_predictions(predictions: &[(Split, Prediction)], eval: &EvalConfig) -> Result<Scores> {
    let of = |s: Split| -> Vec<&Prediction> { predictions.iter().filter(|(x, _)| *x == s).map(|(_, p)| p).collect() };
    let train_preds = of(Split::Train);
    let test_preds = of(Split::Test);
    if train_preds.is_empty() && test_preds.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    let train = if train_preds.is_empty() {
        // test-only lists still need a primary split
        split_metrics(&test_preds)?
    } else {
        split_metrics(&train_preds)?
    };
    let test = if test_preds.is_empty() || train_preds.is_empty() {
        None
    } else {
        Some(split_metrics(&test_preds)?)
    };
    let eval_preds: Vec<Prediction> = if test_preds.is_empty() { train_preds } else { test_preds }
        .into_iter()
        .cloned()
        .collect();
    let bins = |axis: Axis, pitch: f64| BinSpec::covering(axis, eval_preds.iter().map(|p| p.truth[axis.index()]), pitch);
    Ok(Scores {
        train,
        test,
        confusion_x: confusion_matrix(&eval_preds, &bins(Axis::X, eval.x_bin_pitch)?, Which::Raw)?,
        confusion_y: confusion_matrix(&eval_preds, &bins(Axis::Y, eval.y_bin_pitch)?, Which::Raw)?,
    })
}

/// Sensor Fisher ratios over the matched steps of `datasets`.
pub fn fisher_for_datasets(
    datasets: &[&LabeledDataset],
    cfg: &PipelineConfig,
    eval: &EvalConfig,
) -> Result<Option<Vec<FisherRow>>> {
    let feats: Vec<Featurized> = datasets.par_iter().map(|d| featurize_dataset(d, cfg)).collect::<Result<_>>()?;
    let pairs: Vec<(&LabeledDataset, &Featurized)> = datasets.iter().copied().zip(&feats).collect();
    fisher_table(&pairs, cfg, eval)
}

/// Runs the full pipeline on in-memory datasets. `train` and `test` need not
/// be disjoint at this level.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    eval: &EvalConfig,
    train: &[&LabeledDataset],
    test: &[&LabeledDataset],
) -> Result<ExperimentReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("no training traversal selected".into()));
    }
    let featurize = |set: &[&LabeledDataset]| -> Result<Vec<Featurized>> {
        set.par_iter().map(|ds| featurize_dataset(ds, cfg)).collect()
    };
    let train_f = featurize(train)?;
    let test_f = featurize(test)?;

    let refs: Vec<&Featurized> = train_f.iter().collect();
    let (model, eta_curve) = fit_model(cfg, &refs)?;

    let mut predictions = Vec::new();
    for (split, set) in [(Split::Train, &train_f), (Split::Test, &test_f)] {
        for f in set {
            predictions.extend(predict_features(&model, f)?.into_iter().map(|p| (split, p)));
        }
    }
    let scores = score_predictions(&predictions, eval)?;

    let pairs: Vec<(&LabeledDataset, &Featurized)> = train
        .iter()
        .zip(&train_f)
        .chain(test.iter().zip(&test_f))
        .map(|(d, f)| (*d, f))
        .collect();
    let fisher = fisher_table(&pairs, cfg, eval)?;

    let metrics = Metrics {
        dimension: model.pca.components(),
        epsilon: model.readout.epsilon(),
        train: scores.train,
        test: scores.test,
        detection: train_f.iter().chain(&test_f).map(|f| f.stats.clone()).collect(),
        confusion_x_diagonal: scores.confusion_x.diagonal_mass(),
        confusion_y_diagonal: scores.confusion_y.diagonal_mass(),
    };
    Ok(ExperimentReport {
        config: cfg.clone(),
        eval: eval.clone(),
        model,
        eta_curve,
        predictions,
        metrics,
        confusion_x: scores.confusion_x,
        confusion_y: scores.confusion_y,
        fisher,
    })
}

/// Loads, selects and runs an experiment described by `cfg`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let datasets = load_datasets(&cfg.datasets)?;
    run_selected(cfg, &datasets)
}

/// As [`run_experiment`] with the datasets already in memory.
pub fn run_selected(cfg: &ExperimentConfig, datasets: &[LabeledDataset]) -> Result<ExperimentReport> {
    cfg.validate()?;
    let (train, test) = select_datasets(datasets, &cfg.train, &cfg.test)?;
    run_pipeline(&cfg.pipeline, &cfg.eval, &train, &test)
}

fn fmt_opt(v: Option<[f64; 2]>, i: usize) -> String {
    v.map_or_else(String::new, |p| p[i].to_string())
}

pub fn predictions_csv(preds: &[(Split, Prediction)]) -> String {
    let mut out = String::from("k,subject,traversal,x,y,x_hat,y_hat,x_kf,y_kf,split\n");
    for (split, p) in preds {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            p.step.k,
            p.step.subject,
            p.step.traversal,
            p.truth[0],
            p.truth[1],
            p.predicted[0],
            p.predicted[1],
            fmt_opt(p.filtered, 0),
            fmt_opt(p.filtered, 1),
            split.as_str()
        ));
    }
    out
}

#[derive(Deserialize)]
struct PredictionRow {
    k: u32,
    subject: String,
    traversal: String,
    x: f64,
    y: f64,
    x_hat: f64,
    y_hat: f64,
    x_kf: Option<f64>,
    y_kf: Option<f64>,
    split: Split,
}

/// Parses a file written by [`predictions_csv`].
pub fn read_predictions_csv(path: &Path) -> Result<Vec<(Split, Prediction)>> {
    let parse = |msg: String| Error::Parse {
        path: path.to_path_buf(),
        msg,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse(e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.deserialize::<PredictionRow>() {
        let r = row.map_err(|e| parse(e.to_string()))?;
        let filtered = match (r.x_kf, r.y_kf) {
            (Some(a), Some(b)) => Some([a, b]),
            (None, None) => None,
            _ => return Err(parse(format!("step {} has half a filtered estimate", r.k))),
        };
        let values = [r.x, r.y, r.x_hat, r.y_hat];
        if values.iter().chain(filtered.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(parse(format!("step {} has non-finite coordinates", r.k)));
        }
        out.push((
            r.split,
            Prediction {
                step: StepRef {
                    subject: r.subject,
                    traversal: r.traversal,
                    k: r.k,
                },
                truth: [r.x, r.y],
                predicted: [r.x_hat, r.y_hat],
                filtered,
            },
        ));
    }
    Ok(out)
}

pub fn eta_csv(eta: &[f64]) -> String {
    let mut out = String::from("D,eta\n");
    for (i, v) in eta.iter().enumerate() {
        out.push_str(&format!("{},{v}\n", i + 1));
    }
    out
}

pub fn fisher_csv(rows: &[FisherRow]) -> String {
    let mut out = String::from("sensor,J_x,J_y\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.sensor, r.j_x, r.j_y));
    }
    out
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report types serialize");
    s.push('\n');
    s
}

/// Writes the run directory. `snapshot` is stored verbatim as `config.json`.
pub fn write_run_dir<T: Serialize>(report: &ExperimentReport, snapshot: &T, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("config.json"), to_json(snapshot))?;
    write(&dir.join("metrics.json"), to_json(&report.metrics))?;
    write(&dir.join("predictions.csv"), predictions_csv(&report.predictions))?;
    write(&dir.join("eta_curve.csv"), eta_csv(&report.eta_curve))?;
    write(&dir.join("confusion_x.csv"), report.confusion_x.to_csv())?;
    write(&dir.join("confusion_y.csv"), report.confusion_y.to_csv())?;
    if let Some(rows) = &report.fisher {
        write(&dir.join("fisher.csv"), fisher_csv(rows))?;
    }
    let preds: Vec<Prediction> = report.predictions.iter().map(|(_, p)| p.clone()).collect();
    write(&dir.join("scatter.svg"), scatter_svg(&preds, Axis::X))?;
    save_model(&report.model, &dir.join("model.json"))
}

/// Mean and population standard deviation of test RMSE over repeats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: usize,
    pub repeats: usize,
    pub mean: Rmse,
    pub std: Rmse,
}

fn binomial(n: usize, k: usize) -> u128 {
    let k = k.min(n - k);
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i + 1) as u128)
}

fn all_combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// `repeats` distinct sorted `k`-subsets of `0..n`; every subset when there
/// are no more than `repeats` of them.
pub fn draw_subsets(n: usize, k: usize, repeats: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > n {
        return Err(Error::Config(format!("subset size {k} outside 1..={n}")));
    }
    if repeats == 0 {
        return Err(Error::Config("at least one repeat is required".into()));
    }
    if binomial(n, k) <= repeats as u128 {
        return Ok(all_combinations(n, k));
    }
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(repeats);
    while out.len() < repeats {
        let mut s = sample(rng, n, k).into_vec();
        s.sort_unstable();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

fn summarize(value: usize, runs: &[Rmse]) -> SweepRow {
    let n = runs.len() as f64;
    let stat = |f: fn(&Rmse) -> f64| {
        let mean = runs.iter().map(f).sum::<f64>() / n;
        let var = runs.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / n;
        (mean, var.sqrt())
    };
    let (mt, st) = stat(|r| r.total);
    let (mx, sx) = stat(|r| r.x);
    let (my, sy) = stat(|r| r.y);
    SweepRow {
        value,
        repeats: runs.len(),
        mean: Rmse { total: mt, x: mx, y: my },
        std: Rmse { total: st, x: sx, y: sy },
    }
}

fn test_rmse(bundle: &ModelBundle, test: &[Featurized]) -> Result<Rmse> {
    let mut preds = Vec::new();
    for f in test {
        preds.extend(predict_features(bundle, f)?);
    }
    rmse(&preds, Which::Raw)
}

/// Test RMSE against the number of training traversals drawn from `pool`.
pub fn sweep_training_size(
    cfg: &PipelineConfig,
    pool: &[&LabeledDataset],
    test: &[&LabeledDataset],
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(Error::Config("training-size sweep needs test traversals".into()));
    }
    let pool_f: Vec<Featurized> = pool.par_iter().map(|d| featurize_dataset(d, cfg)).collect::<Result<_>>()?;
    let test_f: Vec<Featurized> = test.par_iter().map(|d| featurize_dataset(d, cfg)).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans: Vec<(usize, Vec<Vec<usize>>)> = sizes
        .iter()
        .map(|&k| Ok((k, draw_subsets(pool_f.len(), k, repeats, &mut rng)?)))
        .collect::<Result<_>>()?;
    plans
        .iter()
        .map(|(k, subsets)| {
            let runs: Vec<Rmse> = subsets
                .par_iter()
                .map(|s| {
                    let train: Vec<&Featurized> = s.iter().map(|&i| &pool_f[i]).collect();
                    test_rmse(&fit_model(cfg, &train)?.0, &test_f)
                })
                .collect::<Result<_>>()?;
            Ok(summarize(*k, &runs))
        })
        .collect()
}

/// Test RMSE against the number of sensors drawn from `sensor_ids`.
pub fn sweep_sensor_count(
    cfg: &PipelineConfig,
    train: &[&LabeledDataset],
    test: &[&LabeledDataset],
    sensor_ids: &[String],
    counts: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    if test.is_empty() {
        return Err(Error::Config("sensor-count sweep needs test traversals".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plans: Vec<(usize, Vec<Vec<usize>>)> = counts
        .iter()
        .map(|&k| Ok((k, draw_subsets(sensor_ids.len(), k, repeats, &mut rng)?)))
        .collect::<Result<_>>()?;
    plans
        .iter()
        .map(|(k, subsets)| {
            let runs: Vec<Rmse> = subsets
                .par_iter()
                .map(|s| {
                    let sub = PipelineConfig {
                        sensors: Some(s.iter().map(|&i| sensor_ids[i].clone()).collect()),
                        ..cfg.clone()
                    };
                    let train_f: Vec<Featurized> =
                        train.iter().map(|d| featurize_dataset(d, &sub)).collect::<Result<_>>()?;
                    let test_f: Vec<Featurized> =
                        test.iter().map(|d| featurize_dataset(d, &sub)).collect::<Result<_>>()?;
                    let refs: Vec<&Featurized> = train_f.iter().collect();
                    test_rmse(&fit_model(&sub, &refs)?.0, &test_f)
                })
                .collect::<Result<_>>()?;
            Ok(summarize(*k, &runs))
        })
        .collect()
}

pub fn sweep_csv(parameter: &str, rows: &[SweepRow]) -> String {
    let mut out = format!("{parameter},repeats,rmse_total_mean,rmse_total_std,rmse_x_mean,rmse_x_std,rmse_y_mean,rmse_y_std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.value, r.repeats, r.mean.total, r.std.total, r.mean.x, r.std.x, r.mean.y, r.std.y
        ));
    }
    out
}
