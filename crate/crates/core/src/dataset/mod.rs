//! Recordings, sensor layouts, ground-truth labels and their on-disk formats.
//!
//! A dataset directory holds a `manifest.json` naming a layout CSV, a waveform
//! file (CSV or little-endian binary) and a labels CSV. Units are fixed:
//! meters, seconds, m/s².

mod io;
mod model;

use std::collections::HashSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use io::{load_dataset, read_binary_waveform, save_dataset, write_binary_waveform, Manifest};
pub use model::{load_model, save_model, ModelBundle, MODEL_VERSION};

/// Current manifest / binary waveform format version.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WaveformFormat {
    Csv,
    Bin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub id: String,
    #[serde(rename = "x_m")]
    pub x: f64,
    #[serde(rename = "y_m")]
    pub y: f64,
}

impl Sensor {
    pub fn new(id: impl Into<String>, x: f64, y: f64) -> Self {
        Sensor {
            id: id.into(),
            x,
            y,
        }
    }
}

/// Ordered sensor positions plus the shared sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorLayout {
    sensors: Vec<Sensor>,
    sample_rate_hz: f64,
}

impl SensorLayout {
    pub fn new(sensors: Vec<Sensor>, sample_rate_hz: f64) -> Result<Self> {
        if sensors.is_empty() {
            return Err(Error::InvalidLayout("at least one sensor is required".into()));
        }
        if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
            return Err(Error::InvalidLayout(format!(
                "sample rate must be positive, got {sample_rate_hz}"
            )));
        }
        let mut seen = HashSet::new();
        for s in &sensors {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidLayout(format!("duplicate sensor id {:?}", s.id)));
            }
            if !(s.x.is_finite() && s.y.is_finite()) {
                return Err(Error::InvalidLayout(format!(
                    "sensor {:?} has a non-finite position",
                    s.id
                )));
            }
        }
        Ok(SensorLayout {
            sensors,
            sample_rate_hz,
        })
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn ids(&self) -> Vec<String> {
        self.sensors.iter().map(|s| s.id.clone()).collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.sensors.iter().position(|s| s.id == id)
    }

    /// Column indices of `ids`, in the order given.
    pub fn indices_of(&self, ids: &[String]) -> Result<Vec<usize>> {
        if ids.is_empty() {
            return Err(Error::Config("sensor subset must not be empty".into()));
        }
        let mut seen = HashSet::new();
        ids.iter()
            .map(|id| {
                if !seen.insert(id.as_str()) {
                    return Err(Error::Config(format!("sensor {id:?} listed twice")));
                }
                self.index_of(id)
                    .ok_or_else(|| Error::Config(format!("sensor {id:?} is not in the layout")))
            })
            .collect()
    }

    fn select(&self, indices: &[usize]) -> SensorLayout {
        SensorLayout {
            sensors: indices.iter().map(|&i| self.sensors[i].clone()).collect(),
            sample_rate_hz: self.sample_rate_hz,
        }
    }
}

/// Synchronized multi-channel acceleration record: `T` rows by `N_s` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveformRecord {
    layout: SensorLayout,
    samples: DMatrix<f64>,
    start_time_s: f64,
}

impl WaveformRecord {
    pub fn new(layout: SensorLayout, samples: DMatrix<f64>, start_time_s: f64) -> Result<Self> {
        if samples.ncols() != layout.len() {
            return Err(Error::ChannelMismatch {
                expected: layout.len(),
                found: samples.ncols(),
            });
        }
        // column-major storage: index = channel * T + row
        let rows = samples.nrows();
        if let Some(pos) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteSample {
                row: pos % rows,
                channel: pos / rows,
            });
        }
        if !start_time_s.is_finite() {
            return Err(Error::NonFinite("record start time".into()));
        }
        Ok(WaveformRecord {
            layout,
            samples,
            start_time_s,
        })
    }

    pub fn layout(&self) -> &SensorLayout {
        &self.layout
    }

    pub fn samples(&self) -> &DMatrix<f64> {
        &self.samples
    }

    pub fn start_time_s(&self) -> f64 {
        self.start_time_s
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.layout.sample_rate_hz
    }

    pub fn num_samples(&self) -> usize {
        self.samples.nrows()
    }

    pub fn num_sensors(&self) -> usize {
        self.samples.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.nrows() == 0
    }

    pub fn duration_s(&self) -> f64 {
        self.num_samples() as f64 / self.sample_rate_hz()
    }

    pub fn time_of(&self, sample: usize) -> f64 {
        self.start_time_s + sample as f64 / self.sample_rate_hz()
    }

    /// Nearest sample index for an absolute timestamp, clamped to the record.
    pub fn sample_at(&self, t_s: f64) -> usize {
        let idx = ((t_s - self.start_time_s) * self.sample_rate_hz()).round();
        (idx.max(0.0) as usize).min(self.num_samples().saturating_sub(1))
    }

    /// Restricts the record to the given channels, in that order.
    pub fn select_sensors(&self, indices: &[usize]) -> WaveformRecord {
        WaveformRecord {
            layout: self.layout.select(indices),
            samples: self.samples.select_columns(indices),
            start_time_s: self.start_time_s,
        }
    }

    pub fn scaled(&self, factor: f64) -> WaveformRecord {
        WaveformRecord {
            layout: self.layout.clone(),
            samples: &self.samples * factor,
            start_time_s: self.start_time_s,
        }
    }
}

/// Ground-truth position and timing of one foot strike.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootstepLabel {
    #[serde(rename = "k")]
    pub step_index: u32,
    #[serde(rename = "t_s")]
    pub timestamp_s: f64,
    #[serde(rename = "x_m")]
    pub x: f64,
    #[serde(rename = "y_m")]
    pub y: f64,
    pub subject: String,
    pub traversal: String,
}

/// Identifies a step across datasets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StepRef {
    pub subject: String,
    pub traversal: String,
    pub k: u32,
}

impl FootstepLabel {
    pub fn step_ref(&self) -> StepRef {
        StepRef {
            subject: self.subject.clone(),
            traversal: self.traversal.clone(),
            k: self.step_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    record: WaveformRecord,
    labels: Vec<FootstepLabel>,
}

impl LabeledDataset {
    pub fn new(record: WaveformRecord, labels: Vec<FootstepLabel>) -> Result<Self> {
        let t0 = record.start_time_s();
        let t1 = t0 + record.duration_s();
        let mut seen = HashSet::new();
        for (i, l) in labels.iter().enumerate() {
            if !(l.timestamp_s.is_finite() && l.x.is_finite() && l.y.is_finite()) {
                return Err(Error::InvalidLabels(format!(
                    "label {i} has non-finite fields"
                )));
            }
            if l.timestamp_s < t0 || l.timestamp_s > t1 {
                return Err(Error::InvalidLabels(format!(
                    "label {i} at {} s lies outside the record [{t0}, {t1}] s",
                    l.timestamp_s
                )));
            }
            if i > 0 && l.timestamp_s < labels[i - 1].timestamp_s {
                return Err(Error::InvalidLabels(format!(
                    "labels are not sorted by timestamp at row {i}"
                )));
            }
            if !seen.insert((l.subject.as_str(), l.traversal.as_str(), l.step_index)) {
                return Err(Error::InvalidLabels(format!(
                    "duplicate step {}:{}:{}",
                    l.subject, l.traversal, l.step_index
                )));
            }
        }
        Ok(LabeledDataset { record, labels })
    }

    pub fn record(&self) -> &WaveformRecord {
        &self.record
    }

    pub fn labels(&self) -> &[FootstepLabel] {
        &self.labels
    }

    /// `(subject, traversal)` of the first label, if any.
    pub fn session(&self) -> Option<(&str, &str)> {
        self.labels
            .first()
            .map(|l| (l.subject.as_str(), l.traversal.as_str()))
    }

    /// Same labels over a rescaled record.
    pub fn scaled(&self, factor: f64) -> LabeledDataset {
        LabeledDataset {
            record: self.record.scaled(factor),
            labels: self.labels.clone(),
        }
    }

    pub fn into_parts(self) -> (WaveformRecord, Vec<FootstepLabel>) {
        (self.record, self.labels)
    }
}
