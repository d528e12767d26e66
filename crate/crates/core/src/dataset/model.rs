//! Trained model persistence: PCA basis, ridge readout and the pipeline
//! configuration they were fitted under, as one JSON document. Matrices are
//! stored as base64 of row-major little-endian `f64`, so a round trip is
//! bit-exact.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::experiment::PipelineConfig;
use crate::readout::ReadoutModel;
use crate::subspace::PcaModel;
use crate::{Error, Result};

pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    /// Truncated to the `D` directions the readout consumes.
    pub pca: PcaModel,
    pub readout: ReadoutModel,
    pub config: PipelineConfig,
    /// Feature sensors, in state order.
    pub sensor_ids: Vec<String>,
    pub sample_rate_hz: f64,
}

impl ModelBundle {
    pub fn new(
        pca: PcaModel,
        readout: ReadoutModel,
        config: PipelineConfig,
        sensor_ids: Vec<String>,
        sample_rate_hz: f64,
    ) -> Result<Self> {
        if readout.dim() != pca.components() {
            return Err(Error::DimensionMismatch(format!(
                "readout expects D = {}, PCA keeps {} directions",
                readout.dim(),
                pca.components()
            )));
        }
        if sensor_ids.is_empty() || pca.dim() % sensor_ids.len() != 0 {
            return Err(Error::DimensionMismatch(format!(
                "state dimension {} is not a multiple of {} sensors",
                pca.dim(),
                sensor_ids.len()
            )));
        }
        Ok(ModelBundle {
            pca,
            readout,
            config,
            sensor_ids,
            sample_rate_hz,
        })
    }

    /// Position estimate for one (already normalized, if configured) state.
    pub fn predict_state(&self, state: &[f64]) -> Result<[f64; 2]> {
        let z = self.pca.project(state, self.pca.components())?;
        self.readout.predict(z.as_slice())
    }

    /// Estimates for every row of an `N x d` state matrix.
    pub fn predict_rows(&self, states: &DMatrix<f64>) -> Result<Vec<[f64; 2]>> {
        let z = self.pca.project_rows(states, self.pca.components())?;
        self.readout.predict_rows(&z)
    }
}

#[derive(Serialize, Deserialize)]
struct StoredMatrix {
    rows: usize,
    cols: usize,
    data: String,
}

impl StoredMatrix {
    fn encode(m: &DMatrix<f64>) -> Self {
        let mut bytes = Vec::with_capacity(m.len() * 8);
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                bytes.extend_from_slice(&m[(r, c)].to_le_bytes());
            }
        }
        StoredMatrix {
            rows: m.nrows(),
            cols: m.ncols(),
            data: STANDARD.encode(bytes),
        }
    }

    fn decode(&self, what: &str) -> Result<DMatrix<f64>> {
        let bytes = STANDARD
            .decode(&self.data)
            .map_err(|e| Error::CorruptModel(format!("{what}: {e}")))?;
        let expected = self.rows.checked_mul(self.cols).and_then(|n| n.checked_mul(8));
        if expected != Some(bytes.len()) {
            return Err(Error::CorruptModel(format!(
                "{what}: {} bytes for a {}x{} matrix",
                bytes.len(),
                self.rows,
                self.cols
            )));
        }
        let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        Ok(DMatrix::from_row_iterator(self.rows, self.cols, values))
    }
}

#[derive(Serialize, Deserialize)]
struct StoredPca {
    directions: StoredMatrix,
    /// `1 x r` spectrum.
    eigenvalues: StoredMatrix,
    mean: Option<StoredMatrix>,
}

#[derive(Serialize, Deserialize)]
struct StoredReadout {
    weights: StoredMatrix,
    /// `1 x 1`, for an exact round trip.
    epsilon: StoredMatrix,
    free_bias: bool,
}

#[derive(Serialize, Deserialize)]
struct StoredModel {
    version: u32,
    config: PipelineConfig,
    sensor_ids: Vec<String>,
    sample_rate_hz: StoredMatrix,
    pca: StoredPca,
    readout: StoredReadout,
}

fn scalar(v: f64) -> StoredMatrix {
    StoredMatrix::encode(&DMatrix::from_element(1, 1, v))
}

fn read_scalar(m: &StoredMatrix, what: &str) -> Result<f64> {
    let d = m.decode(what)?;
    if d.len() != 1 {
        return Err(Error::CorruptModel(format!("{what} must be a scalar")));
    }
    Ok(d[0])
}

pub fn save_model(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let stored = StoredModel {
        version: MODEL_VERSION,
        config: bundle.config.clone(),
        sensor_ids: bundle.sensor_ids.clone(),
        sample_rate_hz: scalar(bundle.sample_rate_hz),
        pca: StoredPca {
            directions: StoredMatrix::encode(bundle.pca.directions()),
            eigenvalues: StoredMatrix::encode(&DMatrix::from_row_slice(
                1,
                bundle.pca.eigenvalues().len(),
                bundle.pca.eigenvalues(),
            )),
            mean: bundle.pca.mean().map(|m| StoredMatrix::encode(&DMatrix::from_column_slice(1, m.len(), m.as_slice()))),
        },
        readout: StoredReadout {
            weights: StoredMatrix::encode(bundle.readout.weights()),
            epsilon: scalar(bundle.readout.epsilon()),
            free_bias: bundle.readout.free_bias(),
        },
    };
    let text = serde_json::to_string(&stored).expect("model serializes");
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelBundle> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: Value = serde_json::from_str(&text).map_err(|e| Error::CorruptModel(e.to_string()))?;
    let version = value
        .get("version")
        .and_then(Value::as_u64)
        .ok_or_else(|| Error::CorruptModel("missing version".into()))?;
    if version != u64::from(MODEL_VERSION) {
        return Err(Error::VersionMismatch {
            expected: MODEL_VERSION,
            found: version,
        });
    }
    let stored: StoredModel = serde_json::from_value(value).map_err(|e| Error::CorruptModel(e.to_string()))?;

    let eigenvalues = stored.pca.eigenvalues.decode("eigenvalues")?;
    let mean = match &stored.pca.mean {
        Some(m) => Some(DVector::from_iterator(m.cols, m.decode("mean")?.iter().copied())),
        None => None,
    };
    let pca = PcaModel::from_parts(
        stored.pca.directions.decode("directions")?,
        eigenvalues.iter().copied().collect(),
        mean,
    )?;
    let readout = ReadoutModel::from_parts(
        stored.readout.weights.decode("weights")?,
        read_scalar(&stored.readout.epsilon, "epsilon")?,
        stored.readout.free_bias,
    )?;
    ModelBundle::new(
        pca,
        readout,
        stored.config,
        stored.sensor_ids,
        read_scalar(&stored.sample_rate_hz, "sample rate")?,
    )
}
