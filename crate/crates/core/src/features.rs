//! Per-step waveform windows, raw reservoir states and RMS normalization.
//!
//! Vectorization order is column-major: all `l` samples of the first sensor,
//! then the second, and so on. Element `(t, j)` of a window lands at `j * l + t`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::dataset::{StepRef, WaveformRecord};
use crate::{Error, Result};

/// Window length used throughout unless overridden (120 ms).
pub const DEFAULT_WINDOW_S: f64 = 0.12;

/// Name of the frozen vectorization order stored in model snapshots.
pub const VECTORIZATION_ORDER: &str = "column-major";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    window_s: f64,
    len: usize,
    n_sensors: usize,
}

impl WindowConfig {
    /// `l = floor(t_w * f_s)`; a 1e-9 guard absorbs products such as
    /// `0.1 * 1000` landing just below an integer.
    pub fn new(window_s: f64, sample_rate_hz: f64, n_sensors: usize) -> Result<Self> {
        if !(window_s.is_finite() && window_s > 0.0) {
            return Err(Error::Config(format!("window length must be positive, got {window_s}")));
        }
        let len = (window_s * sample_rate_hz + 1e-9).floor();
        if len < 1.0 {
            return Err(Error::Config(format!(
                "window of {window_s} s holds no samples at {sample_rate_hz} Hz"
            )));
        }
        if n_sensors == 0 {
            return Err(Error::Config("window needs at least one sensor".into()));
        }
        Ok(WindowConfig {
            window_s,
            len: len as usize,
            n_sensors,
        })
    }

    pub fn for_record(window_s: f64, record: &WaveformRecord) -> Result<Self> {
        Self::new(window_s, record.sample_rate_hz(), record.num_sensors())
    }

    pub fn window_s(&self) -> f64 {
        self.window_s
    }

    /// Samples per window, `l`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_sensors(&self) -> usize {
        self.n_sensors
    }

    /// State dimension `d = l * N_s`.
    pub fn state_dim(&self) -> usize {
        self.len * self.n_sensors
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReservoirState {
    pub values: DVector<f64>,
    pub normalized: bool,
    pub step: Option<StepRef>,
}

impl ReservoirState {
    pub fn raw(values: DVector<f64>) -> Self {
        ReservoirState {
            values,
            normalized: false,
            step: None,
        }
    }

    pub fn with_step(mut self, step: StepRef) -> Self {
        self.step = Some(step);
        self
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Rows `s_k - l + 1 ..= s_k` of the record, all sensors in layout order.
pub fn extract_window(record: &WaveformRecord, s_k: usize, cfg: &WindowConfig) -> Result<DMatrix<f64>> {
    if cfg.n_sensors() != record.num_sensors() {
        return Err(Error::DimensionMismatch(format!(
            "window configured for {} sensors, record has {}",
            cfg.n_sensors(),
            record.num_sensors()
        )));
    }
    let l = cfg.len();
    if s_k + 1 < l {
        return Err(Error::InsufficientHistory {
            sample: s_k,
            needed: l,
        });
    }
    if s_k >= record.num_samples() {
        return Err(Error::DimensionMismatch(format!(
            "step sample {s_k} is beyond the record ({} samples)",
            record.num_samples()
        )));
    }
    Ok(record
        .samples()
        .rows(s_k + 1 - l, l)
        .into_owned())
}

pub fn vectorize(window: &DMatrix<f64>) -> ReservoirState {
    // nalgebra stores column-major, which is exactly the frozen order
    ReservoirState::raw(DVector::from_column_slice(window.as_slice()))
}

/// Inverse of [`vectorize`] for a window of `l` rows.
pub fn unvectorize(state: &ReservoirState, l: usize) -> Result<DMatrix<f64>> {
    if l == 0 || state.dim() % l != 0 {
        return Err(Error::DimensionMismatch(format!(
            "state of length {} is not a multiple of l = {l}",
            state.dim()
        )));
    }
    Ok(DMatrix::from_column_slice(l, state.dim() / l, state.values.as_slice()))
}

/// Root mean square, computed with max-abs prescaling so tiny or huge
/// amplitudes neither underflow nor overflow.
pub fn rms(values: &[f64]) -> f64 {
    let peak = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    if peak == 0.0 || values.is_empty() {
        return 0.0;
    }
    let mean_sq = values.iter().map(|v| (v / peak).powi(2)).sum::<f64>() / values.len() as f64;
    peak * mean_sq.sqrt()
}

/// Divides the state by its global RMS so that `(1/d) * ||r||^2 = 1`.
///
/// Negative scalings flip the sign of the result; only positive scale factors
/// cancel.
pub fn rms_normalize(state: &ReservoirState) -> Result<ReservoirState> {
    let r = rms(state.values.as_slice());
    if !r.is_finite() {
        return Err(Error::NonFinite("reservoir state".into()));
    }
    if r == 0.0 {
        return Err(Error::DegenerateWindow);
    }
    Ok(ReservoirState {
        values: &state.values / r,
        normalized: true,
        step: state.step.clone(),
    })
}

/// Window, vectorize and optionally normalize one step.
pub fn reservoir_state(
    record: &WaveformRecord,
    s_k: usize,
    cfg: &WindowConfig,
    normalize: bool,
) -> Result<ReservoirState> {
    let raw = vectorize(&extract_window(record, s_k, cfg)?);
    if normalize {
        rms_normalize(&raw)
    } else {
        Ok(raw)
    }
}

/// Per-row bookkeeping of a [`StateMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct StateMeta {
    pub step: StepRef,
    pub t_s: f64,
    pub x: f64,
    pub y: f64,
    pub sample: u64,
}

/// Stacked reservoir states (`N x d`) with their step references, as written
/// by the `featurize` command.
#[derive(Debug, Clone, PartialEq)]
pub struct StateMatrix {
    pub states: DMatrix<f64>,
    pub meta: Vec<StateMeta>,
    pub normalized: bool,
}

const STATES_MAGIC: &[u8; 8] = b"FPRCSTAT";
const STATES_VERSION: u32 = 1;

impl StateMatrix {
    pub fn new(states: DMatrix<f64>, meta: Vec<StateMeta>, normalized: bool) -> Result<Self> {
        if states.nrows() != meta.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} states but {} step references",
                states.nrows(),
                meta.len()
            )));
        }
        Ok(StateMatrix {
            states,
            meta,
            normalized,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.states.ncols()
    }

    /// Rows whose step satisfies `keep`, in original order.
    pub fn filter(&self, mut keep: impl FnMut(&StepRef) -> bool) -> StateMatrix {
        let rows: Vec<usize> = (0..self.len()).filter(|&i| keep(&self.meta[i].step)).collect();
        StateMatrix {
            states: self.states.select_rows(&rows),
            meta: rows.iter().map(|&i| self.meta[i].clone()).collect(),
            normalized: self.normalized,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        w.write_all(STATES_MAGIC).map_err(io)?;
        w.write_all(&STATES_VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&(self.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&(self.dim() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&[self.normalized as u8]).map_err(io)?;
        for r in 0..self.states.nrows() {
            for c in 0..self.states.ncols() {
                w.write_all(&self.states[(r, c)].to_le_bytes()).map_err(io)?;
            }
        }
        for m in &self.meta {
            w.write_all(&m.step.k.to_le_bytes()).map_err(io)?;
            for v in [m.t_s, m.x, m.y] {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
            w.write_all(&m.sample.to_le_bytes()).map_err(io)?;
            for s in [&m.step.subject, &m.step.traversal] {
                w.write_all(&(s.len() as u32).to_le_bytes()).map_err(io)?;
                w.write_all(s.as_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(path, e))?;
        let mut cur = Cursor { bytes: &bytes, pos: 0, path };
        if cur.take(8)? != STATES_MAGIC {
            return Err(Error::parse(path, "not a reservoir state file"));
        }
        let version = cur.u32()?;
        if version != STATES_VERSION {
            return Err(Error::VersionMismatch {
                expected: STATES_VERSION,
                found: version as u64,
            });
        }
        let n = cur.u64()? as usize;
        let d = cur.u64()? as usize;
        let normalized = cur.take(1)?[0] != 0;
        let body = n
            .checked_mul(d)
            .ok_or_else(|| Error::parse(path, "header dimensions overflow"))?;
        let mut data = Vec::with_capacity(body.min(1 << 24));
        for _ in 0..body {
            data.push(cur.f64()?);
        }
        let states = DMatrix::from_row_slice(n, d, &data);
        let mut meta = Vec::with_capacity(n);
        for _ in 0..n {
            let k = cur.u32()?;
            let (t_s, x, y) = (cur.f64()?, cur.f64()?, cur.f64()?);
            let sample = cur.u64()?;
            let subject = cur.string()?;
            let traversal = cur.string()?;
            meta.push(StateMeta {
                step: StepRef {
                    subject,
                    traversal,
                    k,
                },
                t_s,
                x,
                y,
                sample,
            });
        }
        if cur.pos != bytes.len() {
            return Err(Error::parse(path, "trailing bytes after state records"));
        }
        StateMatrix::new(states, meta, normalized)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::parse(self.path, "unexpected end of file"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let path = self.path;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|e| Error::parse(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Sensor, SensorLayout};
    use proptest::prelude::*;

    fn ramp_record(n_samples: usize, n_sensors: usize) -> WaveformRecord {
        let sensors = (0..n_sensors).map(|i| Sensor::new(format!("s{i}"), i as f64, 0.0)).collect();
        let layout = SensorLayout::new(sensors, 1024.0).unwrap();
        WaveformRecord::new(layout, DMatrix::from_fn(n_samples, n_sensors, |r, _| r as f64), 0.0).unwrap()
    }

    #[test]
    fn window_length_at_1024_hz() {
        let cfg = WindowConfig::new(0.12, 1024.0, 11).unwrap();
        assert_eq!(cfg.len(), 122);
        assert_eq!(cfg.state_dim(), 1342);
        assert_eq!(WindowConfig::new(0.1, 1000.0, 1).unwrap().len(), 100);
        assert!(WindowConfig::new(0.0001, 1024.0, 1).is_err());
    }

    #[test]
    fn ramp_window_has_expected_rows() {
        let rec = ramp_record(20, 2);
        let cfg = WindowConfig::new(3.0 / 1024.0, 1024.0, 2).unwrap();
        assert_eq!(cfg.len(), 3);
        let a = extract_window(&rec, 10, &cfg).unwrap();
        assert_eq!(a.column(0).as_slice(), &[8.0, 9.0, 10.0]);
        assert_eq!(a.column(1).as_slice(), &[8.0, 9.0, 10.0]);
        let first = extract_window(&rec, 2, &cfg).unwrap();
        assert_eq!(first[(0, 0)], 0.0);
        match extract_window(&rec, 1, &cfg) {
            Err(Error::InsufficientHistory { sample, needed }) => assert_eq!((sample, needed), (1, 3)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(extract_window(&rec, 20, &cfg).is_err());
    }

    #[test]
    fn vectorize_is_column_major() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let r = vectorize(&a);
        assert_eq!(r.values.as_slice(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(unvectorize(&r, 2).unwrap(), a);
        let one = vectorize(&DMatrix::from_element(1, 1, -2.5));
        assert_eq!(one.values.as_slice(), &[-2.5]);
    }

    #[test]
    fn rms_normalize_examples() {
        let c = ReservoirState::raw(DVector::from_element(7, 3.5));
        let n = rms_normalize(&c).unwrap();
        assert!(n.values.iter().all(|v| (v - 1.0).abs() < 1e-15));
        assert!(n.normalized);

        let r = ReservoirState::raw(DVector::from_vec(vec![1.0, 2.0, 2.0]));
        assert!((rms(r.values.as_slice()) - 3f64.sqrt()).abs() < 1e-15);
        let n = rms_normalize(&r).unwrap();
        let expect = [1.0 / 3f64.sqrt(), 2.0 / 3f64.sqrt(), 2.0 / 3f64.sqrt()];
        for (a, b) in n.values.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((n.values[0] - 0.5774).abs() < 1e-4 && (n.values[1] - 1.1547).abs() < 1e-4);

        let zero = ReservoirState::raw(DVector::zeros(4));
        assert!(matches!(rms_normalize(&zero), Err(Error::DegenerateWindow)));
    }

    #[test]
    fn state_matrix_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let states = DMatrix::from_fn(3, 5, |r, c| (r * 5 + c) as f64 / 7.0);
        let meta = (0..3)
            .map(|k| StateMeta {
                step: StepRef {
                    subject: "S1".into(),
                    traversal: format!("Tr{k}"),
                    k,
                },
                t_s: k as f64 * 0.5,
                x: 1.0,
                y: -1.0,
                sample: 100 + k as u64,
            })
            .collect();
        let sm = StateMatrix::new(states, meta, true).unwrap();
        let path = dir.path().join("states.bin");
        sm.save(&path).unwrap();
        assert_eq!(StateMatrix::load(&path).unwrap(), sm);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(StateMatrix::load(&path).is_err());
    }

    proptest! {
        #[test]
        fn normalized_states_have_unit_rms(
            v in prop::collection::vec(-1e3f64..1e3, 1..200),
            scale in 1e-6f64..1e6,
        ) {
            prop_assume!(v.iter().any(|x| x.abs() > 1e-9));
            let r = ReservoirState::raw(DVector::from_vec(v));
            let n = rms_normalize(&r).unwrap();
            let mean_sq = n.values.norm_squared() / n.dim() as f64;
            prop_assert!((mean_sq - 1.0).abs() <= 1e-12);

            let scaled = ReservoirState::raw(&r.values * scale);
            let ns = rms_normalize(&scaled).unwrap();
            prop_assert!((&ns.values - &n.values).amax() <= 1e-12);
        }

        #[test]
        fn vectorize_round_trips(l in 1usize..20, n in 1usize..6, seed in 0u64..1000) {
            let a = DMatrix::from_fn(l, n, |r, c| ((r * 13 + c * 7) as f64 + seed as f64).sin());
            let r = vectorize(&a);
            for t in 0..l {
                for j in 0..n {
                    prop_assert_eq!(r.values[j * l + t], a[(t, j)]);
                }
            }
            prop_assert_eq!(unvectorize(&r, l).unwrap(), a);
        }
    }
}
