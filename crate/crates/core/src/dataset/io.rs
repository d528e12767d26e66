use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{
    FootstepLabel, LabeledDataset, Sensor, SensorLayout, WaveformFormat, WaveformRecord,
    FORMAT_VERSION,
};
use crate::{Error, Result};

const WAVEFORM_MAGIC: &[u8; 8] = b"FPRCWAVE";
const BIN_HEADER_LEN: usize = 8 + 4 + 4 + 8 + 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub length: String,
    pub time: String,
    pub acceleration: String,
}

impl Default for Units {
    fn default() -> Self {
        Units {
            length: "m".into(),
            time: "s".into(),
            acceleration: "m/s^2".into(),
        }
    }
}

/// `manifest.json`: the single entry point of a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub layout: String,
    pub waveform: String,
    pub labels: String,
    pub format: WaveformFormat,
    pub sample_rate_hz: f64,
    #[serde(default)]
    pub start_time_s: f64,
    #[serde(default)]
    pub units: Units,
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest: Manifest = serde_json::from_str(&read_to_string(manifest_path)?)
        .map_err(|e| Error::parse(manifest_path, e))?;
    if manifest.version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: manifest.version as u64,
        });
    }
    if manifest.units != Units::default() {
        return Err(Error::parse(
            manifest_path,
            format!("unsupported units {:?}; only m, s, m/s^2 are accepted", manifest.units),
        ));
    }
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let layout = read_layout(&dir.join(&manifest.layout), manifest.sample_rate_hz)?;
    let waveform_path = dir.join(&manifest.waveform);
    let samples = match manifest.format {
        WaveformFormat::Csv => read_csv_waveform(&waveform_path, layout.len())?,
        WaveformFormat::Bin => {
            let (samples, fs) = read_binary_waveform(&waveform_path)?;
            if samples.ncols() != layout.len() {
                return Err(Error::ChannelMismatch {
                    expected: layout.len(),
                    found: samples.ncols(),
                });
            }
            if fs != manifest.sample_rate_hz {
                return Err(Error::parse(
                    &waveform_path,
                    format!("sample rate {fs} disagrees with manifest {}", manifest.sample_rate_hz),
                ));
            }
            samples
        }
    };
    let record = WaveformRecord::new(layout, samples, manifest.start_time_s)?;
    let labels = read_labels(&dir.join(&manifest.labels))?;
    LabeledDataset::new(record, labels)
}

/// Writes `manifest.json`, `layout.csv`, `labels.csv` and the waveform into
/// `dir`, returning the manifest path.
pub fn save_dataset(
    ds: &LabeledDataset,
    dir: impl AsRef<Path>,
    format: WaveformFormat,
) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let record = ds.record();

    write_layout(&dir.join("layout.csv"), record.layout())?;
    write_labels(&dir.join("labels.csv"), ds.labels())?;
    let waveform = match format {
        WaveformFormat::Csv => {
            write_csv_waveform(&dir.join("waveform.csv"), record)?;
            "waveform.csv"
        }
        WaveformFormat::Bin => {
            write_binary_waveform(&dir.join("waveform.bin"), record.samples(), record.sample_rate_hz())?;
            "waveform.bin"
        }
    };
    let manifest = Manifest {
        version: FORMAT_VERSION,
        layout: "layout.csv".into(),
        waveform: waveform.into(),
        labels: "labels.csv".into(),
        format,
        sample_rate_hz: record.sample_rate_hz(),
        start_time_s: record.start_time_s(),
        units: Units::default(),
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

fn read_layout(path: &Path, sample_rate_hz: f64) -> Result<SensorLayout> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["id", "x_m", "y_m"] {
        return Err(Error::parse(path, "layout header must be id,x_m,y_m"));
    }
    let sensors = rdr
        .deserialize::<Sensor>()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| csv_error(path, e))?;
    SensorLayout::new(sensors, sample_rate_hz)
}

fn write_layout(path: &Path, layout: &SensorLayout) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for s in layout.sensors() {
        w.serialize(s).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_labels(path: &Path) -> Result<Vec<FootstepLabel>> {
    let mut rdr = csv_reader(path)?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["k", "t_s", "x_m", "y_m", "subject", "traversal"] {
        return Err(Error::parse(path, "labels header must be k,t_s,x_m,y_m,subject,traversal"));
    }
    rdr.deserialize()
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| csv_error(path, e))
}

fn write_labels(path: &Path, labels: &[FootstepLabel]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    if labels.is_empty() {
        w.write_record(["k", "t_s", "x_m", "y_m", "subject", "traversal"])
            .map_err(|e| csv_error(path, e))?;
    }
    for l in labels {
        w.serialize(l).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv_waveform(path: &Path, n_sensors: usize) -> Result<DMatrix<f64>> {
    let mut rdr = csv_reader(path)?;
    let n_cols = rdr.headers().map_err(|e| csv_error(path, e))?.len();
    if n_cols != n_sensors + 1 {
        return Err(Error::ChannelMismatch {
            expected: n_sensors,
            found: n_cols.saturating_sub(1),
        });
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        for (c, field) in rec.iter().enumerate().skip(1) {
            let v: f64 = field.parse().map_err(|_| {
                Error::parse(path, format!("row {rows}: cannot parse {field:?} as a number"))
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteSample {
                    row: rows,
                    channel: c - 1,
                });
            }
            data.push(v);
        }
        rows += 1;
    }
    Ok(DMatrix::from_row_slice(rows, n_sensors, &data))
}

fn write_csv_waveform(path: &Path, record: &WaveformRecord) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(w, "t_s").map_err(io)?;
    for id in record.layout().ids() {
        write!(w, ",{id}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    let samples = record.samples();
    for r in 0..samples.nrows() {
        // shortest round-trip representation keeps CSV lossless
        write!(w, "{}", record.time_of(r)).map_err(io)?;
        for c in 0..samples.ncols() {
            write!(w, ",{}", samples[(r, c)]).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Little-endian binary block: magic, version, N_s, T, f_s, then row-major f64.
pub fn write_binary_waveform(path: &Path, samples: &DMatrix<f64>, sample_rate_hz: f64) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    w.write_all(WAVEFORM_MAGIC).map_err(io)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(samples.ncols() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(samples.nrows() as u64).to_le_bytes()).map_err(io)?;
    w.write_all(&sample_rate_hz.to_le_bytes()).map_err(io)?;
    for r in 0..samples.nrows() {
        for c in 0..samples.ncols() {
            w.write_all(&samples[(r, c)].to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Reads a binary waveform block, returning the samples and the stored rate.
pub fn read_binary_waveform(path: &Path) -> Result<(DMatrix<f64>, f64)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < BIN_HEADER_LEN || &bytes[..8] != WAVEFORM_MAGIC {
        return Err(Error::parse(path, "not a binary waveform file"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(8);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version as u64,
        });
    }
    let n_sensors = u32_at(12) as usize;
    let n_samples = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let fs = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let body = &bytes[BIN_HEADER_LEN..];
    let expected = n_sensors
        .checked_mul(n_samples)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::parse(path, "header dimensions overflow"))?;
    if body.len() != expected {
        return Err(Error::parse(
            path,
            format!("body has {} bytes, header implies {expected}", body.len()),
        ));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((DMatrix::from_row_slice(n_samples, n_sensors, &data), fs))
}
