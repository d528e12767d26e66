//! Localization error metrics, spatial-bin confusion matrices and per-sensor
//! Fisher ratios.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dataset::{StepRef, WaveformRecord};
use crate::features::{extract_window, rms, WindowConfig};
use crate::{Error, Result};

/// Ratio reported when within-bin variance vanishes but between-bin does not.
pub const DEFAULT_FISHER_CAP: f64 = 1e6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub step: StepRef,
    pub truth: [f64; 2],
    pub predicted: [f64; 2],
    pub filtered: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Raw,
    Filtered,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    pub total: f64,
    pub x: f64,
    pub y: f64,
}

fn estimate(p: &Prediction, which: Which) -> Result<[f64; 2]> {
    match which {
        Which::Raw => Ok(p.predicted),
        Which::Filtered => p
            .filtered
            .ok_or_else(|| Error::Config(format!("step {:?} has no filtered estimate", p.step))),
    }
}

/// Overall and per-axis RMSE. `total² = x² + y²` holds by construction.
pub fn rmse(preds: &[Prediction], which: Which) -> Result<Rmse> {
    if preds.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for p in preds {
        let e = estimate(p, which)?;
        sx += (e[0] - p.truth[0]).powi(2);
        sy += (e[1] - p.truth[1]).powi(2);
    }
    let n = preds.len() as f64;
    let (mx, my) = (sx / n, sy / n);
    Ok(Rmse {
        total: (mx + my).sqrt(),
        x: mx.sqrt(),
        y: my.sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
}

impl Axis {
    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinSpec {
    axis: Axis,
    edges: Vec<f64>,
}

impl BinSpec {
    pub fn new(axis: Axis, edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 {
            return Err(Error::Config("bin spec needs at least two edges".into()));
        }
        if edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("bin edges must be finite and strictly increasing".into()));
        }
        Ok(BinSpec { axis, edges })
    }

    /// Uniform edges at `pitch` covering `values`, aligned to multiples of the pitch.
    pub fn covering(axis: Axis, values: impl IntoIterator<Item = f64>, pitch: f64) -> Result<Self> {
        if !(pitch.is_finite() && pitch > 0.0) {
            return Err(Error::Config(format!("bin pitch must be positive, got {pitch}")));
        }
        let (lo, hi) = values
            .into_iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::Empty("values to bin"));
        }
        let first = (lo / pitch).floor() as i64;
        let last = ((hi / pitch).floor() as i64 + 1).max(first + 1);
        Self::new(axis, (first..=last).map(|i| i as f64 * pitch).collect())
    }

    pub fn axis(&self) -> Axis {
        self.axis
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn n_bins(&self) -> usize {
        self.edges.len() - 1
    }

    /// Bin index; values outside the edges clamp to the boundary bins.
    pub fn bin_of(&self, v: f64) -> usize {
        let upper = self.edges[1..].partition_point(|&e| e <= v);
        upper.min(self.n_bins() - 1)
    }
}

/// Counts indexed `[true bin][predicted bin]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub bins: BinSpec,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Fraction of steps whose predicted bin equals the true bin.
    pub fn diagonal_mass(&self) -> f64 {
        let diag: usize = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let n = self.bins.n_bins();
        let mut out = String::from("true_bin");
        for j in 0..n {
            out.push_str(&format!(",pred_{j}"));
        }
        out.push('\n');
        for (i, row) in self.counts.iter().enumerate() {
            out.push_str(&i.to_string());
            for c in row {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(preds: &[Prediction], bins: &BinSpec, which: Which) -> Result<ConfusionMatrix> {
    if preds.is_empty() {
        return Err(Error::Empty("prediction list"));
    }
    let n = bins.n_bins();
    let mut counts = vec![vec![0; n]; n];
    let a = bins.axis().index();
    for p in preds {
        let e = estimate(p, which)?;
        counts[bins.bin_of(p.truth[a])][bins.bin_of(e[a])] += 1;
    }
    Ok(ConfusionMatrix {
        bins: bins.clone(),
        counts,
    })
}

/// Per-sensor Fisher ratio of `features` (`N steps x N_s sensors`) over the
/// bin assignment `bins` (one entry per step).
///
/// `J = Σ_c N_c (μ_c - μ)² / Σ_c N_c σ_c²` with population variance inside
/// each bin. A zero denominator yields `cap`, or 0 when the numerator is zero
/// as well.
pub fn fisher_ratio(features: &DMatrix<f64>, bins: &[usize], cap: f64) -> Result<Vec<f64>> {
    if features.nrows() != bins.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} feature rows but {} bin labels",
            features.nrows(),
            bins.len()
        )));
    }
    let n_bins = bins.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; n_bins];
    for &b in bins {
        counts[b] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Config("Fisher ratio needs at least two occupied bins".into()));
    }

    let n = bins.len() as f64;
    let ratios = features
        .column_iter()
        .map(|col| {
            let mu = col.sum() / n;
            let mut sums = vec![0.0; n_bins];
            for (v, &b) in col.iter().zip(bins) {
                sums[b] += v;
            }
            let means: Vec<f64> = sums
                .iter()
                .zip(&counts)
                .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
                .collect();
            let within: f64 = col.iter().zip(bins).map(|(v, &b)| (v - means[b]).powi(2)).sum();
            let between: f64 = (0..n_bins)
                .filter(|&c| counts[c] > 0)
                .map(|c| counts[c] as f64 * (means[c] - mu).powi(2))
                .sum();
            // sub-rounding residues count as zero
            let tiny = 1e-24 * col.iter().map(|v| v * v).sum::<f64>();
            match (between > tiny, within > tiny) {
                (_, true) => between / within,
                (true, false) => cap,
                (false, false) => 0.0,
            }
        })
        .collect();
    Ok(ratios)
}

/// RMS of each sensor's column of the step window: `N steps x N_s`.
pub fn sensor_feature(record: &WaveformRecord, events: &[usize], cfg: &WindowConfig) -> Result<DMatrix<f64>> {
    let mut out = DMatrix::zeros(events.len(), record.num_sensors());
    for (i, &s) in events.iter().enumerate() {
        let w = extract_window(record, s, cfg)?;
        for (j, col) in w.column_iter().enumerate() {
            out[(i, j)] = rms(col.as_slice());
        }
    }
    Ok(out)
}

/// Scatter of predicted against true x as a standalone SVG document.
pub fn scatter_svg(preds: &[Prediction], axis: Axis) -> String {
    const SIZE: f64 = 480.0;
    const PAD: f64 = 48.0;
    let a = axis.index();
    let values = preds.iter().flat_map(|p| [p.truth[a], p.predicted[a]]);
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    let (lo, hi) = if lo.is_finite() && hi > lo { (lo, hi) } else { (0.0, 1.0) };
    let map = |v: f64| PAD + (v - lo) / (hi - lo) * (SIZE - 2.0 * PAD);
    let name = match axis {
        Axis::X => "x",
        Axis::Y => "y",
    };

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n"
    );
    svg.push_str(&format!(
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{w}\" height=\"{w}\" fill=\"none\" stroke=\"#888\"/>\n",
        w = SIZE - 2.0 * PAD
    ));
    svg.push_str(&format!(
        "<line x1=\"{p}\" y1=\"{q}\" x2=\"{q}\" y2=\"{p}\" stroke=\"#bbb\" stroke-dasharray=\"4 4\"/>\n",
        p = PAD,
        q = SIZE - PAD
    ));
    for p in preds {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#1f77b4\" fill-opacity=\"0.7\"/>\n",
            map(p.truth[a]),
            SIZE - map(p.predicted[a])
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\">true {name} (m)</text>\n",
        SIZE / 2.0,
        SIZE - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" text-anchor=\"middle\" font-size=\"14\" transform=\"rotate(-90 16 {})\">predicted {name} (m)</text>\n",
        SIZE / 2.0,
        SIZE / 2.0
    ));
    svg.push_str(&format!(
        "<text x=\"{PAD}\" y=\"{}\" font-size=\"11\">{lo:.2}</text><text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{hi:.2}</text>\n",
        SIZE - PAD + 14.0,
        SIZE - PAD,
        SIZE - PAD + 14.0
    ));
    svg.push_str("</svg>\n");
    svg
}
