//! PCA on stacked reservoir states.
//!
//! The covariance `C = R~ᵀR~ / (N - 1)` is never formed. The thin SVD
//! `R~ = U Σ Vᵀ` gives the same eigenvectors `V` and eigenvalues
//! `σ² / (N - 1)` at `O(N² d)` cost, with `N` (steps) much smaller than `d`.
//! Centering is optional and off by default.

use nalgebra::{DMatrix, DVector, SVD};

use crate::{Error, Result};

/// Eigenvalues in `[-CLIP, 0)` are rounding noise and are set to zero.
const EIGEN_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    /// `d x r` orthonormal principal directions, strongest first.
    directions: DMatrix<f64>,
    /// Full non-increasing spectrum; may be longer than `directions.ncols()`
    /// after truncation.
    eigenvalues: Vec<f64>,
    mean: Option<DVector<f64>>,
}

/// Fits PCA to the rows of `states` (`N x d`), returning `min(N, d)` directions.
pub fn fit_pca(states: &DMatrix<f64>, centering: bool) -> Result<PcaModel> {
    let (n, d) = states.shape();
    if n < 2 {
        return Err(Error::Empty("PCA needs at least two states"));
    }
    if d == 0 {
        return Err(Error::Empty("PCA needs states of positive dimension"));
    }
    if states.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("PCA input".into()));
    }

    let mean = centering.then(|| states.row_mean().transpose());
    let mut centered = states.clone();
    if let Some(mu) = &mean {
        for mut row in centered.row_iter_mut() {
            row -= mu.transpose();
        }
    }

    let svd = SVD::try_new(centered, false, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD failed to converge".into()))?;
    let v_t = svd.v_t.expect("requested V");
    let sigma = svd.singular_values;

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]).then(a.cmp(&b)));

    let scale = 1.0 / (n as f64 - 1.0);
    let eigenvalues = order
        .iter()
        .map(|&i| {
            let l = sigma[i] * sigma[i] * scale;
            if (-EIGEN_CLIP..0.0).contains(&l) {
                0.0
            } else {
                l
            }
        })
        .collect();

    let mut directions = DMatrix::zeros(d, order.len());
    for (col, &i) in order.iter().enumerate() {
        let mut v = v_t.row(i).transpose();
        fix_sign(&mut v);
        directions.set_column(col, &v);
    }

    Ok(PcaModel {
        directions,
        eigenvalues,
        mean,
    })
}

/// Scales `v` so its largest-magnitude entry is positive (first one on ties).
fn fix_sign(v: &mut DVector<f64>) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
}

impl PcaModel {
    /// Reassembles a model from stored parts, checking shapes only.
    pub fn from_parts(
        directions: DMatrix<f64>,
        eigenvalues: Vec<f64>,
        mean: Option<DVector<f64>>,
    ) -> Result<Self> {
        if directions.ncols() > eigenvalues.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} directions but only {} eigenvalues",
                directions.ncols(),
                eigenvalues.len()
            )));
        }
        if let Some(m) = &mean {
            if m.len() != directions.nrows() {
                return Err(Error::DimensionMismatch(format!(
                    "mean has length {}, directions have {} rows",
                    m.len(),
                    directions.nrows()
                )));
            }
        }
        if directions.iter().chain(eigenvalues.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("PCA model".into()));
        }
        Ok(PcaModel {
            directions,
            eigenvalues,
            mean,
        })
    }

    /// State dimension `d`.
    pub fn dim(&self) -> usize {
        self.directions.nrows()
    }

    /// Number of stored directions.
    pub fn components(&self) -> usize {
        self.directions.ncols()
    }

    /// Length of the spectrum, `r_full = min(N, d)` at fit time.
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn directions(&self) -> &DMatrix<f64> {
        &self.directions
    }

    pub fn centering(&self) -> bool {
        self.mean.is_some()
    }

    pub fn mean(&self) -> Option<&DVector<f64>> {
        self.mean.as_ref()
    }

    /// Keeps the first `dim` directions (the spectrum is kept whole).
    pub fn truncated(&self, dim: usize) -> Result<PcaModel> {
        self.check_dim(dim)?;
        Ok(PcaModel {
            directions: self.directions.columns(0, dim).into_owned(),
            eigenvalues: self.eigenvalues.clone(),
            mean: self.mean.clone(),
        })
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        if dim == 0 || dim > self.components() {
            return Err(Error::DimensionMismatch(format!(
                "projection dimension {dim} outside 1..={}",
                self.components()
            )));
        }
        Ok(())
    }

    /// `z = (r - mean) V_D`.
    pub fn project(&self, state: &[f64], dim: usize) -> Result<DVector<f64>> {
        self.check_dim(dim)?;
        if state.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "state has length {}, model expects {}",
                state.len(),
                self.dim()
            )));
        }
        let mut r = DVector::from_column_slice(state);
        if let Some(mu) = &self.mean {
            r -= mu;
        }
        Ok(self.directions.columns(0, dim).tr_mul(&r))
    }

    /// Projects every row of `states` (`N x d`), giving `N x D`.
    pub fn project_rows(&self, states: &DMatrix<f64>, dim: usize) -> Result<DMatrix<f64>> {
        self.check_dim(dim)?;
        if states.ncols() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "states have {} columns, model expects {}",
                states.ncols(),
                self.dim()
            )));
        }
        let mut centered = states.clone();
        if let Some(mu) = &self.mean {
            for mut row in centered.row_iter_mut() {
                row -= mu.transpose();
            }
        }
        Ok(centered * self.directions.columns(0, dim))
    }

    /// `z V_Dᵀ (+ mean)`.
    pub fn reconstruct(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_dim(z.len())?;
        let mut r = self.directions.columns(0, z.len()) * z;
        if let Some(mu) = &self.mean {
            r += mu;
        }
        Ok(r)
    }

    /// Fraction of variance in the first `dim` eigenvalues.
    pub fn variance_retained(&self, dim: usize) -> Result<f64> {
        if dim == 0 || dim > self.rank() {
            return Err(Error::DimensionMismatch(format!(
                "dimension {dim} outside 1..={}",
                self.rank()
            )));
        }
        Ok(self.eta_curve()?[dim - 1])
    }

    /// `η(D)` for `D = 1..=rank`.
    pub fn eta_curve(&self) -> Result<Vec<f64>> {
        let total: f64 = self.eigenvalues.iter().sum();
        if total <= 0.0 {
            return Err(Error::ZeroVariance);
        }
        // same summation order as `total`, so the last entry is exactly 1
        let mut acc = 0.0;
        Ok(self
            .eigenvalues
            .iter()
            .map(|l| {
                acc += l;
                acc / total
            })
            .collect())
    }

    /// Smallest `D` with `η(D) >= target`; falls back to the full rank.
    pub fn choose_dimension(&self, target: f64) -> Result<usize> {
        if !(target > 0.0 && target <= 1.0) {
            return Err(Error::Config(format!("variance target must lie in (0, 1], got {target}")));
        }
        let curve = self.eta_curve()?;
        if target >= 1.0 {
            // first index where the remaining spectrum is exhausted, up to rounding
            let floor = self.eigenvalues.first().copied().unwrap_or(0.0) * self.rank() as f64 * f64::EPSILON;
            let last_nonzero = self.eigenvalues.iter().rposition(|&l| l > floor).unwrap_or(0);
            return Ok(last_nonzero + 1);
        }
        Ok(curve
            .iter()
            .position(|&eta| eta >= target)
            .map_or(self.rank(), |i| i + 1))
    }
}
