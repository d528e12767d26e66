//! Ridge-regression readout from projected states to `(x, y)`.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Design matrix with the bias column appended, and target positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    z: DMatrix<f64>,
    p: DMatrix<f64>,
}

impl TrainingSet {
    /// Builds `Z_tr = [Z | 1]` from `N x D` projected states and `N` positions.
    pub fn new(states: &DMatrix<f64>, positions: &[[f64; 2]]) -> Result<Self> {
        let (n, dim) = states.shape();
        if n != positions.len() {
            return Err(Error::DimensionMismatch(format!(
                "{n} states but {} positions",
                positions.len()
            )));
        }
        let z = DMatrix::from_fn(n, dim + 1, |r, c| if c < dim { states[(r, c)] } else { 1.0 });
        let p = DMatrix::from_fn(n, 2, |r, c| positions[r][c]);
        Self::from_augmented(z, p)
    }

    /// Takes an already augmented `Z_tr` whose last column must be all ones.
    pub fn from_augmented(z: DMatrix<f64>, p: DMatrix<f64>) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::Empty("training set"));
        }
        if z.nrows() != p.nrows() || p.ncols() != 2 || z.ncols() < 1 {
            return Err(Error::DimensionMismatch(format!(
                "Z is {}x{}, P is {}x{}",
                z.nrows(),
                z.ncols(),
                p.nrows(),
                p.ncols()
            )));
        }
        if z.column(z.ncols() - 1).iter().any(|&v| v != 1.0) {
            return Err(Error::DimensionMismatch("last column of Z must be all ones".into()));
        }
        if z.iter().chain(p.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("training set".into()));
        }
        Ok(TrainingSet { z, p })
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    /// `D`, excluding the bias column.
    pub fn dim(&self) -> usize {
        self.z.ncols() - 1
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn targets(&self) -> &DMatrix<f64> {
        &self.p
    }

    /// Default ridge strength: `scale * trace(ZᵀZ) / (D + 1)`.
    pub fn relative_epsilon(&self, scale: f64) -> f64 {
        scale * self.z.norm_squared() / self.z.ncols() as f64
    }
}

/// How the ridge parameter is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum RidgeStrength {
    /// Multiple of `trace(ZᵀZ) / (D + 1)`.
    Relative(f64),
    Absolute(f64),
}

impl Default for RidgeStrength {
    fn default() -> Self {
        RidgeStrength::Relative(1e-6)
    }
}

impl RidgeStrength {
    pub fn resolve(&self, ts: &TrainingSet) -> f64 {
        match *self {
            RidgeStrength::Relative(s) => ts.relative_epsilon(s),
            RidgeStrength::Absolute(e) => e,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReadoutModel {
    weights: DMatrix<f64>,
    epsilon: f64,
    free_bias: bool,
}

/// Solves `(ZᵀZ + εI) W = ZᵀP` by Cholesky factorization.
///
/// With `free_bias` the bias row is left out of the penalty.
pub fn train_ridge(ts: &TrainingSet, epsilon: f64, free_bias: bool) -> Result<ReadoutModel> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(Error::Config(format!("ridge parameter must be >= 0, got {epsilon}")));
    }
    let z = &ts.z;
    let k = z.ncols();
    let mut gram = z.tr_mul(z);
    let penalized = if free_bias { k - 1 } else { k };
    for i in 0..penalized {
        gram[(i, i)] += epsilon;
    }
    let rhs = z.tr_mul(&ts.p);

    let chol = Cholesky::new(gram.clone())
        .ok_or_else(|| Error::Singular(format!("normal equations are not positive definite (ε = {epsilon})")))?;
    let max_diag = gram.diagonal().amax();
    let min_pivot = chol.l_dirty().diagonal().iter().fold(f64::INFINITY, |m, v| m.min(v * v));
    if min_pivot <= k as f64 * f64::EPSILON * max_diag {
        return Err(Error::Singular(format!(
            "normal equations are numerically singular (ε = {epsilon})"
        )));
    }
    let weights = chol.solve(&rhs);

    let residual = (&gram * &weights - &rhs).amax();
    let scale = (gram.amax() * weights.amax()).max(rhs.amax()).max(f64::MIN_POSITIVE);
    if !weights.iter().all(|v| v.is_finite()) || residual > 1e-8 * scale {
        return Err(Error::Numerical(format!(
            "ridge solve residual {residual:e} exceeds tolerance (scale {scale:e})"
        )));
    }
    Ok(ReadoutModel {
        weights,
        epsilon,
        free_bias,
    })
}

impl ReadoutModel {
    pub fn from_parts(weights: DMatrix<f64>, epsilon: f64, free_bias: bool) -> Result<Self> {
        if weights.ncols() != 2 || weights.nrows() < 1 {
            return Err(Error::DimensionMismatch(format!(
                "readout weights must be (D+1) x 2, got {}x{}",
                weights.nrows(),
                weights.ncols()
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("readout weights".into()));
        }
        Ok(ReadoutModel {
            weights,
            epsilon,
            free_bias,
        })
    }

    /// `(D+1) x 2`; the last row is the bias.
    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn free_bias(&self) -> bool {
        self.free_bias
    }

    /// Input dimension `D`.
    pub fn dim(&self) -> usize {
        self.weights.nrows() - 1
    }

    /// `p = W_outᵀ [z; 1]`.
    pub fn predict(&self, z: &[f64]) -> Result<[f64; 2]> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "projected state has length {}, readout expects {}",
                z.len(),
                self.dim()
            )));
        }
        let mut out = [0.0; 2];
        for (c, o) in out.iter_mut().enumerate() {
            let col = self.weights.column(c);
            *o = z.iter().zip(col.iter()).map(|(a, w)| a * w).sum::<f64>() + col[self.dim()];
        }
        Ok(out)
    }

    /// Predictions for every row of an `N x D` matrix.
    pub fn predict_rows(&self, z: &DMatrix<f64>) -> Result<Vec<[f64; 2]>> {
        z.row_iter()
            .map(|row| {
                let v: DVector<f64> = row.transpose();
                self.predict(v.as_slice())
            })
            .collect()
    }

    /// `||Z W - P||_F² + ε ||W||_F²` (bias row excluded when unpenalized).
    pub fn objective(&self, ts: &TrainingSet) -> f64 {
        ridge_objective(ts, &self.weights, self.epsilon, self.free_bias)
    }
}

pub fn ridge_objective(ts: &TrainingSet, w: &DMatrix<f64>, epsilon: f64, free_bias: bool) -> f64 {
    let fit = (&ts.z * w - &ts.p).norm_squared();
    let rows = if free_bias { w.nrows() - 1 } else { w.nrows() };
    fit + epsilon * w.rows(0, rows).norm_squared()
}
