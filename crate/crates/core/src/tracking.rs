//! Constant-velocity Kalman filter over the per-step readout predictions.
//!
//! The filter runs in the step-index domain (Δ = 1 between detected steps),
//! so wall-clock timing never enters. State is `(x, y, ẋ, ẏ)`, with
//! isotropic noise `Q = q I₄` and `R = r I₂`.

use nalgebra::{Matrix2, Matrix2x4, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KfConfig {
    pub q: f64,
    pub r: f64,
    pub initial_position_var: f64,
    pub initial_velocity_var: f64,
}

impl Default for KfConfig {
    fn default() -> Self {
        KfConfig {
            q: 0.05,
            r: 0.25,
            initial_position_var: 1.0,
            initial_velocity_var: 1.0,
        }
    }
}

impl KfConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(self.q) && ok(self.r) && ok(self.initial_position_var) && ok(self.initial_velocity_var)) {
            return Err(Error::Config(format!("Kalman variances must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfState {
    pub mean: Vector4<f64>,
    pub covariance: Matrix4<f64>,
    pub step_count: usize,
}

impl KfState {
    pub fn position(&self) -> [f64; 2] {
        [self.mean[0], self.mean[1]]
    }

    pub fn velocity(&self) -> [f64; 2] {
        [self.mean[2], self.mean[3]]
    }
}

pub fn transition() -> Matrix4<f64> {
    Matrix4::new(
        1.0, 0.0, 1.0, 0.0, //
        0.0, 1.0, 0.0, 1.0, //
        0.0, 0.0, 1.0, 0.0, //
        0.0, 0.0, 0.0, 1.0,
    )
}

pub fn observation() -> Matrix2x4<f64> {
    Matrix2x4::new(
        1.0, 0.0, 0.0, 0.0, //
        0.0, 1.0, 0.0, 0.0,
    )
}

pub fn kf_init(first: [f64; 2], cfg: &KfConfig) -> Result<KfState> {
    cfg.validate()?;
    if !first.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("Kalman initial measurement".into()));
    }
    let p = cfg.initial_position_var;
    let v = cfg.initial_velocity_var;
    Ok(KfState {
        mean: Vector4::new(first[0], first[1], 0.0, 0.0),
        covariance: Matrix4::from_diagonal(&Vector4::new(p, p, v, v)),
        step_count: 0,
    })
}

/// One predict/update cycle; returns the posterior and its position.
pub fn kf_step(state: &KfState, measurement: [f64; 2], cfg: &KfConfig) -> Result<(KfState, [f64; 2])> {
    if !measurement.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("Kalman measurement".into()));
    }
    let f = transition();
    let h = observation();

    let mean_prior = f * state.mean;
    let cov_prior = f * state.covariance * f.transpose() + Matrix4::identity() * cfg.q;

    let innovation = Vector2::new(measurement[0], measurement[1]) - h * mean_prior;
    let s: Matrix2<f64> = h * cov_prior * h.transpose() + Matrix2::identity() * cfg.r;
    let s_inv = s
        .try_inverse()
        .ok_or_else(|| Error::Numerical("innovation covariance is singular".into()))?;
    let gain: Matrix4x2<f64> = cov_prior * h.transpose() * s_inv;

    let mean = mean_prior + gain * innovation;
    let cov = (Matrix4::identity() - gain * h) * cov_prior;
    let covariance = (cov + cov.transpose()) * 0.5;

    if !covariance.iter().all(|v| v.is_finite()) || covariance.cholesky().is_none() {
        return Err(Error::Numerical("Kalman covariance lost positive definiteness".into()));
    }
    let next = KfState {
        mean,
        covariance,
        step_count: state.step_count + 1,
    };
    Ok((next, next.position()))
}

/// Filters a whole track. The first measurement initializes the state and is
/// returned unchanged.
pub fn filter_track(measurements: &[[f64; 2]], cfg: &KfConfig) -> Result<Vec<[f64; 2]>> {
    let Some((&first, rest)) = measurements.split_first() else {
        return Ok(Vec::new());
    };
    let mut state = kf_init(first, cfg)?;
    let mut out = Vec::with_capacity(measurements.len());
    out.push(first);
    for &m in rest {
        let (next, pos) = kf_step(&state, m, cfg)?;
        out.push(pos);
        state = next;
    }
    Ok(out)
}
