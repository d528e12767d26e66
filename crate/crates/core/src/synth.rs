//! Synthetic floor-vibration recordings with exact footstep labels.
//!
//! The floor is a simply supported rectangular plate described by modal
//! superposition. A strike of impulse `I` at `(x₀, y₀, t₀)` contributes, at a
//! sensor `(xₛ, yₛ)`,
//!
//! ```text
//! Σ_mn φ_mn(x₀, y₀) φ_mn(xₛ, yₛ) I A_mn e^{-ζω(t - t₀)} sin(ω_d (t - t₀)),   t >= t₀
//! ```
//!
//! with `φ_mn = sin(mπx/Lx) sin(nπy/Ly)`, `ω_mn = c((mπ/Lx)² + (nπ/Ly)²)`,
//! `A_mn = 1/ω_mn` and `ω_d = ω√(1 - ζ²)`. The model is linear in `I` and
//! symmetric in source and sensor positions.
//!
//! Each modal coordinate is rendered with a complex one-pole recursion, so a
//! traversal costs `O(T · modes · sensors)` regardless of how many strikes it
//! holds.

use std::f64::consts::PI;

use nalgebra::{Complex, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{FootstepLabel, LabeledDataset, Sensor, SensorLayout, WaveformRecord};
use crate::features::DEFAULT_WINDOW_S;
use crate::{Error, Result};

/// Silence recorded before the first strike.
pub const LEAD_IN_S: f64 = 0.5;
/// Ring-down recorded after the last strike.
pub const TAIL_S: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FloorConfig {
    pub length_x: f64,
    pub width_y: f64,
    pub modes_x: usize,
    pub modes_y: usize,
    pub damping: f64,
    /// Dispersion coefficient `c` in `ω = c k²`.
    pub dispersion: f64,
}

impl FloorConfig {
    /// Chooses `c` so that mode (1, 1) rings at `hz`.
    pub fn with_fundamental_hz(mut self, hz: f64) -> Self {
        let k2 = (PI / self.length_x).powi(2) + (PI / self.width_y).powi(2);
        self.dispersion = 2.0 * PI * hz / k2;
        self
    }
}

impl Default for FloorConfig {
    fn default() -> Self {
        FloorConfig {
            length_x: 17.0,
            width_y: 3.0,
            modes_x: 12,
            modes_y: 4,
            damping: 0.03,
            dispersion: 0.0,
        }
        .with_fundamental_hz(15.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode {
    pub m: usize,
    pub n: usize,
    /// Undamped natural frequency, rad/s.
    pub omega: f64,
    pub damping: f64,
}

impl Mode {
    pub fn damped_omega(&self) -> f64 {
        self.omega * (1.0 - self.damping * self.damping).sqrt()
    }

    pub fn participation(&self) -> f64 {
        1.0 / self.omega
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloorModel {
    length_x: f64,
    width_y: f64,
    dispersion: f64,
    modes: Vec<Mode>,
}

pub fn build_floor(cfg: &FloorConfig) -> Result<FloorModel> {
    let pos = |v: f64| v.is_finite() && v > 0.0;
    if !(pos(cfg.length_x) && pos(cfg.width_y)) {
        return Err(Error::Config(format!(
            "floor dimensions must be positive, got {} x {}",
            cfg.length_x, cfg.width_y
        )));
    }
    if cfg.modes_x == 0 || cfg.modes_y == 0 {
        return Err(Error::Config("mode grid must be at least 1 x 1".into()));
    }
    if !(cfg.damping > 0.0 && cfg.damping < 1.0) {
        return Err(Error::Config(format!("damping ratio must lie in (0, 1), got {}", cfg.damping)));
    }
    if !pos(cfg.dispersion) {
        return Err(Error::Config(format!("dispersion coefficient must be positive, got {}", cfg.dispersion)));
    }
    let mut modes = Vec::with_capacity(cfg.modes_x * cfg.modes_y);
    for m in 1..=cfg.modes_x {
        for n in 1..=cfg.modes_y {
            let k2 = (m as f64 * PI / cfg.length_x).powi(2) + (n as f64 * PI / cfg.width_y).powi(2);
            modes.push(Mode {
                m,
                n,
                omega: cfg.dispersion * k2,
                damping: cfg.damping,
            });
        }
    }
    modes.sort_by(|a, b| a.omega.total_cmp(&b.omega).then((a.m, a.n).cmp(&(b.m, b.n))));
    Ok(FloorModel {
        length_x: cfg.length_x,
        width_y: cfg.width_y,
        dispersion: cfg.dispersion,
        modes,
    })
}

impl FloorModel {
    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn length_x(&self) -> f64 {
        self.length_x
    }

    pub fn width_y(&self) -> f64 {
        self.width_y
    }

    pub fn dispersion(&self) -> f64 {
        self.dispersion
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.length_x).contains(&x) && (0.0..=self.width_y).contains(&y)
    }

    pub fn mode_shape(&self, mode: &Mode, x: f64, y: f64) -> f64 {
        (mode.m as f64 * PI * x / self.length_x).sin() * (mode.n as f64 * PI * y / self.width_y).sin()
    }

    /// Closed-form acceleration at `sensor`, `t` seconds after a unit-impulse
    /// strike at `source`. Reference for the recursive renderer.
    pub fn impulse_response(&self, source: (f64, f64), sensor: (f64, f64), t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        self.modes
            .iter()
            .map(|md| {
                let coupling = self.mode_shape(md, source.0, source.1) * self.mode_shape(md, sensor.0, sensor.1);
                coupling * md.participation() * (-md.damping * md.omega * t).exp() * (md.damped_omega() * t).sin()
            })
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitProfile {
    /// Mean strike impulse, N·s.
    pub impulse_mean: f64,
    /// Relative standard deviation of the impulse.
    pub impulse_jitter: f64,
    pub step_length: f64,
    pub stance_width: f64,
    /// Mean time between strikes.
    pub cadence_s: f64,
    /// Relative standard deviation of the strike interval.
    pub cadence_jitter: f64,
    /// Standard deviation of placement around the marker, both axes, m.
    pub placement_jitter: f64,
}

impl GaitProfile {
    pub fn subject_one() -> Self {
        GaitProfile {
            impulse_mean: 1.0,
            impulse_jitter: 0.1,
            step_length: 0.62,
            stance_width: 0.15,
            cadence_s: 0.55,
            cadence_jitter: 0.05,
            placement_jitter: 0.03,
        }
    }

    pub fn subject_two() -> Self {
        GaitProfile {
            impulse_mean: 1.6,
            cadence_s: 0.5,
            ..Self::subject_one()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        let jitter = |v: f64| v.is_finite() && (0.0..0.5).contains(&v);
        if !(pos(self.impulse_mean) && pos(self.step_length) && pos(self.stance_width) && pos(self.cadence_s)) {
            return Err(Error::Config(format!("gait magnitudes must be positive: {self:?}")));
        }
        if !(jitter(self.impulse_jitter) && jitter(self.cadence_jitter) && jitter(self.placement_jitter)) {
            return Err(Error::Config(format!("gait jitters must lie in [0, 0.5): {self:?}")));
        }
        Ok(())
    }
}

/// One walk along a straight line; direction follows the sign of
/// `x_end - x_start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversalPlan {
    pub line_y: f64,
    pub x_start: f64,
    pub x_end: f64,
    pub subject: String,
    pub traversal: String,
}

impl TraversalPlan {
    pub fn direction(&self) -> f64 {
        (self.x_end - self.x_start).signum()
    }

    pub fn n_steps(&self, step_length: f64) -> usize {
        ((self.x_end - self.x_start).abs() / step_length + 1e-9).floor() as usize + 1
    }
}

/// A strike to be rendered.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Strike {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub impulse: f64,
}

fn factor(rng: &mut ChaCha8Rng, rel_std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    (1.0 + rel_std * z).max(0.1)
}

/// Draws strike times, positions and impulses for a traversal. Draw order per
/// step is fixed (placement x, placement y, impulse, interval), so two gaits
/// sharing a seed get identical relative perturbations.
fn plan_strikes(plan: &TraversalPlan, gait: &GaitProfile, rng: &mut ChaCha8Rng) -> Vec<Strike> {
    let n = plan.n_steps(gait.step_length);
    let dir = plan.direction();
    let mut t = LEAD_IN_S;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let dx: f64 = StandardNormal.sample(rng);
        let dy: f64 = StandardNormal.sample(rng);
        let side = if i % 2 == 0 { 0.5 } else { -0.5 };
        let impulse = gait.impulse_mean * factor(rng, gait.impulse_jitter);
        let interval = gait.cadence_s * factor(rng, gait.cadence_jitter).max(0.5);
        out.push(Strike {
            t,
            x: plan.x_start + dir * i as f64 * gait.step_length + gait.placement_jitter * dx,
            y: plan.line_y + side * gait.stance_width + gait.placement_jitter * dy,
            impulse,
        });
        t += interval;
    }
    out
}

/// Renders noiseless acceleration (`T x N_s`) for the given strikes.
pub fn render(floor: &FloorModel, strikes: &[Strike], layout: &SensorLayout, n_samples: usize) -> DMatrix<f64> {
    let fs = layout.sample_rate_hz();
    let n_sensors = layout.len();
    let mut out = DMatrix::zeros(n_samples, n_sensors);
    let mut modal = vec![0.0; n_samples];
    let mut injections = vec![Complex::new(0.0, 0.0); n_samples];

    for mode in floor.modes() {
        let pole = Complex::new(-mode.damping * mode.omega, mode.damped_omega());
        let step = (pole / fs).exp();

        injections.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for s in strikes {
            let first = (s.t * fs).ceil().max(0.0) as usize;
            if first >= n_samples {
                continue;
            }
            let weight = floor.mode_shape(mode, s.x, s.y) * s.impulse * mode.participation();
            let offset = first as f64 / fs - s.t;
            injections[first] += (pole * offset).exp() * weight;
        }

        let mut state = Complex::new(0.0, 0.0);
        for (q, inj) in modal.iter_mut().zip(&injections) {
            state = state * step + inj;
            *q = state.im;
        }

        for (j, sensor) in layout.sensors().iter().enumerate() {
            let shape = floor.mode_shape(mode, sensor.x, sensor.y);
            if shape == 0.0 {
                continue;
            }
            let mut col = out.column_mut(j);
            for (a, q) in col.iter_mut().zip(&modal) {
                *a += shape * q;
            }
        }
    }
    out
}

fn check_inputs(floor: &FloorModel, layout: &SensorLayout, gait: &GaitProfile, plan: &TraversalPlan) -> Result<()> {
    gait.validate()?;
    for s in layout.sensors() {
        if !floor.contains(s.x, s.y) {
            return Err(Error::Config(format!("sensor {:?} at ({}, {}) lies outside the floor", s.id, s.x, s.y)));
        }
    }
    if plan.x_start == plan.x_end {
        return Err(Error::Config("traversal start and end coincide".into()));
    }
    for x in [plan.x_start, plan.x_end] {
        if !floor.contains(x, plan.line_y) {
            return Err(Error::Config(format!("traversal endpoint ({x}, {}) lies outside the floor", plan.line_y)));
        }
    }
    if gait.cadence_s < 2.0 * DEFAULT_WINDOW_S {
        return Err(Error::Config(format!(
            "cadence {} s is shorter than two analysis windows ({} s)",
            gait.cadence_s,
            2.0 * DEFAULT_WINDOW_S
        )));
    }
    Ok(())
}

/// Noiseless record plus labels, leaving `rng` positioned for noise draws.
fn simulate_clean(
    floor: &FloorModel,
    plan: &TraversalPlan,
    gait: &GaitProfile,
    layout: &SensorLayout,
    rng: &mut ChaCha8Rng,
) -> Result<(DMatrix<f64>, Vec<FootstepLabel>)> {
    check_inputs(floor, layout, gait, plan)?;
    let strikes = plan_strikes(plan, gait, rng);
    for s in &strikes {
        if !floor.contains(s.x, s.y) {
            return Err(Error::Config(format!("strike at ({:.3}, {:.3}) falls off the floor", s.x, s.y)));
        }
    }
    let last = strikes.last().map_or(0.0, |s| s.t);
    let n_samples = ((last + TAIL_S) * layout.sample_rate_hz()).ceil() as usize;
    let samples = render(floor, &strikes, layout, n_samples);
    let labels = strikes
        .iter()
        .enumerate()
        .map(|(k, s)| FootstepLabel {
            step_index: k as u32,
            timestamp_s: s.t,
            x: s.x,
            y: s.y,
            subject: plan.subject.clone(),
            traversal: plan.traversal.clone(),
        })
        .collect();
    Ok((samples, labels))
}

fn add_noise(samples: &mut DMatrix<f64>, std: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    if std == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("noise std {std}: {e}")))?;
    // row-major draw order
    for r in 0..samples.nrows() {
        for c in 0..samples.ncols() {
            samples[(r, c)] += normal.sample(rng);
        }
    }
    Ok(())
}

/// Simulates one traversal with i.i.d. Gaussian sensor noise of `noise_std`
/// (m/s²). Deterministic per seed.
pub fn simulate_traversal(
    floor: &FloorModel,
    plan: &TraversalPlan,
    gait: &GaitProfile,
    layout: &SensorLayout,
    noise_std: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if !(noise_std.is_finite() && noise_std >= 0.0) {
        return Err(Error::Config(format!("noise std must be >= 0, got {noise_std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut samples, labels) = simulate_clean(floor, plan, gait, layout, &mut rng)?;
    add_noise(&mut samples, noise_std, &mut rng)?;
    LabeledDataset::new(WaveformRecord::new(layout.clone(), samples, 0.0)?, labels)
}

/// SplitMix64 finalizer, used to derive per-traversal seeds.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Eleven sensors on the corridor centerline at irregular spacing.
pub fn default_layout(floor: &FloorConfig) -> SensorLayout {
    const OFFSETS: [f64; 11] = [0.0, 0.35, -0.4, 0.2, -0.25, 0.45, -0.1, 0.3, -0.35, 0.15, 0.0];
    let (first, last) = (1.0, floor.length_x - 1.0);
    let pitch = (last - first) / 10.0;
    let sensors = OFFSETS
        .iter()
        .enumerate()
        .map(|(i, off)| Sensor::new(format!("A{:02}", i + 1), first + pitch * i as f64 + off, floor.width_y / 2.0))
        .collect();
    SensorLayout::new(sensors, 1024.0).expect("default layout is valid")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectSpec {
    pub name: String,
    pub gait: GaitProfile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub floor: FloorConfig,
    pub subjects: Vec<SubjectSpec>,
    pub traversals: usize,
    /// Lateral offsets of the walking lines from the corridor centerline;
    /// traversal `i` uses line `i mod len`.
    pub line_offsets: Vec<f64>,
    /// First marker position; traversals alternate direction.
    pub x_first: f64,
    pub steps_per_traversal: usize,
    /// Sensor noise std as a fraction of the campaign-median peak amplitude.
    pub noise_fraction: f64,
    pub sensors: Vec<Sensor>,
    pub sample_rate_hz: f64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        let floor = FloorConfig::default();
        let layout = default_layout(&floor);
        CampaignConfig {
            floor,
            subjects: vec![
                SubjectSpec {
                    name: "S1".into(),
                    gait: GaitProfile::subject_one(),
                },
                SubjectSpec {
                    name: "S2".into(),
                    gait: GaitProfile::subject_two(),
                },
            ],
            traversals: 6,
            line_offsets: vec![-0.3, 0.0, 0.3],
            x_first: 0.44,
            steps_per_traversal: 27,
            noise_fraction: 0.01,
            sensors: layout.sensors().to_vec(),
            sample_rate_hz: layout.sample_rate_hz(),
        }
    }
}

impl CampaignConfig {
    pub fn layout(&self) -> Result<SensorLayout> {
        SensorLayout::new(self.sensors.clone(), self.sample_rate_hz)
    }

    /// Plan for traversal `index` (0-based) of `subject`.
    pub fn plan(&self, subject: &str, index: usize, step_length: f64) -> TraversalPlan {
        let offset = self.line_offsets[index % self.line_offsets.len()];
        let span = step_length * (self.steps_per_traversal.max(1) - 1) as f64;
        let (a, b) = (self.x_first, self.x_first + span);
        let (x_start, x_end) = if index % 2 == 0 { (a, b) } else { (b, a) };
        TraversalPlan {
            line_y: self.floor.width_y / 2.0 + offset,
            x_start,
            x_end,
            subject: subject.to_string(),
            traversal: format!("Tr{}", index + 1),
        }
    }
}

/// Simulates every (subject, traversal) pair, subjects outermost.
pub fn simulate_campaign(cfg: &CampaignConfig, seed: u64) -> Result<Vec<LabeledDataset>> {
    if cfg.line_offsets.is_empty() || cfg.traversals == 0 || cfg.subjects.is_empty() {
        return Err(Error::Config("campaign needs subjects, traversals and walking lines".into()));
    }
    if !(cfg.noise_fraction.is_finite() && cfg.noise_fraction >= 0.0) {
        return Err(Error::Config(format!("noise fraction must be >= 0, got {}", cfg.noise_fraction)));
    }
    let floor = build_floor(&cfg.floor)?;
    let layout = cfg.layout()?;
    let jobs: Vec<(usize, &SubjectSpec, usize)> = cfg
        .subjects
        .iter()
        .flat_map(|s| (0..cfg.traversals).map(move |t| (s, t)))
        .enumerate()
        .map(|(i, (s, t))| (i, s, t))
        .collect();

    let clean: Vec<(DMatrix<f64>, Vec<FootstepLabel>, ChaCha8Rng)> = jobs
        .par_iter()
        .map(|&(i, subject, t)| {
            let plan = cfg.plan(&subject.name, t, subject.gait.step_length);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let (samples, labels) = simulate_clean(&floor, &plan, &subject.gait, &layout, &mut rng)?;
            Ok((samples, labels, rng))
        })
        .collect::<Result<_>>()?;

    let mut peaks: Vec<f64> = clean
        .iter()
        .flat_map(|(s, _, _)| s.column_iter().map(|c| c.amax()))
        .collect();
    peaks.sort_by(f64::total_cmp);
    let median = peaks[peaks.len() / 2];
    let noise_std = cfg.noise_fraction * median;

    clean
        .into_par_iter()
        .map(|(mut samples, labels, mut rng)| {
            add_noise(&mut samples, noise_std, &mut rng)?;
            LabeledDataset::new(WaveformRecord::new(layout.clone(), samples, 0.0)?, labels)
        })
        .collect()
}

/// Two subjects, six traversals each, 27 steps per traversal.
pub fn default_campaign(seed: u64) -> Result<Vec<LabeledDataset>> {
    simulate_campaign(&CampaignConfig::default(), seed)
}
