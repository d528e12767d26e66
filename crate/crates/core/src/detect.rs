//! Foot-strike detection from the composite detection signal.
//!
//! `g(t)` is the mean absolute acceleration over all sensors, smoothed by a
//! centered moving average. A local maximum of the smoothed signal is a strike
//! candidate when it exceeds a fraction of a reference maximum: the global
//! maximum offline, or a trailing running maximum when streaming. Candidates
//! closer than the minimum separation collapse onto the larger peak.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dataset::WaveformRecord;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectionMode {
    Offline,
    Streaming,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectionConfig {
    pub smooth_window_samples: usize,
    pub threshold_fraction: f64,
    pub min_separation_s: f64,
    pub mode: DetectionMode,
    pub streaming_max_horizon_s: f64,
}

impl Default for DetectionConfig {
    fn default() -> Self {
        DetectionConfig {
            smooth_window_samples: 31,
            threshold_fraction: 0.2,
            min_separation_s: 0.2,
            mode: DetectionMode::Offline,
            streaming_max_horizon_s: 5.0,
        }
    }
}

impl DetectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.smooth_window_samples == 0 || self.smooth_window_samples % 2 == 0 {
            return Err(Error::Config(format!(
                "smoothing window must be odd and positive, got {}",
                self.smooth_window_samples
            )));
        }
        if !(self.threshold_fraction > 0.0 && self.threshold_fraction < 1.0) {
            return Err(Error::Config(format!(
                "threshold fraction must lie in (0, 1), got {}",
                self.threshold_fraction
            )));
        }
        if !(self.min_separation_s.is_finite() && self.min_separation_s > 0.0) {
            return Err(Error::Config(format!(
                "minimum separation must be positive, got {}",
                self.min_separation_s
            )));
        }
        if !(self.streaming_max_horizon_s.is_finite() && self.streaming_max_horizon_s > 0.0) {
            return Err(Error::Config("streaming horizon must be positive".into()));
        }
        Ok(())
    }

    /// Minimum gap between kept events, in samples.
    pub fn separation_samples(&self, sample_rate_hz: f64) -> usize {
        (self.min_separation_s * sample_rate_hz - 1e-9).ceil().max(1.0) as usize
    }
}

/// Detected strikes: sample indices `s_k` and smoothed peak heights.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventList {
    pub timestamps: Vec<usize>,
    pub peak_values: Vec<f64>,
}

impl EventList {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    fn push(&mut self, index: usize, value: f64) {
        self.timestamps.push(index);
        self.peak_values.push(value);
    }
}

/// `g(t) = (1/N_s) * sum_j |a_j(t)|`.
pub fn composite_signal(record: &WaveformRecord) -> Result<Vec<f64>> {
    if record.is_empty() {
        return Err(Error::Empty("waveform record"));
    }
    let samples = record.samples();
    let n = samples.ncols() as f64;
    Ok(samples
        .row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>() / n)
        .collect())
}

fn composite_row(row: &[f64]) -> f64 {
    row.iter().map(|v| v.abs()).sum::<f64>() / row.len() as f64
}

/// Centered moving average; near the edges the window is truncated to the
/// available samples.
pub fn smooth(g: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Config(format!(
            "smoothing window must be odd and positive, got {window}"
        )));
    }
    let half = window / 2;
    Ok((0..g.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(g.len() - 1);
            window_mean(&g[lo..=hi])
        })
        .collect())
}

fn window_mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn is_local_max(prev: f64, cur: f64, next: f64) -> bool {
    // first sample of a plateau counts, so flat tops yield one candidate
    cur > prev && cur >= next
}

pub fn detect_events(g_smoothed: &[f64], cfg: &DetectionConfig, sample_rate_hz: f64) -> Result<EventList> {
    cfg.validate()?;
    if !(sample_rate_hz.is_finite() && sample_rate_hz > 0.0) {
        return Err(Error::Config(format!("invalid sample rate {sample_rate_hz}")));
    }
    match cfg.mode {
        DetectionMode::Offline => Ok(detect_offline(g_smoothed, cfg, sample_rate_hz)),
        DetectionMode::Streaming => {
            let mut picker = PeakPicker::new(cfg, sample_rate_hz);
            for &v in g_smoothed {
                picker.push(v);
            }
            Ok(picker.finish())
        }
    }
}

fn detect_offline(g: &[f64], cfg: &DetectionConfig, sample_rate_hz: f64) -> EventList {
    let global_max = g.iter().copied().fold(0.0_f64, f64::max);
    let threshold = cfg.threshold_fraction * global_max;
    let mut candidates: Vec<usize> = (1..g.len().saturating_sub(1))
        .filter(|&i| g[i] > threshold && is_local_max(g[i - 1], g[i], g[i + 1]))
        .collect();
    // largest first; ties resolved towards the earlier sample
    candidates.sort_by(|&a, &b| g[b].total_cmp(&g[a]).then(a.cmp(&b)));

    let sep = cfg.separation_samples(sample_rate_hz);
    let mut kept: Vec<usize> = Vec::new();
    for c in candidates {
        if kept.iter().all(|&k| k.abs_diff(c) >= sep) {
            kept.push(c);
        }
    }
    kept.sort_unstable();
    let mut events = EventList::default();
    for i in kept {
        events.push(i, g[i]);
    }
    events
}

/// Detects strikes over a whole record with the configured mode.
pub fn detect(record: &WaveformRecord, cfg: &DetectionConfig) -> Result<EventList> {
    cfg.validate()?;
    let g = smooth(&composite_signal(record)?, cfg.smooth_window_samples)?;
    detect_events(&g, cfg, record.sample_rate_hz())
}

/// Causal peak picker over an already smoothed signal.
///
/// The threshold reference is the running maximum over a trailing horizon. A
/// candidate is held until `min_separation` samples pass without a larger
/// peak; a larger peak inside that span replaces it. Output gaps are always at
/// least the minimum separation.
#[derive(Debug, Clone)]
pub struct PeakPicker {
    fraction: f64,
    sep: usize,
    horizon: usize,
    index: usize,
    prev: Option<(f64, f64)>,
    running_max: VecDeque<(usize, f64)>,
    pending: Option<(usize, f64)>,
    last_emitted: Option<usize>,
    events: EventList,
}

impl PeakPicker {
    pub fn new(cfg: &DetectionConfig, sample_rate_hz: f64) -> Self {
        PeakPicker {
            fraction: cfg.threshold_fraction,
            sep: cfg.separation_samples(sample_rate_hz),
            horizon: (cfg.streaming_max_horizon_s * sample_rate_hz).round().max(1.0) as usize,
            index: 0,
            prev: None,
            running_max: VecDeque::new(),
            pending: None,
            last_emitted: None,
            events: EventList::default(),
        }
    }

    pub fn push(&mut self, value: f64) {
        let i = self.index;
        self.index += 1;

        if let Some((p2, p1)) = self.prev {
            // sample i-1 is complete: running_max covers [i-1-horizon, i-1]
            let reference = self.running_max.front().map_or(0.0, |&(_, v)| v);
            if p1 > self.fraction * reference && is_local_max(p2, p1, value) {
                self.offer(i - 1, p1);
            }
        }

        while self.running_max.back().is_some_and(|&(_, v)| v <= value) {
            self.running_max.pop_back();
        }
        self.running_max.push_back((i, value));
        while self.running_max.front().is_some_and(|&(j, _)| j + self.horizon < i) {
            self.running_max.pop_front();
        }

        if let Some((j, v)) = self.pending {
            if i >= j + self.sep {
                self.emit(j, v);
            }
        }
        self.prev = Some((self.prev.map_or(value, |(_, p1)| p1), value));
    }

    fn offer(&mut self, index: usize, value: f64) {
        if self.last_emitted.is_some_and(|e| index < e + self.sep) {
            return;
        }
        match self.pending {
            Some((_, v)) if v >= value => {}
            _ => self.pending = Some((index, value)),
        }
    }

    fn emit(&mut self, index: usize, value: f64) {
        self.events.push(index, value);
        self.last_emitted = Some(index);
        self.pending = None;
    }

    /// Events confirmed so far (pending candidate excluded).
    pub fn events(&self) -> &EventList {
        &self.events
    }

    pub fn finish(mut self) -> EventList {
        if let Some((j, v)) = self.pending.take() {
            self.emit(j, v);
        }
        self.events
    }
}

/// Sample-by-sample detector: composite signal, centered smoothing (with a
/// latency of half the smoothing window) and the causal [`PeakPicker`].
///
/// Feeding a whole record and calling [`finish`](Self::finish) yields the same
/// events as [`detect`] in streaming mode.
#[derive(Debug, Clone)]
pub struct StreamingDetector {
    half: usize,
    raw: VecDeque<f64>,
    raw_start: usize,
    received: usize,
    emitted_smoothed: usize,
    picker: PeakPicker,
}

impl StreamingDetector {
    pub fn new(cfg: &DetectionConfig, sample_rate_hz: f64) -> Result<Self> {
        cfg.validate()?;
        Ok(StreamingDetector {
            half: cfg.smooth_window_samples / 2,
            raw: VecDeque::new(),
            raw_start: 0,
            received: 0,
            emitted_smoothed: 0,
            picker: PeakPicker::new(cfg, sample_rate_hz),
        })
    }

    /// Pushes one synchronized sample row (one value per sensor).
    pub fn push_row(&mut self, row: &[f64]) {
        self.push_composite(composite_row(row));
    }

    pub fn push_composite(&mut self, g: f64) {
        self.raw.push_back(g);
        self.received += 1;
        // smoothed sample i needs raw samples up to i + half
        while self.emitted_smoothed + self.half < self.received {
            self.emit_smoothed();
        }
    }

    fn emit_smoothed(&mut self) {
        let i = self.emitted_smoothed;
        let lo = i.saturating_sub(self.half);
        let hi = (i + self.half).min(self.received - 1);
        while self.raw_start < lo {
            self.raw.pop_front();
            self.raw_start += 1;
        }
        let (a, b) = self.raw.as_slices();
        let window: Vec<f64> = a.iter().chain(b).take(hi - lo + 1).copied().collect();
        self.picker.push(window_mean(&window));
        self.emitted_smoothed += 1;
    }

    pub fn events(&self) -> &EventList {
        self.picker.events()
    }

    pub fn finish(mut self) -> EventList {
        while self.emitted_smoothed < self.received {
            self.emit_smoothed();
        }
        self.picker.finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Sensor, SensorLayout};
    use nalgebra::DMatrix;
    use proptest::prelude::*;

    fn record(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> WaveformRecord {
        let sensors = (0..cols).map(|i| Sensor::new(format!("s{i}"), i as f64, 0.0)).collect();
        let layout = SensorLayout::new(sensors, 1024.0).unwrap();
        WaveformRecord::new(layout, DMatrix::from_fn(rows, cols, f), 0.0).unwrap()
    }

    /// Triangular pulses of half-width `w` samples centered on `centers`.
    fn pulses(len: usize, centers: &[(usize, f64)], w: usize) -> Vec<f64> {
        let mut g = vec![0.0; len];
        for &(c, amp) in centers {
            for (i, v) in g.iter_mut().enumerate() {
                let d = i.abs_diff(c);
                if d < w {
                    *v += amp * (1.0 - d as f64 / w as f64);
                }
            }
        }
        g
    }

    #[test]
    fn composite_examples() {
        assert!(composite_signal(&record(10, 3, |_, _| 0.0)).unwrap().iter().all(|&v| v == 0.0));
        let c = composite_signal(&record(4, 1, |_, _| -2.5)).unwrap();
        assert!(c.iter().all(|&v| v == 2.5));
        let two = composite_signal(&record(1, 2, |_, c| if c == 0 { 3.0 } else { -4.0 })).unwrap();
        assert_eq!(two, vec![3.5]);
    }

    #[test]
    fn smooth_examples() {
        let x = [0.3, -1.0, 2.0, 5.5];
        assert_eq!(smooth(&x, 1).unwrap(), x.to_vec());
        let c = smooth(&[0.7; 50], 31).unwrap();
        assert!(c.iter().all(|v| (v - 0.7).abs() < 1e-15));
        let s = smooth(&[0.0, 0.0, 1.0, 0.0, 0.0], 3).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(s, vec![0.0, third, third, third, 0.0]);
        let edge = smooth(&[3.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(edge[0], 1.5);
        assert!(smooth(&x, 4).is_err());
        assert!(smooth(&x, 0).is_err());
    }

    #[test]
    fn flat_signal_gives_no_events() {
        let cfg = DetectionConfig::default();
        assert!(detect_events(&[0.0; 500], &cfg, 1024.0).unwrap().is_empty());
        let stream = DetectionConfig {
            mode: DetectionMode::Streaming,
            ..cfg
        };
        assert!(detect_events(&[0.0; 500], &stream, 1024.0).unwrap().is_empty());
    }

    #[test]
    fn five_pulses_500ms_apart() {
        let centers: Vec<(usize, f64)> = (0..5).map(|i| (300 + i * 512, 1.0)).collect();
        let g = pulses(3000, &centers, 20);
        for mode in [DetectionMode::Offline, DetectionMode::Streaming] {
            let cfg = DetectionConfig {
                mode,
                ..Default::default()
            };
            let ev = detect_events(&smooth(&g, 31).unwrap(), &cfg, 1024.0).unwrap();
            assert_eq!(ev.len(), 5, "{mode:?}");
            for (t, (c, _)) in ev.timestamps.iter().zip(&centers) {
                assert!(t.abs_diff(*c) <= 1, "{mode:?}: {t} vs {c}");
            }
        }
    }

    #[test]
    fn close_pulses_merge_onto_the_larger() {
        // 100 ms apart at 1024 Hz is 102 samples
        let g = pulses(1500, &[(600, 0.6), (702, 1.0)], 15);
        for mode in [DetectionMode::Offline, DetectionMode::Streaming] {
            let cfg = DetectionConfig {
                mode,
                smooth_window_samples: 1,
                ..Default::default()
            };
            let ev = detect_events(&g, &cfg, 1024.0).unwrap();
            assert_eq!(ev.timestamps, vec![702], "{mode:?}");
        }
    }

    #[test]
    fn invalid_config_is_rejected() {
        let bad = DetectionConfig {
            threshold_fraction: 1.0,
            ..Default::default()
        };
        assert!(matches!(detect_events(&[0.0; 5], &bad, 1024.0), Err(Error::Config(_))));
        let even = DetectionConfig {
            smooth_window_samples: 30,
            ..Default::default()
        };
        assert!(even.validate().is_err());
    }

    #[test]
    fn streaming_detector_matches_batch_streaming_mode() {
        let cfg = DetectionConfig {
            mode: DetectionMode::Streaming,
            ..Default::default()
        };
        let centers: Vec<(usize, f64)> = (0..8).map(|i| (400 + i * 480, 1.0 + 0.3 * (i % 3) as f64)).collect();
        let g = pulses(4500, &centers, 25);
        let rec = record(g.len(), 2, |r, c| if c == 0 { g[r] } else { -g[r] });
        let batch = detect(&rec, &cfg).unwrap();
        let mut det = StreamingDetector::new(&cfg, 1024.0).unwrap();
        for r in 0..rec.num_samples() {
            let row: Vec<f64> = rec.samples().row(r).iter().copied().collect();
            det.push_row(&row);
        }
        assert_eq!(det.finish(), batch);
        assert_eq!(batch.len(), 8);
    }

    #[test]
    fn streaming_threshold_tracks_recent_maximum() {
        // a loud strike followed, after the horizon, by quiet ones
        let mut centers = vec![(300, 10.0)];
        centers.extend((0..4).map(|i| (7000 + i * 512, 1.0)));
        let g = pulses(9500, &centers, 20);
        let offline = detect_events(&g, &DetectionConfig::default(), 1024.0).unwrap();
        assert_eq!(offline.len(), 1);
        let streaming = DetectionConfig {
            mode: DetectionMode::Streaming,
            ..Default::default()
        };
        assert_eq!(detect_events(&g, &streaming, 1024.0).unwrap().len(), 5);
    }

    proptest! {
        #[test]
        fn events_are_separated_and_scale_invariant(
            seeds in prop::collection::vec((0usize..4000, 0.1f64..2.0), 1..15),
            scale in 0.01f64..100.0,
            streaming in any::<bool>(),
        ) {
            let g = pulses(4096, &seeds, 12);
            let cfg = DetectionConfig {
                mode: if streaming { DetectionMode::Streaming } else { DetectionMode::Offline },
                ..Default::default()
            };
            let sep = cfg.separation_samples(1024.0);
            let ev = detect_events(&g, &cfg, 1024.0).unwrap();
            for w in ev.timestamps.windows(2) {
                prop_assert!(w[1] > w[0]);
                prop_assert!(w[1] - w[0] >= sep);
            }
            // powers of two scale exactly, so comparisons cannot flip
            let pow2 = 2f64.powi(scale.log2().round() as i32);
            let scaled: Vec<f64> = g.iter().map(|v| v * pow2).collect();
            let ev2 = detect_events(&scaled, &cfg, 1024.0).unwrap();
            prop_assert_eq!(&ev.timestamps, &ev2.timestamps);
        }
    }
}
