//! Channel-wise sliding-window n-sigma detection, heuristic weak labels and
//! cross-modal (gripper vs. tactile) consistency checks.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{Episode, StreamKind};
use crate::sync::{row_norm, AlignedEpisode};

#[derive(Debug, Error, PartialEq)]
pub enum AnomalyError {
    #[error("window {window} larger than series length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("window must be at least 2, got {0}")]
    WindowTooSmall(usize),
    #[error("n-sigma threshold must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("rule needs a `{0}` stream")]
    MissingStream(String),
}

/// Windowed mean and population variance. Entry `i` is the window ending at
/// sample `i + window - 1`; earlier samples are warm-up.
#[derive(Debug, Clone, PartialEq)]
pub struct SlidingStats {
    pub window: usize,
    pub means: Vec<f64>,
    pub variances: Vec<f64>,
}

impl SlidingStats {
    /// Statistics of the window ending at sample `t`.
    pub fn at(&self, t: usize) -> Option<(f64, f64)> {
        let i = t.checked_sub(self.window - 1)?;
        Some((*self.means.get(i)?, self.variances[i]))
    }
}

/// Running mean / sum of squared deviations over a FIFO window, with an exact
/// recompute every `window` updates to stop drift from the add/remove updates.
#[derive(Debug, Clone)]
struct Window {
    cap: usize,
    buf: VecDeque<f64>,
    mean: f64,
    m2: f64,
    since_refresh: usize,
}

impl Window {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            buf: VecDeque::with_capacity(cap + 1),
            mean: 0.0,
            m2: 0.0,
            since_refresh: 0,
        }
    }

    fn is_full(&self) -> bool {
        self.buf.len() == self.cap
    }

    fn push(&mut self, x: f64) {
        if self.buf.len() < self.cap {
            self.buf.push_back(x);
            let n = self.buf.len() as f64;
            let delta = x - self.mean;
            self.mean += delta / n;
            self.m2 += delta * (x - self.mean);
        } else {
            let old = self.buf.pop_front().expect("full window");
            self.buf.push_back(x);
            if x != old {
                let old_mean = self.mean;
                self.mean += (x - old) / self.cap as f64;
                self.m2 += (x - old) * (x - self.mean + old - old_mean);
            }
            self.since_refresh += 1;
            if self.since_refresh >= self.cap {
                self.refresh();
            }
        }
    }

    fn refresh(&mut self) {
        let n = self.buf.len() as f64;
        self.mean = self.buf.iter().sum::<f64>() / n;
        self.m2 = self.buf.iter().map(|v| (v - self.mean).powi(2)).sum();
        self.since_refresh = 0;
    }

    fn variance(&self) -> f64 {
        (self.m2 / self.buf.len() as f64).max(0.0)
    }
}

fn check_window(len: usize, window: usize) -> Result<(), AnomalyError> {
    if window < 2 {
        return Err(AnomalyError::WindowTooSmall(window));
    }
    if len < window {
        return Err(AnomalyError::WindowTooLarge { window, len });
    }
    Ok(())
}

pub fn sliding_stats(series: &[f64], window: usize) -> Result<SlidingStats, AnomalyError> {
    check_window(series.len(), window)?;
    let mut w = Window::new(window);
    let mut means = Vec::with_capacity(series.len() - window + 1);
    let mut variances = Vec::with_capacity(means.capacity());
    for &x in series {
        w.push(x);
        if w.is_full() {
            means.push(w.mean);
            variances.push(w.variance());
        }
    }
    Ok(SlidingStats {
        window,
        means,
        variances,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaConfig {
    pub window: usize,
    pub n_sigma: f64,
    pub eps_var: f64,
    /// Exclude flagged samples from later window statistics.
    pub masked: bool,
}

impl Default for SigmaConfig {
    fn default() -> Self {
        Self {
            window: 100,
            n_sigma: 3.0,
            eps_var: 1e-12,
            masked: true,
        }
    }
}

/// A run of consecutive flagged samples, as inclusive sample indices.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlagRun {
    pub start: usize,
    pub end: usize,
    /// Largest |z| inside the run.
    pub score: f64,
}

/// Flags `x_t` when `|x_t - mean| > n * sqrt(var + eps)` with statistics of the
/// preceding window. The first `window` samples only warm the window up.
pub fn flag_sigma(series: &[f64], cfg: &SigmaConfig) -> Result<Vec<FlagRun>, AnomalyError> {
    if !(cfg.n_sigma > 0.0) {
        return Err(AnomalyError::InvalidSigma(cfg.n_sigma));
    }
    check_window(series.len(), cfg.window)?;
    let mut w = Window::new(cfg.window);
    let mut runs: Vec<FlagRun> = Vec::new();
    for (t, &x) in series.iter().enumerate() {
        if !w.is_full() {
            w.push(x);
            continue;
        }
        let z = (x - w.mean).abs() / (w.variance() + cfg.eps_var).sqrt();
        let flagged = z > cfg.n_sigma;
        if flagged {
            match runs.last_mut() {
                Some(run) if run.end + 1 == t => {
                    run.end = t;
                    run.score = run.score.max(z);
                }
                _ => runs.push(FlagRun { start: t, end: t, score: z }),
            }
        }
        if !(flagged && cfg.masked) {
            w.push(x);
        }
    }
    Ok(runs)
}

/// Indices of every flagged sample.
pub fn flagged_indices(series: &[f64], cfg: &SigmaConfig) -> Result<Vec<usize>, AnomalyError> {
    Ok(flag_sigma(series, cfg)?
        .into_iter()
        .flat_map(|r| r.start..=r.end)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    SigmaSpike,
    DistributionShift,
    CrossModalConflict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub stream: String,
    pub channel: usize,
    pub span: (f64, f64),
    pub kind: AnomalyKind,
    pub score: f64,
}

/// Sigma events for one channel of a timestamped series.
pub fn detect_sigma(
    stream: &str,
    channel: usize,
    timestamps: &[f64],
    series: &[f64],
    cfg: &SigmaConfig,
) -> Result<Vec<AnomalyEvent>, AnomalyError> {
    Ok(flag_sigma(series, cfg)?
        .into_iter()
        .map(|r| AnomalyEvent {
            stream: stream.to_owned(),
            channel,
            span: (timestamps[r.start], timestamps[r.end]),
            kind: AnomalyKind::SigmaSpike,
            score: r.score,
        })
        .collect())
}

/// Runs sigma detection over every channel of every raw stream. Streams
/// shorter than the window are skipped.
pub fn scan_episode(ep: &Episode, cfg: &SigmaConfig) -> Result<Vec<AnomalyEvent>, AnomalyError> {
    let mut events = Vec::new();
    for (name, s) in &ep.streams {
        if s.len() <= cfg.window {
            continue;
        }
        for (c, col) in s.records.columns().into_iter().enumerate() {
            let series = col.to_vec();
            events.extend(detect_sigma(name, c, &s.timestamps, &series, cfg)?);
        }
    }
    Ok(events)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeakLabelKind {
    ContactOnset,
    AnomalousInteraction,
    FailedDemonstration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabel {
    pub kind: WeakLabelKind,
    pub t: f64,
    /// Id of the single rule that produced this label.
    pub evidence: String,
    pub stream: String,
}

pub const RULE_CONTACT: &str = "tactile_threshold_crossing";
pub const RULE_TAIL_SIGMA: &str = "sigma_event_in_tail";
pub const RULE_CROSS_MODAL: &str = "gripper_tactile_conflict";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContactRule {
    /// Fixed magnitude threshold; self-calibrated per episode when `None`.
    pub threshold: Option<f64>,
    pub calibration_seconds: f64,
    pub calibration_sigmas: f64,
    /// Frames the magnitude must stay above threshold after the crossing.
    pub hold_frames: usize,
}

impl Default for ContactRule {
    fn default() -> Self {
        Self {
            threshold: None,
            calibration_seconds: 0.5,
            calibration_sigmas: 4.0,
            hold_frames: 3,
        }
    }
}

impl ContactRule {
    /// Fixed threshold, or mean + k·std of the magnitude over the calibration prefix.
    pub fn threshold_for(&self, timeline: &[f64], magnitude: &[f64]) -> f64 {
        if let Some(th) = self.threshold {
            return th;
        }
        let t0 = timeline.first().copied().unwrap_or(0.0);
        let prefix: Vec<f64> = timeline
            .iter()
            .zip(magnitude)
            .take_while(|(t, _)| **t < t0 + self.calibration_seconds)
            .map(|(_, m)| *m)
            .collect();
        let prefix = if prefix.is_empty() { &magnitude[..1.min(magnitude.len())] } else { &prefix[..] };
        if prefix.is_empty() {
            return 0.0;
        }
        let n = prefix.len() as f64;
        let mean = prefix.iter().sum::<f64>() / n;
        let std = (prefix.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n).sqrt();
        mean + self.calibration_sigmas * std
    }

    /// Frames where `active` switches on and stays on for `hold_frames`.
    fn onsets(&self, active: &[bool]) -> Vec<usize> {
        let hold = self.hold_frames.max(1);
        (1..active.len())
            .filter(|&i| {
                !active[i - 1] && i + hold <= active.len() && active[i..i + hold].iter().all(|&a| a)
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureRule {
    pub sigma: SigmaConfig,
    /// Trailing fraction of the episode in which a sigma event marks failure.
    pub tail_fraction: f64,
}

impl Default for FailureRule {
    fn default() -> Self {
        Self {
            sigma: SigmaConfig::default(),
            tail_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossModalConfig {
    /// Seconds on either side of an event searched for the other modality.
    pub lag: f64,
    /// Gripper width below which a channel counts as closed; half the
    /// episode's maximum width per channel when `None`.
    pub close_width: Option<f64>,
    pub contact: ContactRule,
}

impl Default for CrossModalConfig {
    fn default() -> Self {
        Self {
            lag: 0.5,
            close_width: None,
            contact: ContactRule::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRules {
    pub contact_onset: Option<ContactRule>,
    pub failed_demonstration: Option<FailureRule>,
    pub anomalous_interaction: Option<CrossModalConfig>,
}

impl Default for LabelRules {
    fn default() -> Self {
        Self {
            contact_onset: Some(ContactRule::default()),
            failed_demonstration: Some(FailureRule::default()),
            anomalous_interaction: Some(CrossModalConfig::default()),
        }
    }
}

impl LabelRules {
    /// Default rules restricted to those whose input streams `ep` carries.
    pub fn applicable(ep: &AlignedEpisode) -> Self {
        let has = |k| ep.first_of_kind(k).is_some();
        let tactile = has(StreamKind::TactileFeature);
        let d = Self::default();
        Self {
            contact_onset: d.contact_onset.filter(|_| tactile),
            failed_demonstration: d.failed_demonstration.filter(|_| proprio_columns(ep).next().is_some()),
            anomalous_interaction: d
                .anomalous_interaction
                .filter(|_| tactile && has(StreamKind::Gripper)),
        }
    }
}

fn proprio_columns(ep: &AlignedEpisode) -> impl Iterator<Item = (&String, &crate::sync::AlignedColumn)> {
    ep.columns
        .iter()
        .filter(|(_, c)| matches!(c.kind, StreamKind::JointPos | StreamKind::JointVel))
}

fn magnitudes(values: &ndarray::Array2<f64>) -> Vec<f64> {
    values.rows().into_iter().map(row_norm).collect()
}

pub fn label_events(ep: &AlignedEpisode, rules: &LabelRules) -> Result<Vec<WeakLabel>, AnomalyError> {
    let mut labels = Vec::new();

    if let Some(rule) = &rules.contact_onset {
        let mut any = false;
        for (name, col) in ep.columns_of_kind(StreamKind::TactileFeature) {
            any = true;
            let mag = magnitudes(&col.values);
            let th = rule.threshold_for(&ep.timeline, &mag);
            let active: Vec<bool> = mag.iter().map(|&m| m > th).collect();
            for i in rule.onsets(&active) {
                labels.push(WeakLabel {
                    kind: WeakLabelKind::ContactOnset,
                    t: ep.timeline[i],
                    evidence: RULE_CONTACT.into(),
                    stream: name.clone(),
                });
            }
        }
        if !any {
            return Err(AnomalyError::MissingStream(StreamKind::TactileFeature.to_string()));
        }
    }

    if let Some(rule) = &rules.failed_demonstration {
        let mut any = false;
        let tail_start = ep.len() - ((ep.len() as f64 * rule.tail_fraction).ceil() as usize).min(ep.len());
        for (name, col) in proprio_columns(ep) {
            any = true;
            if ep.len() <= rule.sigma.window {
                continue;
            }
            let hit = col.values.columns().into_iter().try_fold(false, |hit, series| {
                let runs = flag_sigma(&series.to_vec(), &rule.sigma)?;
                Ok::<_, AnomalyError>(hit || runs.iter().any(|r| r.end >= tail_start))
            })?;
            if hit {
                labels.push(WeakLabel {
                    kind: WeakLabelKind::FailedDemonstration,
                    t: ep.timeline[tail_start],
                    evidence: RULE_TAIL_SIGMA.into(),
                    stream: name.clone(),
                });
            }
        }
        if !any {
            return Err(AnomalyError::MissingStream(StreamKind::JointPos.to_string()));
        }
    }

    if let Some(cfg) = &rules.anomalous_interaction {
        for ev in cross_modal_check(ep, cfg)? {
            labels.push(WeakLabel {
                kind: WeakLabelKind::AnomalousInteraction,
                t: ev.span.0,
                evidence: RULE_CROSS_MODAL.into(),
                stream: ev.stream,
            });
        }
    }

    labels.sort_by(|a, b| a.t.total_cmp(&b.t));
    Ok(labels)
}

/// Flags gripper closures with no tactile contact within the lag window, and
/// tactile contact onsets while every gripper channel stays open.
pub fn cross_modal_check(ep: &AlignedEpisode, cfg: &CrossModalConfig) -> Result<Vec<AnomalyEvent>, AnomalyError> {
    let (grip_name, grip) = ep
        .first_of_kind(StreamKind::Gripper)
        .ok_or_else(|| AnomalyError::MissingStream(StreamKind::Gripper.to_string()))?;
    let tactile: Vec<_> = ep.columns_of_kind(StreamKind::TactileFeature).collect();
    if tactile.is_empty() {
        return Err(AnomalyError::MissingStream(StreamKind::TactileFeature.to_string()));
    }

    let n = ep.len();
    let mut contact = vec![false; n];
    let mut peak = vec![0.0f64; n];
    for (_, col) in &tactile {
        let mag = magnitudes(&col.values);
        let th = cfg.contact.threshold_for(&ep.timeline, &mag);
        for i in 0..n {
            contact[i] |= mag[i] > th;
            peak[i] = peak[i].max(mag[i]);
        }
    }

    let channels = grip.values.ncols();
    let close_width: Vec<f64> = (0..channels)
        .map(|c| {
            cfg.close_width.unwrap_or_else(|| {
                0.5 * grip.values.column(c).iter().copied().fold(f64::NEG_INFINITY, f64::max)
            })
        })
        .collect();
    let open = |i: usize, c: usize| grip.values[[i, c]] > close_width[c];

    let t = &ep.timeline;
    let lag_range = |i: usize| {
        let lo = t.partition_point(|&x| x < t[i] - cfg.lag);
        let hi = t.partition_point(|&x| x <= t[i] + cfg.lag);
        lo..hi
    };

    let mut events = Vec::new();
    for c in 0..channels {
        for i in 1..n {
            if open(i - 1, c) && !open(i, c) {
                let r = lag_range(i);
                if !contact[r.clone()].iter().any(|&a| a) {
                    let peak_mag = peak[r.clone()].iter().copied().fold(0.0, f64::max);
                    events.push(AnomalyEvent {
                        stream: grip_name.clone(),
                        channel: c,
                        span: (t[r.start], t[r.end - 1]),
                        kind: AnomalyKind::CrossModalConflict,
                        score: peak_mag,
                    });
                }
            }
        }
    }

    let tactile_name = tactile[0].0;
    for i in cfg.contact.onsets(&contact) {
        let r = lag_range(i);
        let all_open = r.clone().all(|j| (0..channels).all(|c| open(j, c)));
        if all_open {
            events.push(AnomalyEvent {
                stream: tactile_name.clone(),
                channel: 0,
                span: (t[r.start], t[r.end - 1]),
                kind: AnomalyKind::CrossModalConflict,
                score: peak[i],
            });
        }
    }
    events.sort_by(|a, b| a.span.0.total_cmp(&b.span.0));
    Ok(events)
}

/// One JSON object per line.
pub fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    items
        .iter()
        .map(|i| serde_json::to_string(i).expect("plain data serializes") + "\n")
        .collect()
}
