//! Four-layer policy validation: offline reconstruction, action quality,
//! teacher-forced rollout drift, inference consistency, and the weighted
//! overall score.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{StreamKind, ACTION_DIM};
use crate::sync::AlignedEpisode;

pub const EPSILON: f64 = 1e-8;
pub const LAYER1_MAE_THRESHOLD: f64 = 0.05;
pub const LAYER3_GROWTH_THRESHOLD: f64 = 0.1;
pub const LINEAR_POLICY_FORMAT: &str = "vtk-linear-policy-v1";

#[derive(Debug, Error, PartialEq)]
pub enum ValidateError {
    #[error("episode `{0}` has no action_command stream")]
    MissingActionStream(String),
    #[error("need at least {needed} actions, got {got}")]
    TooShort { needed: usize, got: usize },
    #[error("episode too short: need more than {needed} frames, got {got}")]
    EpisodeTooShort { needed: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("policy failure: {0}")]
    Policy(String),
}

pub type Result<T, E = ValidateError> = std::result::Result<T, E>;

/// One demonstration: per-frame observation features and expert actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Demo {
    pub id: String,
    pub observations: Array2<f64>,
    pub actions: Array2<f64>,
}

impl Demo {
    pub fn new(id: impl Into<String>, observations: Array2<f64>, actions: Array2<f64>) -> Result<Self> {
        if actions.ncols() != ACTION_DIM {
            return Err(ValidateError::DimensionMismatch {
                expected: ACTION_DIM,
                got: actions.ncols(),
            });
        }
        if observations.nrows() != actions.nrows() {
            return Err(ValidateError::DimensionMismatch {
                expected: actions.nrows(),
                got: observations.nrows(),
            });
        }
        Ok(Self {
            id: id.into(),
            observations,
            actions,
        })
    }

    /// Observations are the proprioceptive columns in name order.
    pub fn from_aligned(ep: &AlignedEpisode) -> Result<Self> {
        let (_, action) = ep
            .first_of_kind(StreamKind::ActionCommand)
            .ok_or_else(|| ValidateError::MissingActionStream(ep.id.clone()))?;
        let proprio: Vec<ArrayView2<'_, f64>> = ep
            .columns
            .values()
            .filter(|c| matches!(c.kind, StreamKind::JointPos | StreamKind::JointVel | StreamKind::EePose | StreamKind::Gripper))
            .map(|c| c.values.view())
            .collect();
        let obs = if proprio.is_empty() {
            Array2::zeros((ep.len(), 0))
        } else {
            ndarray::concatenate(Axis(1), &proprio).expect("aligned columns share the timeline")
        };
        Self::new(ep.id.clone(), obs, action.values.clone())
    }

    pub fn len(&self) -> usize {
        self.actions.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn obs_dim(&self) -> usize {
        self.observations.ncols()
    }

    /// The `n` most recent observation rows ending at `frame`, padded by
    /// repeating the first frame.
    pub fn history(&self, frame: usize, n: usize) -> Array2<f64> {
        let mut h = Array2::zeros((n, self.obs_dim()));
        for (k, mut row) in h.outer_iter_mut().enumerate() {
            let src = (frame + k + 1).saturating_sub(n);
            row.assign(&self.observations.row(src));
        }
        h
    }

    pub fn observation(&self, episode: usize, frame: usize, n: usize) -> Observation {
        Observation {
            episode,
            frame,
            history: self.history(frame, n),
        }
    }
}

/// What a policy sees: an observation window plus where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub episode: usize,
    pub frame: usize,
    /// `n_obs_steps x obs_dim`, oldest first.
    pub history: Array2<f64>,
}

pub trait Policy {
    fn name(&self) -> String;

    fn n_obs_steps(&self) -> usize {
        1
    }

    fn is_stochastic(&self) -> bool {
        false
    }

    fn act(&mut self, obs: &Observation) -> Result<Array1<f64>>;
}

/// Returns the recorded expert action for the observed frame.
#[derive(Debug, Clone)]
pub struct ReplayExpert {
    actions: Vec<Array2<f64>>,
}

impl ReplayExpert {
    pub fn new(demos: &[Demo]) -> Self {
        Self {
            actions: demos.iter().map(|d| d.actions.clone()).collect(),
        }
    }

    fn lookup(&self, obs: &Observation) -> Result<Array1<f64>> {
        self.actions
            .get(obs.episode)
            .filter(|a| obs.frame < a.nrows())
            .map(|a| a.row(obs.frame).to_owned())
            .ok_or_else(|| ValidateError::Policy(format!("no expert action for episode {} frame {}", obs.episode, obs.frame)))
    }
}

impl Policy for ReplayExpert {
    fn name(&self) -> String {
        "replay".into()
    }

    fn act(&mut self, obs: &Observation) -> Result<Array1<f64>> {
        self.lookup(obs)
    }
}

/// Expert action plus i.i.d. Gaussian noise per dimension.
#[derive(Debug, Clone)]
pub struct NoisyExpert {
    expert: ReplayExpert,
    sigma: f64,
    noise: Normal<f64>,
    rng: ChaCha8Rng,
}

impl NoisyExpert {
    pub fn new(demos: &[Demo], sigma: f64, seed: u64) -> Result<Self> {
        let noise = Normal::new(0.0, sigma).map_err(|e| ValidateError::InvalidConfig(format!("noise sigma: {e}")))?;
        if sigma < 0.0 || !sigma.is_finite() {
            return Err(ValidateError::InvalidConfig("noise sigma must be finite and non-negative".into()));
        }
        Ok(Self {
            expert: ReplayExpert::new(demos),
            sigma,
            noise,
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }
}

impl Policy for NoisyExpert {
    fn name(&self) -> String {
        format!("noisy:{}", self.sigma)
    }

    fn is_stochastic(&self) -> bool {
        self.sigma > 0.0
    }

    fn act(&mut self, obs: &Observation) -> Result<Array1<f64>> {
        let mut a = self.expert.lookup(obs)?;
        a.mapv_inplace(|v| v + self.noise.sample(&mut self.rng));
        Ok(a)
    }
}

#[derive(Debug, Clone)]
pub struct ConstantPolicy(pub Array1<f64>);

impl Policy for ConstantPolicy {
    fn name(&self) -> String {
        "constant".into()
    }

    fn act(&mut self, _obs: &Observation) -> Result<Array1<f64>> {
        Ok(self.0.clone())
    }
}

/// Affine map from the flattened observation window to the action.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicy {
    pub format: String,
    pub n_obs_steps: usize,
    pub obs_dim: usize,
    /// `14 x (n_obs_steps * obs_dim)`.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearPolicy {
    /// Least-squares fit over every frame of every demo.
    pub fn fit(demos: &[Demo], n_obs_steps: usize) -> Result<Self> {
        let n_obs_steps = n_obs_steps.max(1);
        let obs_dim = demos.first().map_or(0, Demo::obs_dim);
        if demos.iter().any(|d| d.obs_dim() != obs_dim) {
            return Err(ValidateError::InvalidConfig("demos disagree on observation width".into()));
        }
        let rows: usize = demos.iter().map(Demo::len).sum();
        if rows == 0 {
            return Err(ValidateError::TooShort { needed: 1, got: 0 });
        }
        let width = n_obs_steps * obs_dim + 1;
        let mut x = DMatrix::<f64>::zeros(rows, width);
        let mut y = DMatrix::<f64>::zeros(rows, ACTION_DIM);
        let mut r = 0;
        for d in demos {
            for f in 0..d.len() {
                for (c, v) in d.history(f, n_obs_steps).iter().enumerate() {
                    x[(r, c)] = *v;
                }
                x[(r, width - 1)] = 1.0;
                for c in 0..ACTION_DIM {
                    y[(r, c)] = d.actions[[f, c]];
                }
                r += 1;
            }
        }
        let coef = x
            .svd(true, true)
            .solve(&y, 1e-12)
            .map_err(|e| ValidateError::Policy(format!("least squares: {e}")))?;
        Ok(Self {
            format: LINEAR_POLICY_FORMAT.into(),
            n_obs_steps,
            obs_dim,
            weights: (0..ACTION_DIM).map(|o| (0..width - 1).map(|c| coef[(c, o)]).collect()).collect(),
            bias: (0..ACTION_DIM).map(|o| coef[(width - 1, o)]).collect(),
        })
    }

    pub fn check(&self) -> Result<()> {
        let width = self.n_obs_steps * self.obs_dim;
        if self.format != LINEAR_POLICY_FORMAT {
            return Err(ValidateError::InvalidConfig(format!("unknown policy format `{}`", self.format)));
        }
        if self.n_obs_steps == 0 || self.bias.len() != ACTION_DIM || self.weights.len() != ACTION_DIM {
            return Err(ValidateError::DimensionMismatch {
                expected: ACTION_DIM,
                got: self.bias.len(),
            });
        }
        if let Some(bad) = self.weights.iter().find(|r| r.len() != width) {
            return Err(ValidateError::DimensionMismatch {
                expected: width,
                got: bad.len(),
            });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| ValidateError::InvalidConfig(format!("policy checkpoint: {e}")))?;
        p.check()?;
        Ok(p)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ValidateError::InvalidConfig(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl Policy for LinearPolicy {
    fn name(&self) -> String {
        "linear".into()
    }

    fn n_obs_steps(&self) -> usize {
        self.n_obs_steps
    }

    fn act(&mut self, obs: &Observation) -> Result<Array1<f64>> {
        let flat: Vec<f64> = obs.history.iter().copied().collect();
        if flat.len() != self.n_obs_steps * self.obs_dim {
            return Err(ValidateError::DimensionMismatch {
                expected: self.n_obs_steps * self.obs_dim,
                got: flat.len(),
            });
        }
        Ok(Array1::from_iter(
            self.weights
                .iter()
                .zip(&self.bias)
                .map(|(w, b)| b + w.iter().zip(&flat).map(|(a, x)| a * x).sum::<f64>()),
        ))
    }
}

fn act_checked(policy: &mut dyn Policy, obs: &Observation) -> Result<Array1<f64>> {
    let a = policy.act(obs)?;
    if a.len() != ACTION_DIM {
        return Err(ValidateError::DimensionMismatch {
            expected: ACTION_DIM,
            got: a.len(),
        });
    }
    Ok(a)
}

/// Population mean and standard deviation via Welford's update.
fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
    for x in values {
        n += 1.0;
        let delta = x - mean;
        mean += delta / n;
        m2 += delta * (x - mean);
    }
    if n == 0.0 {
        (0.0, 0.0)
    } else {
        (mean, (m2 / n).sqrt())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer1Report {
    pub mae: f64,
    pub mse: f64,
    pub expert_similarity: f64,
    pub per_dim_mae: Vec<f64>,
    pub n_frames: usize,
    pub pass: bool,
}

impl Layer1Report {
    /// Metrics for paired prediction/expert rows.
    pub fn from_pairs(pred: ArrayView2<'_, f64>, expert: ArrayView2<'_, f64>) -> Self {
        let diff = &pred - &expert;
        let n = diff.len().max(1) as f64;
        let mae = diff.iter().map(|d| d.abs()).sum::<f64>() / n;
        let mse = diff.iter().map(|d| d * d).sum::<f64>() / n;
        let (_, sigma) = mean_std(expert.iter().copied());
        let rows = diff.nrows().max(1) as f64;
        Self {
            mae,
            mse,
            expert_similarity: 1.0 - mae / (sigma + EPSILON),
            per_dim_mae: diff.axis_iter(Axis(1)).map(|c| c.iter().map(|d| d.abs()).sum::<f64>() / rows).collect(),
            n_frames: diff.nrows(),
            pass: mae < LAYER1_MAE_THRESHOLD,
        }
    }
}

/// Offline reconstruction over `n_samples` frames drawn from all demos.
pub fn layer1(policy: &mut dyn Policy, demos: &[Demo], n_samples: usize, seed: u64) -> Result<Layer1Report> {
    if n_samples == 0 {
        return Err(ValidateError::InvalidConfig("n_samples must be at least 1".into()));
    }
    let frames: Vec<(usize, usize)> = demos
        .iter()
        .enumerate()
        .flat_map(|(e, d)| (0..d.len()).map(move |f| (e, f)))
        .collect();
    if frames.is_empty() {
        return Err(ValidateError::TooShort { needed: 1, got: 0 });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if n_samples <= frames.len() {
        let mut v = index::sample(&mut rng, frames.len(), n_samples).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..n_samples).map(|_| rng.random_range(0..frames.len())).collect()
    };
    let mut pred = Array2::zeros((picks.len(), ACTION_DIM));
    let mut expert = Array2::zeros((picks.len(), ACTION_DIM));
    let n_obs = policy.n_obs_steps();
    for (r, &p) in picks.iter().enumerate() {
        let (e, f) = frames[p];
        let a = act_checked(policy, &demos[e].observation(e, f, n_obs))?;
        pred.row_mut(r).assign(&a);
        expert.row_mut(r).assign(&demos[e].actions.row(f));
    }
    Ok(Layer1Report::from_pairs(pred.view(), expert.view()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalBounds {
    pub position: f64,
    /// Per-step first difference.
    pub velocity: f64,
    /// Per-step second difference.
    pub acceleration: f64,
}

impl Default for PhysicalBounds {
    fn default() -> Self {
        Self {
            position: std::f64::consts::PI,
            velocity: 0.5,
            acceleration: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct Violations {
    pub position: usize,
    pub velocity: usize,
    pub acceleration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer2Report {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub range: Vec<f64>,
    pub action_diff_mean: f64,
    pub jerk_mean: f64,
    pub smoothness_score: f64,
    pub validity_violations: Violations,
    pub energy_mean: f64,
}

/// Smoothness and physical plausibility of an action sequence (`T x dim`).
pub fn layer2(actions: ArrayView2<'_, f64>, bounds: &PhysicalBounds) -> Result<Layer2Report> {
    let t = actions.nrows();
    if t < 4 {
        return Err(ValidateError::TooShort { needed: 4, got: t });
    }
    let cols: Vec<(f64, f64)> = actions.axis_iter(Axis(1)).map(|c| mean_std(c.iter().copied())).collect();
    let range = actions
        .axis_iter(Axis(1))
        .map(|c| {
            let (lo, hi) = c.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            hi - lo
        })
        .collect();
    let diff = &actions.slice(s![1.., ..]) - &actions.slice(s![..-1, ..]);
    let accel = &diff.slice(s![1.., ..]) - &diff.slice(s![..-1, ..]);
    // a[t+2] - 3a[t+1] + 3a[t] - a[t-1] for t = 1..T-3
    let n = actions.nrows();
    let jerk = &actions.slice(s![3.., ..]) - &(&actions.slice(s![2..n - 1, ..]) * 3.0)
        + &(&actions.slice(s![1..n - 2, ..]) * 3.0)
        - actions.slice(s![..n - 3, ..]);
    let mean_abs = |a: &Array2<f64>| a.iter().map(|v| v.abs()).sum::<f64>() / a.len() as f64;
    let jerk_mean = mean_abs(&jerk);
    let count = |a: ArrayView2<'_, f64>, limit: f64| a.iter().filter(|v| v.abs() > limit).count();
    Ok(Layer2Report {
        mean: cols.iter().map(|c| c.0).collect(),
        std: cols.iter().map(|c| c.1).collect(),
        range,
        action_diff_mean: mean_abs(&diff),
        jerk_mean,
        smoothness_score: 1.0 / (1.0 + jerk_mean),
        validity_violations: Violations {
            position: count(actions, bounds.position),
            velocity: count(diff.view(), bounds.velocity),
            acceleration: count(accel.view(), bounds.acceleration),
        },
        energy_mean: actions.outer_iter().map(|r| r.dot(&r)).sum::<f64>() / t as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer3Report {
    pub error_curve: Vec<f64>,
    pub final_error: f64,
    pub error_growth: f64,
    pub pass: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl Layer3Report {
    pub fn from_curve(error_curve: Vec<f64>) -> Self {
        let first = error_curve.first().copied().unwrap_or(0.0);
        let final_error = error_curve.last().copied().unwrap_or(0.0);
        let error_growth = final_error - first;
        Self {
            error_curve,
            final_error,
            error_growth,
            pass: error_growth < LAYER3_GROWTH_THRESHOLD,
            note: (error_growth < 0.0).then(|| "negative growth: error shrinks over the horizon".to_string()),
        }
    }
}

/// Teacher-forced `K`-step rollout starting at the first full observation window.
pub fn layer3(policy: &mut dyn Policy, demo: &Demo, episode: usize, k: usize) -> Result<Layer3Report> {
    let n_obs = policy.n_obs_steps();
    if demo.len() <= k + n_obs {
        return Err(ValidateError::EpisodeTooShort {
            needed: k + n_obs,
            got: demo.len(),
        });
    }
    let start = n_obs - 1;
    let mut curve = Vec::with_capacity(k + 1);
    for t in 0..=k {
        let f = start + t;
        let a = act_checked(policy, &demo.observation(episode, f, n_obs))?;
        let e = a.iter().zip(demo.actions.row(f)).map(|(p, x)| (p - x).abs()).sum::<f64>() / ACTION_DIM as f64;
        curve.push(e);
    }
    Ok(Layer3Report::from_curve(curve))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConsistencyClass {
    VeryLow,
    Low,
    Medium,
    High,
    VeryHigh,
}

impl ConsistencyClass {
    pub fn classify(mean_variance: f64) -> Self {
        match mean_variance {
            v if v < 0.001 => Self::VeryLow,
            v if v < 0.01 => Self::Low,
            v if v < 0.05 => Self::Medium,
            v if v < 0.1 => Self::High,
            _ => Self::VeryHigh,
        }
    }
}

impl fmt::Display for ConsistencyClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::VeryLow => "Very Low",
            Self::Low => "Low",
            Self::Medium => "Medium",
            Self::High => "High",
            Self::VeryHigh => "Very High",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer4Report {
    pub per_dim_variance: Vec<f64>,
    pub mean_variance: f64,
    pub consistency_score: f64,
    pub classification: ConsistencyClass,
    pub repeats: usize,
}

/// Repeats inference on one observation and measures the spread.
pub fn layer4(policy: &mut dyn Policy, obs: &Observation, repeats: usize) -> Result<Layer4Report> {
    if repeats < 2 {
        return Err(ValidateError::InvalidConfig("consistency needs at least two repeats".into()));
    }
    let mut mean = Array1::<f64>::zeros(ACTION_DIM);
    let mut m2 = Array1::<f64>::zeros(ACTION_DIM);
    for i in 1..=repeats {
        let a = act_checked(policy, obs)?;
        for d in 0..ACTION_DIM {
            let delta = a[d] - mean[d];
            mean[d] += delta / i as f64;
            m2[d] += delta * (a[d] - mean[d]);
        }
    }
    let per_dim_variance: Vec<f64> = m2.iter().map(|v| v / repeats as f64).collect();
    let mean_variance = per_dim_variance.iter().sum::<f64>() / ACTION_DIM as f64;
    Ok(Layer4Report {
        consistency_score: 1.0 - mean_variance.min(1.0),
        classification: ConsistencyClass::classify(mean_variance),
        per_dim_variance,
        mean_variance,
        repeats,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grade {
    Excellent,
    Good,
    Fair,
    Poor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradeThresholds {
    pub excellent: f64,
    pub good: f64,
    pub fair: f64,
}

impl Default for GradeThresholds {
    fn default() -> Self {
        Self {
            excellent: 0.85,
            good: 0.70,
            fair: 0.55,
        }
    }
}

impl GradeThresholds {
    pub fn grade(&self, overall: f64) -> Grade {
        if overall >= self.excellent {
            Grade::Excellent
        } else if overall >= self.good {
            Grade::Good
        } else if overall >= self.fair {
            Grade::Fair
        } else {
            Grade::Poor
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallScore {
    pub reconstruction: f64,
    pub smoothness: f64,
    pub stability: f64,
    pub consistency: f64,
    pub overall: f64,
    pub grade: Grade,
}

/// Compensated summation, so contributions that add to one give exactly one.
fn neumaier(values: &[f64]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &v in values {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Weighted contributions from the four component metrics.
pub fn overall_from_metrics(
    expert_similarity: f64,
    jerk_mean: f64,
    error_growth: f64,
    mean_variance: f64,
    thresholds: &GradeThresholds,
) -> OverallScore {
    let reconstruction = 0.40 * expert_similarity.clamp(0.0, 1.0);
    let smoothness = 0.30 * (1.0 / (1.0 + jerk_mean.max(0.0)));
    let stability = 0.20 * (1.0 / (1.0 + 100.0 * error_growth.max(0.0)));
    let consistency = 0.10 * (1.0 - mean_variance.clamp(0.0, 1.0));
    let overall = neumaier(&[reconstruction, smoothness, stability, consistency]);
    OverallScore {
        reconstruction,
        smoothness,
        stability,
        consistency,
        overall,
        grade: thresholds.grade(overall),
    }
}

pub fn overall(l1: &Layer1Report, l2: &Layer2Report, l3: &Layer3Report, l4: &Layer4Report, thresholds: &GradeThresholds) -> OverallScore {
    overall_from_metrics(l1.expert_similarity, l2.jerk_mean, l3.error_growth, l4.mean_variance, thresholds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidationConfig {
    pub layers: Vec<u8>,
    pub n_samples: usize,
    pub seed: u64,
    /// Rollout horizon for layer 3.
    pub horizon: usize,
    pub repeats: usize,
    /// Demo used for layers 2 to 4.
    pub episode: usize,
    pub bounds: PhysicalBounds,
    pub grades: GradeThresholds,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            layers: vec![1, 2, 3, 4],
            n_samples: 1000,
            seed: 0,
            horizon: 10,
            repeats: 100,
            episode: 0,
            bounds: PhysicalBounds::default(),
            grades: GradeThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub policy: String,
    pub config: ValidationConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer1: Option<Layer1Report>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer2: Option<Layer2Report>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer3: Option<Layer3Report>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer4: Option<Layer4Report>,
    /// Present only when all four layers ran.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub score: Option<OverallScore>,
}

/// Runs the selected layers. Layer 2 scores the policy's teacher-forced
/// actions over the whole selected demo; layer 4 uses its middle frame.
pub fn validate(policy: &mut dyn Policy, demos: &[Demo], cfg: &ValidationConfig) -> Result<ValidationReport> {
    if let Some(bad) = cfg.layers.iter().find(|l| !(1..=4).contains(*l)) {
        return Err(ValidateError::InvalidConfig(format!("unknown layer {bad}")));
    }
    let demo = demos
        .get(cfg.episode)
        .ok_or_else(|| ValidateError::InvalidConfig(format!("episode index {} out of range", cfg.episode)))?;
    let wants = |l: u8| cfg.layers.contains(&l);
    let n_obs = policy.n_obs_steps();
    let layer1 = wants(1).then(|| layer1(policy, demos, cfg.n_samples, cfg.seed)).transpose()?;
    let layer2 = if wants(2) {
        let mut acts = Array2::zeros((demo.len(), ACTION_DIM));
        for f in 0..demo.len() {
            acts.row_mut(f).assign(&act_checked(policy, &demo.observation(cfg.episode, f, n_obs))?);
        }
        Some(layer2(acts.view(), &cfg.bounds)?)
    } else {
        None
    };
    let layer3 = wants(3).then(|| layer3(policy, demo, cfg.episode, cfg.horizon)).transpose()?;
    let layer4 = if wants(4) {
        if demo.is_empty() {
            return Err(ValidateError::TooShort { needed: 1, got: 0 });
        }
        Some(layer4(policy, &demo.observation(cfg.episode, demo.len() / 2, n_obs), cfg.repeats)?)
    } else {
        None
    };
    let score = match (&layer1, &layer2, &layer3, &layer4) {
        (Some(a), Some(b), Some(c), Some(d)) => Some(overall(a, b, c, d, &cfg.grades)),
        _ => None,
    };
    Ok(ValidationReport {
        policy: policy.name(),
        config: cfg.clone(),
        layer1,
        layer2,
        layer3,
        layer4,
        score,
    })
}

/// Expert trajectory with constant velocity per joint; all values are
/// dyadic, so every finite difference is exact.
pub fn linear_expert_demo(id: &str, frames: usize) -> Demo {
    let actions = Array2::from_shape_fn((frames, ACTION_DIM), |(t, d)| {
        (d as f64 - 7.0) / 8.0 + (d as f64 + 1.0) * t as f64 / 1024.0
    });
    let observations = actions.mapv(|a| a - 1.0 / 64.0);
    Demo::new(id, observations, actions).expect("fixed shapes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    struct Offset<'a> {
        demo: &'a Demo,
        per_step: f64,
        start: f64,
    }

    impl Policy for Offset<'_> {
        fn name(&self) -> String {
            "offset".into()
        }

        fn act(&mut self, obs: &Observation) -> Result<Array1<f64>> {
            let extra = self.start + self.per_step * obs.frame as f64;
            Ok(self.demo.actions.row(obs.frame).mapv(|v| v + extra))
        }
    }

    fn zero_demo(frames: usize) -> Demo {
        Demo::new("z", Array2::zeros((frames, 3)), Array2::zeros((frames, ACTION_DIM))).unwrap()
    }

    #[test]
    fn replay_is_perfect() {
        let demos = vec![linear_expert_demo("a", 64), linear_expert_demo("b", 40)];
        let mut p = ReplayExpert::new(&demos);
        let r = validate(&mut p, &demos, &ValidationConfig { n_samples: 80, ..Default::default() }).unwrap();
        let l1 = r.layer1.as_ref().unwrap();
        assert_eq!((l1.mae, l1.mse, l1.expert_similarity), (0.0, 0.0, 1.0));
        assert!(l1.pass);
        assert_eq!(r.layer2.as_ref().unwrap().jerk_mean, 0.0);
        assert!(r.layer3.as_ref().unwrap().error_curve.iter().all(|&e| e == 0.0));
        assert_eq!(r.layer4.as_ref().unwrap().mean_variance, 0.0);
        let s = r.score.unwrap();
        assert_eq!(s.overall, 1.0);
        assert_eq!(s.grade, Grade::Excellent);
    }

    #[test]
    fn constant_offset_metrics() {
        let demo = zero_demo(20);
        let l1 = layer1(&mut Offset { demo: &demo, per_step: 0.0, start: 0.1 }, std::slice::from_ref(&demo), 20, 1).unwrap();
        assert!((l1.mae - 0.1).abs() < 1e-15);
        assert!((l1.mse - 0.01).abs() < 1e-15);
        assert!(l1.per_dim_mae.iter().all(|m| (m - 0.1).abs() < 1e-15));
    }

    /// Offsets every dimension of a single frame.
    struct Spike<'a> {
        demo: &'a Demo,
        value: f64,
    }

    impl Policy for Spike<'_> {
        fn name(&self) -> String {
            "spike".into()
        }

        fn act(&mut self, obs: &Observation) -> Result<Array1<f64>> {
            let extra = if obs.frame == 0 { self.value } else { 0.0 };
            Ok(self.demo.actions.row(obs.frame).mapv(|v| v + extra))
        }
    }

    #[test]
    fn layer1_threshold_is_strict() {
        // 14 errors of 0.5 over 140 entries: the sum 7.0 is exact and 7/140 rounds to 0.05
        let demo = zero_demo(10);
        let demos = std::slice::from_ref(&demo);
        let at = layer1(&mut Spike { demo: &demo, value: 0.5 }, demos, 10, 0).unwrap();
        assert_eq!(at.mae, 0.05);
        assert!(!at.pass);
        let below = layer1(&mut Spike { demo: &demo, value: 0.5 - 1e-12 }, demos, 10, 0).unwrap();
        assert!(below.mae < 0.05 && below.pass);
    }

    #[test]
    fn sampling_without_replacement_covers_all() {
        let demo = linear_expert_demo("a", 30);
        let r = layer1(&mut ReplayExpert::new(std::slice::from_ref(&demo)), std::slice::from_ref(&demo), 30, 5).unwrap();
        assert_eq!(r.n_frames, 30);
        assert!(layer1(&mut ReplayExpert::new(std::slice::from_ref(&demo)), std::slice::from_ref(&demo), 0, 5).is_err());
    }

    #[test]
    fn layer2_examples() {
        let affine = Array2::from_shape_fn((10, 2), |(t, d)| 0.5 + 0.25 * d as f64 + 0.125 * t as f64);
        let r = layer2(affine.view(), &PhysicalBounds::default()).unwrap();
        assert_eq!(r.jerk_mean, 0.0);
        assert_eq!(r.smoothness_score, 1.0);
        assert_eq!(r.action_diff_mean, 0.125);

        let alt = Array2::from_shape_fn((8, 1), |(t, _)| if t % 2 == 0 { 1.0 } else { -1.0 });
        let r = layer2(alt.view(), &PhysicalBounds::default()).unwrap();
        assert_eq!(r.jerk_mean, 8.0);
        assert_eq!(r.smoothness_score, 1.0 / 9.0);
        assert_eq!(r.validity_violations.velocity, 7);
        assert_eq!(r.validity_violations.acceleration, 6);
        assert_eq!(r.range, vec![2.0]);

        let unit = Array2::from_shape_fn((5, 2), |(_, d)| if d == 0 { 0.6 } else { 0.8 });
        assert!((layer2(unit.view(), &PhysicalBounds::default()).unwrap().energy_mean - 1.0).abs() < 1e-15);
        assert_eq!(
            layer2(Array2::zeros((3, 2)).view(), &PhysicalBounds::default()),
            Err(ValidateError::TooShort { needed: 4, got: 3 })
        );
    }

    #[test]
    fn jerk_matches_stencil_oracle() {
        let a = array![[0.0], [1.0], [4.0], [9.0], [16.0], [30.0]];
        let r = layer2(a.view(), &PhysicalBounds::default()).unwrap();
        // third differences of the values above: 0, 0, 5
        assert!((r.jerk_mean - 5.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn drift_gives_linear_growth() {
        let demo = zero_demo(30);
        let k = 12;
        let r = layer3(&mut Offset { demo: &demo, per_step: 0.01, start: 0.0 }, &demo, 0, k).unwrap();
        assert!((r.error_growth - 0.01 * k as f64).abs() < 1e-12);
        assert_eq!(r.error_growth, r.final_error - r.error_curve[0]);
        assert!(r.pass == (r.error_growth < 0.1));
        assert!(!r.pass);
    }

    #[test]
    fn layer3_threshold_and_negative_growth() {
        assert!(!Layer3Report::from_curve(vec![0.0, 0.1]).pass);
        assert!(Layer3Report::from_curve(vec![0.0, 0.099_999_999]).pass);
        let r = Layer3Report::from_curve(vec![0.2, 0.15, 0.1]);
        assert!((r.error_growth + 0.1).abs() < 1e-15);
        assert!(r.pass && r.note.is_some());
        let demo = zero_demo(5);
        assert!(matches!(layer3(&mut ReplayExpert::new(std::slice::from_ref(&demo)), &demo, 0, 5), Err(ValidateError::EpisodeTooShort { .. })));
    }

    #[test]
    fn consistency_classes() {
        use ConsistencyClass::*;
        let cases = [(0.0, VeryLow), (0.000_999, VeryLow), (0.001, Low), (0.01, Medium), (0.02, Medium), (0.05, High), (0.1, VeryHigh), (3.0, VeryHigh)];
        for (v, c) in cases {
            assert_eq!(ConsistencyClass::classify(v), c, "{v}");
        }
    }

    #[test]
    fn noisy_variance() {
        let demo = linear_expert_demo("a", 16);
        let mut p = NoisyExpert::new(std::slice::from_ref(&demo), 0.1, 3).unwrap();
        let r = layer4(&mut p, &demo.observation(0, 4, 1), 10_000).unwrap();
        assert!((r.mean_variance - 0.01).abs() < 0.001);
        let mut c = ConstantPolicy(Array1::from_elem(ACTION_DIM, 0.3));
        assert_eq!(layer4(&mut c, &demo.observation(0, 4, 1), 7).unwrap().mean_variance, 0.0);
    }

    #[test]
    fn linear_policy_recovers_affine_map_and_round_trips() {
        let demo = linear_expert_demo("a", 50);
        let mut p = LinearPolicy::fit(std::slice::from_ref(&demo), 2).unwrap();
        let l1 = layer1(&mut p, std::slice::from_ref(&demo), 50, 0).unwrap();
        assert!(l1.mae < 1e-9, "{}", l1.mae);
        let back = LinearPolicy::from_json(&p.to_json()).unwrap();
        assert_eq!(back, p);
        let mut broken = p.clone();
        broken.bias.pop();
        assert!(LinearPolicy::from_json(&broken.to_json()).is_err());
    }

    #[test]
    fn history_pads_with_first_frame() {
        let demo = Demo::new("h", array![[1.0], [2.0], [3.0]], Array2::zeros((3, ACTION_DIM))).unwrap();
        assert_eq!(demo.history(0, 3), array![[1.0], [1.0], [1.0]]);
        assert_eq!(demo.history(1, 3), array![[1.0], [1.0], [2.0]]);
        assert_eq!(demo.history(2, 2), array![[2.0], [3.0]]);
    }

    #[test]
    fn overall_examples() {
        let g = GradeThresholds::default();
        assert_eq!(overall_from_metrics(1.0, 0.0, 0.0, 0.0, &g).overall, 1.0);
        assert!(overall_from_metrics(0.0, 1e12, 1e12, 5.0, &g).overall < 1e-9);
        let d = overall_from_metrics(0.848, 0.0, 0.0002, 0.0001, &g);
        assert!((d.reconstruction - 0.3392).abs() < 1e-12);
        assert!((d.stability - 0.2 / 1.02).abs() < 1e-12);
        assert!((d.stability - 0.19608).abs() < 1e-5);
        assert!((d.consistency - 0.09999).abs() < 1e-12);
        assert_eq!(overall_from_metrics(0.5, 0.0, -0.5, 0.0, &g).stability, 0.2);
        assert_eq!(g.grade(0.674), Grade::Fair);
        assert_eq!(g.grade(0.774), Grade::Good);
        assert_eq!(g.grade(0.836), Grade::Good);
        assert_eq!(g.grade(0.85), Grade::Excellent);
        assert_eq!(g.grade(0.2), Grade::Poor);
    }

    proptest! {
        #[test]
        fn overall_monotone(es in 0.0f64..1.0, jerk in 0.0f64..5.0, growth in -0.2f64..0.5, var in 0.0f64..1.5, bump in 0.0f64..0.5) {
            let g = GradeThresholds::default();
            let base = overall_from_metrics(es, jerk, growth, var, &g);
            prop_assert!((0.0..=1.0).contains(&base.overall));
            let parts = base.reconstruction + base.smoothness + base.stability + base.consistency;
            prop_assert!((base.overall - parts).abs() < 1e-15);
            prop_assert!(overall_from_metrics((es + bump).min(1.0), jerk, growth, var, &g).overall >= base.overall);
            prop_assert!(overall_from_metrics(es, jerk + bump, growth, var, &g).overall <= base.overall);
            prop_assert!(overall_from_metrics(es, jerk, growth + bump, var, &g).overall <= base.overall);
            prop_assert!(overall_from_metrics(es, jerk, growth, var + bump, &g).overall <= base.overall);
        }

        #[test]
        fn deterministic_adapters_have_zero_variance(k in 2usize..200, frame in 0usize..16) {
            let demo = linear_expert_demo("a", 16);
            let mut p = ReplayExpert::new(std::slice::from_ref(&demo));
            prop_assert_eq!(layer4(&mut p, &demo.observation(0, frame, 1), k).unwrap().mean_variance, 0.0);
        }
    }
}
