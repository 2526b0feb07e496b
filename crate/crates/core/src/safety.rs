//! Post-processing of raw policy actions into joint commands that respect
//! joint limits and a per-step motion bound.

use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::ACTION_DIM;

#[derive(Debug, Error, PartialEq)]
pub enum SafetyError {
    #[error("non-finite value at step {step}")]
    NonFinite { step: usize },
    #[error("interpolation interval is empty or reversed: [{0}, {1}]")]
    DegenerateInterval(f64, f64),
    #[error("time {t} outside interpolation interval [{t0}, {t1}]")]
    OutsideInterval { t: f64, t0: f64, t1: f64 },
    #[error("invalid safety config: {0}")]
    InvalidConfig(String),
    #[error("expected {expected} values, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("initial configuration violates joint {joint} limits")]
    InitialOutOfLimits { joint: usize },
    #[error("trace: {0}")]
    Trace(String),
}

pub type Result<T, E = SafetyError> = std::result::Result<T, E>;

pub type Joints = [f64; ACTION_DIM];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VelocityMode {
    /// Rescale the whole step to the norm bound.
    #[default]
    Norm,
    /// Clamp each joint's step independently to `v_max * dt`.
    PerJoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafetyConfig {
    pub q_min: Vec<f64>,
    pub q_max: Vec<f64>,
    /// Radians per second, applied to the step norm.
    pub v_max: f64,
    pub dt: f64,
    pub velocity_mode: VelocityMode,
    pub interpolation: bool,
    /// Emitted samples per inference interval when interpolating.
    pub substeps: usize,
    pub q0: Vec<f64>,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            q_min: vec![-std::f64::consts::PI; ACTION_DIM],
            q_max: vec![std::f64::consts::PI; ACTION_DIM],
            v_max: 1.0,
            dt: 1.0 / 30.0,
            velocity_mode: VelocityMode::Norm,
            interpolation: false,
            substeps: 1,
            q0: vec![0.0; ACTION_DIM],
        }
    }
}

fn to_joints(v: &[f64], what: &str) -> Result<Joints> {
    v.try_into().map_err(|_| {
        SafetyError::InvalidConfig(format!("{what} needs {ACTION_DIM} values, got {}", v.len()))
    })
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<()> {
        let lo = to_joints(&self.q_min, "q_min")?;
        let hi = to_joints(&self.q_max, "q_max")?;
        if let Some(j) = (0..ACTION_DIM).find(|&j| !(lo[j] < hi[j]) || !lo[j].is_finite() || !hi[j].is_finite()) {
            return Err(SafetyError::InvalidConfig(format!("joint {j}: q_min must be below q_max")));
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) || !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SafetyError::InvalidConfig("v_max and dt must be positive".into()));
        }
        if self.substeps == 0 {
            return Err(SafetyError::InvalidConfig("substeps must be at least 1".into()));
        }
        to_joints(&self.q0, "q0")?;
        Ok(())
    }

    pub fn step_bound(&self) -> f64 {
        self.v_max * self.dt
    }

    fn limits(&self) -> (Joints, Joints) {
        (to_joints(&self.q_min, "q_min").expect("validated"), to_joints(&self.q_max, "q_max").expect("validated"))
    }
}

pub fn apply_delta(q_last: &Joints, a_delta: &Joints) -> Result<Joints> {
    let mut out = [0.0; ACTION_DIM];
    for j in 0..ACTION_DIM {
        out[j] = q_last[j] + a_delta[j];
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(SafetyError::NonFinite { step: 0 });
    }
    Ok(out)
}

pub fn clip_joints(q: &Joints, cfg: &SafetyConfig) -> Joints {
    let (lo, hi) = cfg.limits();
    let mut out = *q;
    for j in 0..ACTION_DIM {
        out[j] = out[j].clamp(lo[j], hi[j]);
    }
    out
}

fn norm(v: &Joints) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn limit_velocity(q_cmd: &Joints, q_prev: &Joints, cfg: &SafetyConfig) -> Joints {
    let bound = cfg.step_bound();
    let mut delta = [0.0; ACTION_DIM];
    for j in 0..ACTION_DIM {
        delta[j] = q_cmd[j] - q_prev[j];
    }
    match cfg.velocity_mode {
        VelocityMode::Norm => {
            let n = norm(&delta);
            if n <= bound {
                return *q_cmd;
            }
            let scale = bound / n;
            let mut out = *q_prev;
            for j in 0..ACTION_DIM {
                out[j] += delta[j] * scale;
            }
            out
        }
        VelocityMode::PerJoint => {
            let mut out = *q_prev;
            for j in 0..ACTION_DIM {
                out[j] += delta[j].clamp(-bound, bound);
            }
            out
        }
    }
}

/// `(1 - s) q_prev + s q_cmd` with `s = (t - t_k) / (t_k1 - t_k)`; both ends are exact.
pub fn interpolate(q_prev: &Joints, q_cmd: &Joints, t: f64, t_k: f64, t_k1: f64) -> Result<Joints> {
    if !(t_k < t_k1) {
        return Err(SafetyError::DegenerateInterval(t_k, t_k1));
    }
    if !(t_k..=t_k1).contains(&t) {
        return Err(SafetyError::OutsideInterval { t, t0: t_k, t1: t_k1 });
    }
    let s = (t - t_k) / (t_k1 - t_k);
    let mut out = [0.0; ACTION_DIM];
    for j in 0..ACTION_DIM {
        out[j] = (1.0 - s) * q_prev[j] + s * q_cmd[j];
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Absolute,
    Delta,
}

impl FromStr for ActionMode {
    type Err = SafetyError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "absolute" => Ok(Self::Absolute),
            "delta" => Ok(Self::Delta),
            other => Err(SafetyError::Trace(format!("unknown mode `{other}`"))),
        }
    }
}

impl ActionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Absolute => "absolute",
            Self::Delta => "delta",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: f64,
    pub action: Joints,
    pub mode: ActionMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Command {
    pub t: f64,
    pub q: Joints,
}

/// Runs every trace step through integrate, clip and velocity limiting.
/// With interpolation on, each interval between trace times is filled with
/// `substeps` evenly spaced commands ending at the new command.
pub fn pipeline(trace: &[TraceStep], cfg: &SafetyConfig) -> Result<Vec<Command>> {
    cfg.validate()?;
    let q0 = to_joints(&cfg.q0, "q0")?;
    let (lo, hi) = cfg.limits();
    if let Some(joint) = (0..ACTION_DIM).find(|&j| !(lo[j]..=hi[j]).contains(&q0[j])) {
        return Err(SafetyError::InitialOutOfLimits { joint });
    }
    let mut out = Vec::with_capacity(trace.len() * cfg.substeps);
    let mut q_prev = q0;
    let mut t_prev: Option<f64> = None;
    for (step, row) in trace.iter().enumerate() {
        if !row.t.is_finite() || row.action.iter().any(|v| !v.is_finite()) {
            return Err(SafetyError::NonFinite { step });
        }
        let target = match row.mode {
            ActionMode::Delta => apply_delta(&q_prev, &row.action).map_err(|_| SafetyError::NonFinite { step })?,
            ActionMode::Absolute => row.action,
        };
        let clipped = clip_joints(&target, cfg);
        // the box is convex and q_prev lies in it, so this last clamp only
        // removes rounding and never lengthens the step
        let q = clip_joints(&limit_velocity(&clipped, &q_prev, cfg), cfg);
        match t_prev {
            Some(tp) if cfg.interpolation && cfg.substeps > 1 && row.t > tp => {
                for k in 1..cfg.substeps {
                    let t = tp + (row.t - tp) * k as f64 / cfg.substeps as f64;
                    out.push(Command {
                        t,
                        q: clip_joints(&interpolate(&q_prev, &q, t, tp, row.t)?, cfg),
                    });
                }
            }
            _ => {}
        }
        out.push(Command { t: row.t, q });
        q_prev = q;
        t_prev = Some(row.t);
    }
    Ok(out)
}

/// Reads `t,a0..a13,mode` rows.
pub fn read_trace(reader: impl Read) -> Result<Vec<TraceStep>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| SafetyError::Trace(e.to_string()))?.clone();
    let expected: Vec<String> = std::iter::once("t".to_string())
        .chain((0..ACTION_DIM).map(|i| format!("a{i}")))
        .chain(std::iter::once("mode".to_string()))
        .collect();
    if headers.iter().ne(expected.iter().map(String::as_str)) {
        return Err(SafetyError::Trace(format!("header must be {}", expected.join(","))));
    }
    let mut steps = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| SafetyError::Trace(e.to_string()))?;
        let num = |k: usize| -> Result<f64> {
            rec[k]
                .parse::<f64>()
                .map_err(|_| SafetyError::Trace(format!("row {}: `{}` is not a number", i + 1, &rec[k])))
        };
        let mut action = [0.0; ACTION_DIM];
        for (j, a) in action.iter_mut().enumerate() {
            *a = num(j + 1)?;
        }
        steps.push(TraceStep {
            t: num(0)?,
            action,
            mode: rec[ACTION_DIM + 1].parse()?,
        });
    }
    Ok(steps)
}

pub fn write_trace(steps: &[TraceStep], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string()];
    header.extend((0..ACTION_DIM).map(|i| format!("a{i}")));
    header.push("mode".into());
    w.write_record(&header).map_err(|e| SafetyError::Trace(e.to_string()))?;
    for s in steps {
        let mut row = vec![s.t.to_string()];
        row.extend(s.action.iter().map(f64::to_string));
        row.push(s.mode.as_str().into());
        w.write_record(&row).map_err(|e| SafetyError::Trace(e.to_string()))?;
    }
    w.flush().map_err(|e| SafetyError::Trace(e.to_string()))
}

/// Writes `t,q0..q13` rows.
pub fn write_commands(cmds: &[Command], writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string()];
    header.extend((0..ACTION_DIM).map(|i| format!("q{i}")));
    w.write_record(&header).map_err(|e| SafetyError::Trace(e.to_string()))?;
    for c in cmds {
        let mut row = vec![c.t.to_string()];
        row.extend(c.q.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| SafetyError::Trace(e.to_string()))?;
    }
    w.flush().map_err(|e| SafetyError::Trace(e.to_string()))
}
