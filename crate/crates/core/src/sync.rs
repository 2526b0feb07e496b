//! Temporal alignment of multirate streams onto one uniform timeline,
//! episode quality filtering, and the runtime observation synchronizer.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::RwLock;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::episode::{Episode, RawStream, StreamKind};

pub const DEFAULT_RATE_HZ: f64 = 30.0;
pub const PROPRIO_RATE_HZ: f64 = 100.0;
const TIMELINE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMethod {
    Linear,
    ZeroOrderHold,
}

impl ResampleMethod {
    /// Piecewise-constant actuation (commands, binary gripper) is held; everything else interpolates.
    pub fn default_for(kind: StreamKind) -> Self {
        match kind {
            StreamKind::ActionCommand | StreamKind::Gripper => ResampleMethod::ZeroOrderHold,
            _ => ResampleMethod::Linear,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum SyncError {
    #[error("stream has no samples")]
    EmptyStream,
    #[error("query time {t} outside stream span [{first}, {last}]")]
    TimelineOutOfRange { t: f64, first: f64, last: f64 },
    #[error("streams share no overlap window of positive length")]
    NoOverlap,
    #[error("rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("{method:?} is not allowed for action_command stream `{stream}`")]
    MethodNotAllowed {
        stream: String,
        method: ResampleMethod,
    },
    #[error("stream `{stream}`: {source}")]
    Stream {
        stream: String,
        #[source]
        source: Box<SyncError>,
    },
    #[error("unknown stream `{0}`")]
    UnknownStream(String),
    #[error("stream `{stream}`: sample at {t} is older than last pushed {last}")]
    OutOfOrder { stream: String, t: f64, last: f64 },
    #[error("stream `{stream}` expects dim {expected}, got {got}")]
    RecordDim {
        stream: String,
        expected: usize,
        got: usize,
    },
    #[error("stream `{0}` has no record within the staleness bound")]
    StreamStale(String),
    #[error("malformed aligned file: {0}")]
    Malformed(String),
    #[error("io failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for SyncError {
    fn from(e: std::io::Error) -> Self {
        SyncError::Io(e.to_string())
    }
}

/// Uniform timeline `t0 + k / rate` for `k = 0..len`.
pub fn uniform_timeline(t0: f64, rate: f64, len: usize) -> Vec<f64> {
    (0..len).map(|k| t0 + k as f64 / rate).collect()
}

/// Resamples `s` at every time in `timeline`. With `clamp`, queries outside the
/// stream span take the nearest endpoint value.
pub fn resample(
    s: &RawStream,
    timeline: &[f64],
    method: ResampleMethod,
    clamp: bool,
) -> Result<Array2<f64>, SyncError> {
    let (first, last) = s.span().ok_or(SyncError::EmptyStream)?;
    let ts = &s.timestamps;
    let mut out = Array2::zeros((timeline.len(), s.dim()));
    for (row, &t) in timeline.iter().enumerate() {
        if !clamp && (t < first || t > last) {
            return Err(SyncError::TimelineOutOfRange { t, first, last });
        }
        let mut dst = out.row_mut(row);
        if t <= first {
            dst.assign(&s.records.row(0));
            continue;
        }
        if t >= last {
            dst.assign(&s.records.row(ts.len() - 1));
            continue;
        }
        // index of the latest sample at or before t
        let i = ts.partition_point(|&x| x <= t) - 1;
        match method {
            ResampleMethod::ZeroOrderHold => dst.assign(&s.records.row(i)),
            ResampleMethod::Linear => {
                let (t0, t1) = (ts[i], ts[i + 1]);
                if t == t0 {
                    dst.assign(&s.records.row(i));
                } else {
                    let w = (t - t0) / (t1 - t0);
                    let a = s.records.row(i);
                    let b = s.records.row(i + 1);
                    for ((d, &x0), &x1) in dst.iter_mut().zip(a.iter()).zip(b.iter()) {
                        *d = x0 + w * (x1 - x0);
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedColumn {
    pub kind: StreamKind,
    pub method: ResampleMethod,
    pub values: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedEpisode {
    pub id: String,
    pub rate: f64,
    /// Overlap window `[start, end]` the timeline was cut from.
    pub window: (f64, f64),
    pub timeline: Vec<f64>,
    pub columns: BTreeMap<String, AlignedColumn>,
}

impl AlignedEpisode {
    pub fn len(&self) -> usize {
        self.timeline.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timeline.is_empty()
    }

    pub fn columns_of_kind(&self, kind: StreamKind) -> impl Iterator<Item = (&String, &AlignedColumn)> {
        self.columns.iter().filter(move |(_, c)| c.kind == kind)
    }

    pub fn first_of_kind(&self, kind: StreamKind) -> Option<(&String, &AlignedColumn)> {
        self.columns_of_kind(kind).next()
    }
}

/// Aligns with each kind's default method.
pub fn align_episode(ep: &Episode, rate: f64) -> Result<AlignedEpisode, SyncError> {
    align_episode_with(ep, rate, &BTreeMap::new())
}

/// Aligns with per-stream method overrides. `action_command` streams must stay zero-order hold.
pub fn align_episode_with(
    ep: &Episode,
    rate: f64,
    overrides: &BTreeMap<String, ResampleMethod>,
) -> Result<AlignedEpisode, SyncError> {
    if !(rate.is_finite() && rate > 0.0) {
        return Err(SyncError::InvalidRate(rate));
    }
    let mut start = f64::NEG_INFINITY;
    let mut end = f64::INFINITY;
    for (name, s) in &ep.streams {
        let (a, b) = s.span().ok_or_else(|| SyncError::Stream {
            stream: name.clone(),
            source: Box::new(SyncError::EmptyStream),
        })?;
        start = start.max(a);
        end = end.min(b);
    }
    if !(end > start) {
        return Err(SyncError::NoOverlap);
    }
    let frames = ((end - start) * rate + TIMELINE_EPS).floor() as usize + 1;
    let timeline = uniform_timeline(start, rate, frames);

    let mut columns = BTreeMap::new();
    for (name, s) in &ep.streams {
        let method = overrides
            .get(name)
            .copied()
            .unwrap_or_else(|| ResampleMethod::default_for(s.kind));
        if s.kind == StreamKind::ActionCommand && method != ResampleMethod::ZeroOrderHold {
            return Err(SyncError::MethodNotAllowed {
                stream: name.clone(),
                method,
            });
        }
        let mut values = resample(s, &timeline, method, true).map_err(|e| SyncError::Stream {
            stream: name.clone(),
            source: Box::new(e),
        })?;
        if s.kind == StreamKind::EePose && method == ResampleMethod::Linear {
            renormalize_quaternions(&mut values);
        }
        columns.insert(
            name.clone(),
            AlignedColumn {
                kind: s.kind,
                method,
                values,
            },
        );
    }
    Ok(AlignedEpisode {
        id: ep.id.clone(),
        rate,
        window: (start, end),
        timeline,
        columns,
    })
}

/// Each arm's pose is `[x, y, z, qw, qx, qy, qz]`; the quaternion part is
/// rescaled to unit norm after linear interpolation (an approximation of SLERP
/// that holds for small inter-frame rotations).
fn renormalize_quaternions(values: &mut Array2<f64>) {
    for mut row in values.rows_mut() {
        for arm in 0..2 {
            let q = arm * 7 + 3..arm * 7 + 7;
            let norm = row.slice(ndarray::s![q.clone()]).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.slice_mut(ndarray::s![q]).mapv_inplace(|v| v / norm);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JitterThresholds {
    pub max_missing_fraction: f64,
    /// Largest tolerated gap, in nominal periods of the stream.
    pub max_gap_periods: f64,
    /// Absolute gap bound in seconds; overrides `max_gap_periods` when set.
    pub max_gap_seconds: Option<f64>,
}

impl Default for JitterThresholds {
    fn default() -> Self {
        Self {
            max_missing_fraction: 0.05,
            max_gap_periods: 5.0,
            max_gap_seconds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamJitter {
    pub missing_fraction: f64,
    pub max_gap: f64,
    pub jitter_std: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JitterReport {
    pub streams: BTreeMap<String, StreamJitter>,
    pub pass: bool,
}

pub fn stream_jitter(s: &RawStream, th: &JitterThresholds) -> StreamJitter {
    let deltas: Vec<f64> = s.timestamps.windows(2).map(|w| w[1] - w[0]).collect();
    let span = match s.span() {
        Some((a, b)) => b - a,
        None => 0.0,
    };
    let expected = (span * s.nominal_rate).round() + 1.0;
    let missing_fraction = ((expected - s.len() as f64) / expected).clamp(0.0, 1.0);
    let max_gap = deltas.iter().copied().fold(0.0, f64::max);
    let jitter_std = if deltas.is_empty() {
        0.0
    } else {
        let n = deltas.len() as f64;
        let mean = deltas.iter().sum::<f64>() / n;
        (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    let gap_limit = th
        .max_gap_seconds
        .unwrap_or(th.max_gap_periods / s.nominal_rate);
    let pass = !s.is_empty() && missing_fraction <= th.max_missing_fraction && max_gap <= gap_limit;
    StreamJitter {
        missing_fraction,
        max_gap,
        jitter_std,
        pass,
    }
}

/// Per-stream missing-data and jitter statistics; the episode passes iff every stream does.
pub fn jitter_stats(ep: &Episode, th: &JitterThresholds) -> JitterReport {
    let streams: BTreeMap<_, _> = ep
        .streams
        .iter()
        .map(|(name, s)| (name.clone(), stream_jitter(s, th)))
        .collect();
    let pass = streams.values().all(|s| s.pass);
    JitterReport { streams, pass }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedStreamEntry {
    pub name: String,
    pub kind: StreamKind,
    pub dim: usize,
    pub method: ResampleMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedManifest {
    pub id: String,
    pub rate: f64,
    pub window: (f64, f64),
    pub frames: usize,
    pub streams: Vec<AlignedStreamEntry>,
}

pub const ALIGNED_CSV: &str = "aligned.csv";
pub const ALIGNED_MANIFEST: &str = "aligned_manifest.json";

/// Writes `aligned.csv` (`t` plus `stream.v{i}` columns) and `aligned_manifest.json` into `dir`.
pub fn write_aligned(al: &AlignedEpisode, dir: impl AsRef<Path>) -> Result<(), SyncError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join(ALIGNED_CSV))?);
    out.write_all(b"t")?;
    for (name, col) in &al.columns {
        for i in 0..col.values.ncols() {
            write!(out, ",{name}.v{i}")?;
        }
    }
    out.write_all(b"\n")?;
    for (row, t) in al.timeline.iter().enumerate() {
        write!(out, "{t}")?;
        for col in al.columns.values() {
            for v in col.values.row(row) {
                write!(out, ",{v}")?;
            }
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;

    let manifest = AlignedManifest {
        id: al.id.clone(),
        rate: al.rate,
        window: al.window,
        frames: al.len(),
        streams: al
            .columns
            .iter()
            .map(|(name, c)| AlignedStreamEntry {
                name: name.clone(),
                kind: c.kind,
                dim: c.values.ncols(),
                method: c.method,
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| SyncError::Malformed(e.to_string()))?;
    fs::write(dir.join(ALIGNED_MANIFEST), json + "\n")?;
    Ok(())
}

pub fn read_aligned(dir: impl AsRef<Path>) -> Result<AlignedEpisode, SyncError> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(ALIGNED_MANIFEST))?;
    let manifest: AlignedManifest =
        serde_json::from_str(&text).map_err(|e| SyncError::Malformed(e.to_string()))?;
    let mut reader = csv::Reader::from_path(dir.join(ALIGNED_CSV))
        .map_err(|e| SyncError::Malformed(e.to_string()))?;
    let width = 1 + manifest.streams.iter().map(|s| s.dim).sum::<usize>();
    let headers = reader.headers().map_err(|e| SyncError::Malformed(e.to_string()))?;
    if headers.len() != width {
        return Err(SyncError::Malformed(format!(
            "expected {width} columns, found {}",
            headers.len()
        )));
    }
    let mut timeline = Vec::new();
    let mut flat: Vec<Vec<f64>> = manifest.streams.iter().map(|_| Vec::new()).collect();
    for rec in reader.records() {
        let rec = rec.map_err(|e| SyncError::Malformed(e.to_string()))?;
        let vals: Vec<f64> = rec
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| SyncError::Malformed(e.to_string()))?;
        timeline.push(vals[0]);
        let mut offset = 1;
        for (i, s) in manifest.streams.iter().enumerate() {
            flat[i].extend_from_slice(&vals[offset..offset + s.dim]);
            offset += s.dim;
        }
    }
    let mut columns = BTreeMap::new();
    for (s, data) in manifest.streams.iter().zip(flat) {
        let values = Array2::from_shape_vec((timeline.len(), s.dim), data)
            .map_err(|e| SyncError::Malformed(e.to_string()))?;
        columns.insert(
            s.name.clone(),
            AlignedColumn {
                kind: s.kind,
                method: s.method,
                values,
            },
        );
    }
    Ok(AlignedEpisode {
        id: manifest.id,
        rate: manifest.rate,
        window: manifest.window,
        timeline,
        columns,
    })
}

/// A record returned by the synchronizer along with its source timestamp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StampedRecord {
    pub t: f64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyncedTuple {
    pub t: f64,
    pub records: BTreeMap<String, StampedRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BufferConfig {
    /// Stream name to record dimension.
    pub streams: BTreeMap<String, usize>,
    /// Retention window in seconds, measured back from the newest pushed sample.
    pub window: f64,
    /// Largest tolerated age of a stream's latest record at query time.
    pub max_staleness: f64,
}

#[derive(Debug, Default)]
struct BufferState {
    newest: Option<f64>,
    queues: BTreeMap<String, VecDeque<StampedRecord>>,
}

/// Sliding-window observation buffer shared between sensor writers and the
/// inference trigger. Reads take a consistent snapshot under a read lock.
#[derive(Debug)]
pub struct ObservationBuffer {
    cfg: BufferConfig,
    state: RwLock<BufferState>,
}

impl ObservationBuffer {
    pub fn new(cfg: BufferConfig) -> Self {
        let queues = cfg.streams.keys().map(|k| (k.clone(), VecDeque::new())).collect();
        Self {
            cfg,
            state: RwLock::new(BufferState {
                newest: None,
                queues,
            }),
        }
    }

    pub fn config(&self) -> &BufferConfig {
        &self.cfg
    }

    pub fn push(&self, stream: &str, t: f64, record: Vec<f64>) -> Result<(), SyncError> {
        let dim = *self
            .cfg
            .streams
            .get(stream)
            .ok_or_else(|| SyncError::UnknownStream(stream.to_owned()))?;
        if record.len() != dim {
            return Err(SyncError::RecordDim {
                stream: stream.to_owned(),
                expected: dim,
                got: record.len(),
            });
        }
        let mut state = self.state.write().expect("observation buffer lock poisoned");
        let queue = state.queues.get_mut(stream).expect("queue exists per configured stream");
        if let Some(last) = queue.back() {
            if t < last.t {
                return Err(SyncError::OutOfOrder {
                    stream: stream.to_owned(),
                    t,
                    last: last.t,
                });
            }
        }
        queue.push_back(StampedRecord { t, values: record });
        let newest = state.newest.map_or(t, |n| n.max(t));
        state.newest = Some(newest);
        let cutoff = newest - self.cfg.window;
        for q in state.queues.values_mut() {
            while q.front().is_some_and(|r| r.t < cutoff) {
                q.pop_front();
            }
        }
        Ok(())
    }

    /// Newest record at or before `t_query` for every stream, or `StreamStale`
    /// naming the first stream that has none within the staleness bound.
    pub fn latest(&self, t_query: f64) -> Result<SyncedTuple, SyncError> {
        let state = self.state.read().expect("observation buffer lock poisoned");
        let mut records = BTreeMap::new();
        for (name, q) in &state.queues {
            let idx = q.partition_point(|r| r.t <= t_query);
            let rec = idx
                .checked_sub(1)
                .map(|i| &q[i])
                .filter(|r| t_query - r.t <= self.cfg.max_staleness)
                .ok_or_else(|| SyncError::StreamStale(name.clone()))?;
            records.insert(name.clone(), rec.clone());
        }
        Ok(SyncedTuple { t: t_query, records })
    }

    /// Buffered timestamps per stream, oldest first.
    pub fn held_timestamps(&self) -> BTreeMap<String, Vec<f64>> {
        let state = self.state.read().expect("observation buffer lock poisoned");
        state
            .queues
            .iter()
            .map(|(k, q)| (k.clone(), q.iter().map(|r| r.t).collect()))
            .collect()
    }
}

/// Euclidean norm of a record row.
pub(crate) fn row_norm(row: ArrayView1<'_, f64>) -> f64 {
    row.iter().map(|v| v * v).sum::<f64>().sqrt()
}
