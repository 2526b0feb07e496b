//! On-disk episode format and the observation/action dimension contract.
//!
//! An episode lives in its own directory: a `manifest.json` naming every
//! stream, plus one CSV per stream with header `t,v0,...,v{dim-1}`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Bimanual joint count (two 7-DOF arms).
pub const JOINT_DIM: usize = 14;
/// Two end-effector poses, position + quaternion each.
pub const EE_POSE_DIM: usize = 14;
pub const GRIPPER_DIM: usize = 2;
pub const ACTION_DIM: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    VisualFeature,
    TactileFeature,
    JointPos,
    JointVel,
    EePose,
    Gripper,
    ActionCommand,
}

impl StreamKind {
    pub const ALL: [StreamKind; 7] = [
        StreamKind::VisualFeature,
        StreamKind::TactileFeature,
        StreamKind::JointPos,
        StreamKind::JointVel,
        StreamKind::EePose,
        StreamKind::Gripper,
        StreamKind::ActionCommand,
    ];

    /// Dimension mandated for this kind, `None` for manifest-declared feature streams.
    pub fn fixed_dim(self) -> Option<usize> {
        match self {
            StreamKind::JointPos | StreamKind::JointVel => Some(JOINT_DIM),
            StreamKind::EePose => Some(EE_POSE_DIM),
            StreamKind::Gripper => Some(GRIPPER_DIM),
            StreamKind::ActionCommand => Some(ACTION_DIM),
            StreamKind::VisualFeature | StreamKind::TactileFeature => None,
        }
    }

    pub fn accepts_dim(self, dim: usize) -> bool {
        match self.fixed_dim() {
            Some(d) => d == dim,
            None => dim >= 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StreamKind::VisualFeature => "visual_feature",
            StreamKind::TactileFeature => "tactile_feature",
            StreamKind::JointPos => "joint_pos",
            StreamKind::JointVel => "joint_vel",
            StreamKind::EePose => "ee_pose",
            StreamKind::Gripper => "gripper",
            StreamKind::ActionCommand => "action_command",
        }
    }
}

impl fmt::Display for StreamKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("no {MANIFEST_FILE} in {0}")]
    MissingManifest(PathBuf),
    #[error("malformed manifest: {0}")]
    BadManifest(String),
    #[error("stream `{stream}`: declared dim {declared}, observed {observed}")]
    DimensionMismatch {
        stream: String,
        declared: usize,
        observed: usize,
    },
    #[error("stream `{stream}`: timestamps decrease at row {row}")]
    NonMonotonicTimestamps { stream: String, row: usize },
    #[error("stream `{stream}`: duplicate timestamp with differing records at row {row}")]
    ConflictingDuplicate { stream: String, row: usize },
    #[error("stream `{stream}`: non-finite value at row {row}")]
    NonFiniteValue { stream: String, row: usize },
    #[error("stream `{stream}`: {timestamps} timestamps but {rows} record rows")]
    LengthMismatch {
        stream: String,
        timestamps: usize,
        rows: usize,
    },
    #[error("stream `{stream}`: nominal rate must be positive and finite")]
    InvalidRate { stream: String },
    #[error("stream `{stream}` row {row}: {message}")]
    MalformedCsv {
        stream: String,
        row: usize,
        message: String,
    },
    #[error("rejected invalid episode: {0}")]
    RejectedInvalid(String),
    #[error("io failure: {0}")]
    IoFailure(#[from] std::io::Error),
}

pub type Result<T, E = EpisodeError> = std::result::Result<T, E>;

/// One sensor stream: timestamps (seconds) and a `samples x dim` record matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStream {
    pub kind: StreamKind,
    pub nominal_rate: f64,
    pub timestamps: Vec<f64>,
    pub records: Array2<f64>,
}

impl RawStream {
    /// Checked constructor. Duplicate timestamps carrying identical records are
    /// collapsed into one sample.
    pub fn new(
        name: &str,
        kind: StreamKind,
        nominal_rate: f64,
        timestamps: Vec<f64>,
        records: Array2<f64>,
    ) -> Result<Self> {
        if !(nominal_rate.is_finite() && nominal_rate > 0.0) {
            return Err(EpisodeError::InvalidRate {
                stream: name.to_owned(),
            });
        }
        if !kind.accepts_dim(records.ncols()) {
            return Err(EpisodeError::DimensionMismatch {
                stream: name.to_owned(),
                declared: kind.fixed_dim().unwrap_or(1),
                observed: records.ncols(),
            });
        }
        if timestamps.len() != records.nrows() {
            return Err(EpisodeError::LengthMismatch {
                stream: name.to_owned(),
                timestamps: timestamps.len(),
                rows: records.nrows(),
            });
        }
        for (row, (t, rec)) in timestamps.iter().zip(records.rows()).enumerate() {
            if !t.is_finite() || rec.iter().any(|v| !v.is_finite()) {
                return Err(EpisodeError::NonFiniteValue {
                    stream: name.to_owned(),
                    row,
                });
            }
        }

        let mut keep = Vec::with_capacity(timestamps.len());
        for row in 0..timestamps.len() {
            if row > 0 {
                let prev = timestamps[row - 1];
                let t = timestamps[row];
                if t < prev {
                    return Err(EpisodeError::NonMonotonicTimestamps {
                        stream: name.to_owned(),
                        row,
                    });
                }
                if t == prev {
                    if records.row(row) != records.row(row - 1) {
                        return Err(EpisodeError::ConflictingDuplicate {
                            stream: name.to_owned(),
                            row,
                        });
                    }
                    continue;
                }
            }
            keep.push(row);
        }

        let (timestamps, records) = if keep.len() == timestamps.len() {
            (timestamps, records)
        } else {
            let ts = keep.iter().map(|&r| timestamps[r]).collect();
            let recs = records.select(ndarray::Axis(0), &keep);
            (ts, recs)
        };

        Ok(Self {
            kind,
            nominal_rate,
            timestamps,
            records,
        })
    }

    pub fn dim(&self) -> usize {
        self.records.ncols()
    }

    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// `(first, last)` sample time, `None` when empty.
    pub fn span(&self) -> Option<(f64, f64)> {
        Some((*self.timestamps.first()?, *self.timestamps.last()?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub id: String,
    pub skill_axes: BTreeMap<String, String>,
    pub streams: BTreeMap<String, RawStream>,
}

impl Episode {
    pub fn new(
        id: impl Into<String>,
        streams: BTreeMap<String, RawStream>,
        skill_axes: BTreeMap<String, String>,
    ) -> Result<Self> {
        if streams.is_empty() {
            return Err(EpisodeError::RejectedInvalid(
                "episode has no streams".into(),
            ));
        }
        Ok(Self {
            id: id.into(),
            skill_axes,
            streams,
        })
    }

    /// Longest `last - first` timestamp span over all streams.
    pub fn duration(&self) -> f64 {
        self.streams
            .values()
            .filter_map(RawStream::span)
            .map(|(a, b)| b - a)
            .fold(0.0, f64::max)
    }

    pub fn streams_of_kind(&self, kind: StreamKind) -> impl Iterator<Item = (&String, &RawStream)> {
        self.streams.iter().filter(move |(_, s)| s.kind == kind)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEntry {
    pub name: String,
    pub kind: StreamKind,
    pub dim: usize,
    pub nominal_rate_hz: f64,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub id: String,
    #[serde(default)]
    pub skill_axes: BTreeMap<String, String>,
    pub streams: Vec<StreamEntry>,
}

pub fn load_episode(dir: impl AsRef<Path>) -> Result<Episode> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(EpisodeError::MissingManifest(dir.to_path_buf()));
    }
    let text = fs::read_to_string(&manifest_path)?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| EpisodeError::BadManifest(e.to_string()))?;

    let mut streams = BTreeMap::new();
    for entry in &manifest.streams {
        if !entry.kind.accepts_dim(entry.dim) {
            return Err(EpisodeError::DimensionMismatch {
                stream: entry.name.clone(),
                declared: entry.dim,
                observed: entry.kind.fixed_dim().unwrap_or(0),
            });
        }
        let (timestamps, records) = read_stream_csv(&dir.join(&entry.file), entry)?;
        let stream = RawStream::new(
            &entry.name,
            entry.kind,
            entry.nominal_rate_hz,
            timestamps,
            records,
        )?;
        if streams.insert(entry.name.clone(), stream).is_some() {
            return Err(EpisodeError::BadManifest(format!(
                "stream `{}` declared twice",
                entry.name
            )));
        }
    }
    Episode::new(manifest.id, streams, manifest.skill_axes)
}

fn read_stream_csv(path: &Path, entry: &StreamEntry) -> Result<(Vec<f64>, Array2<f64>)> {
    let name = entry.name.as_str();
    let malformed = |row: usize, message: String| EpisodeError::MalformedCsv {
        stream: name.to_owned(),
        row,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => EpisodeError::IoFailure(io),
            other => malformed(0, format!("{other:?}")),
        })?;

    let header = reader
        .headers()
        .map_err(|e| malformed(0, e.to_string()))?
        .clone();
    if header.get(0) != Some("t") {
        return Err(malformed(0, "header must start with `t`".into()));
    }
    let observed = header.len() - 1;
    if observed != entry.dim {
        return Err(EpisodeError::DimensionMismatch {
            stream: name.to_owned(),
            declared: entry.dim,
            observed,
        });
    }
    for (i, col) in header.iter().skip(1).enumerate() {
        if col != format!("v{i}") {
            return Err(malformed(0, format!("column {} should be `v{i}`", i + 1)));
        }
    }

    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| malformed(row, e.to_string()))?;
        if record.len() - 1 != entry.dim {
            return Err(EpisodeError::DimensionMismatch {
                stream: name.to_owned(),
                declared: entry.dim,
                observed: record.len() - 1,
            });
        }
        for (col, field) in record.iter().enumerate() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| malformed(row, format!("cannot parse `{field}`")))?;
            if !v.is_finite() {
                return Err(EpisodeError::NonFiniteValue {
                    stream: name.to_owned(),
                    row,
                });
            }
            if col == 0 {
                timestamps.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let records = Array2::from_shape_vec((timestamps.len(), entry.dim), values)
        .map_err(|e| malformed(0, e.to_string()))?;
    Ok((timestamps, records))
}

/// Writes `ep` under `dir` (created if missing). Stream files are named `<stream>.csv`.
pub fn write_episode(ep: &Episode, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if ep.streams.is_empty() {
        return Err(EpisodeError::RejectedInvalid(
            "episode has no streams".into(),
        ));
    }
    let issues = validate_episode(ep, &ValidationConfig::default());
    if let Some(bad) = issues.iter().find(|i| i.kind != IssueKind::Gap) {
        return Err(EpisodeError::RejectedInvalid(bad.to_string()));
    }
    fs::create_dir_all(dir)?;

    let mut entries = Vec::with_capacity(ep.streams.len());
    for (name, stream) in &ep.streams {
        let file = format!("{name}.csv");
        write_stream_csv(&dir.join(&file), stream)?;
        entries.push(StreamEntry {
            name: name.clone(),
            kind: stream.kind,
            dim: stream.dim(),
            nominal_rate_hz: stream.nominal_rate,
            file,
        });
    }
    let manifest = Manifest {
        id: ep.id.clone(),
        skill_axes: ep.skill_axes.clone(),
        streams: entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| EpisodeError::BadManifest(e.to_string()))?;
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(())
}

fn write_stream_csv(path: &Path, stream: &RawStream) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(b"t")?;
    for i in 0..stream.dim() {
        write!(out, ",v{i}")?;
    }
    out.write_all(b"\n")?;
    for (t, rec) in stream.timestamps.iter().zip(stream.records.rows()) {
        // `{}` on f64 prints the shortest string that parses back to the same bits.
        write!(out, "{t}")?;
        for v in rec {
            write!(out, ",{v}")?;
        }
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IssueKind {
    Empty,
    Dimension,
    LengthMismatch,
    NonFinite,
    NonMonotonic,
    DuplicateConflict,
    InvalidRate,
    Gap,
}

/// A validation finding: which stream, which rows, which rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Issue {
    pub kind: IssueKind,
    pub stream: String,
    /// Inclusive row range the issue covers.
    pub rows: (usize, usize),
    /// Time span for gap issues.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub span: Option<(f64, f64)>,
    pub detail: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?} in `{}` rows {}..={}: {}",
            self.kind, self.stream, self.rows.0, self.rows.1, self.detail
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationConfig {
    /// A gap is an inter-sample delta larger than this many nominal periods.
    pub gap_factor: f64,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self { gap_factor: 10.0 }
    }
}

/// Audits every stream invariant. An empty result means the episode is valid.
pub fn validate_episode(ep: &Episode, cfg: &ValidationConfig) -> Vec<Issue> {
    let mut issues = Vec::new();
    if ep.streams.is_empty() {
        issues.push(Issue {
            kind: IssueKind::Empty,
            stream: String::new(),
            rows: (0, 0),
            span: None,
            detail: "episode has no streams".into(),
        });
    }
    for (name, s) in &ep.streams {
        let mut push = |kind, rows, span, detail: String| {
            issues.push(Issue {
                kind,
                stream: name.clone(),
                rows,
                span,
                detail,
            })
        };
        let n = s.timestamps.len();
        if !s.kind.accepts_dim(s.dim()) {
            push(
                IssueKind::Dimension,
                (0, n.saturating_sub(1)),
                None,
                format!("{} stream with dim {}", s.kind, s.dim()),
            );
        }
        if n != s.records.nrows() {
            push(
                IssueKind::LengthMismatch,
                (0, n.max(s.records.nrows()).saturating_sub(1)),
                None,
                format!("{} timestamps vs {} rows", n, s.records.nrows()),
            );
        }
        if n == 0 {
            push(IssueKind::Empty, (0, 0), None, "stream has no samples".into());
        }
        let rate_ok = s.nominal_rate.is_finite() && s.nominal_rate > 0.0;
        if !rate_ok {
            push(
                IssueKind::InvalidRate,
                (0, 0),
                None,
                format!("nominal rate {}", s.nominal_rate),
            );
        }
        for (row, t) in s.timestamps.iter().enumerate() {
            let rec_bad = row < s.records.nrows() && s.records.row(row).iter().any(|v| !v.is_finite());
            if !t.is_finite() || rec_bad {
                push(IssueKind::NonFinite, (row, row), None, "non-finite value".into());
            }
        }
        let gap_limit = cfg.gap_factor / s.nominal_rate;
        for row in 1..n {
            let (a, b) = (s.timestamps[row - 1], s.timestamps[row]);
            if b < a {
                push(
                    IssueKind::NonMonotonic,
                    (row - 1, row),
                    None,
                    format!("{b} follows {a}"),
                );
            } else if b == a
                && row < s.records.nrows()
                && s.records.row(row) != s.records.row(row - 1)
            {
                push(
                    IssueKind::DuplicateConflict,
                    (row - 1, row),
                    None,
                    format!("two different records at t={a}"),
                );
            } else if rate_ok && b - a > gap_limit {
                push(
                    IssueKind::Gap,
                    (row - 1, row),
                    Some((a, b)),
                    format!("gap of {:.6} s exceeds {:.6} s", b - a, gap_limit),
                );
            }
        }
    }
    issues
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn joint_stream(ts: Vec<f64>) -> RawStream {
        let n = ts.len();
        let recs = Array2::from_shape_fn((n, JOINT_DIM), |(r, c)| (r * JOINT_DIM + c) as f64 * 0.01);
        RawStream::new("joint", StreamKind::JointPos, 100.0, ts, recs).unwrap()
    }

    fn episode(streams: Vec<(&str, RawStream)>) -> Episode {
        Episode::new(
            "ep",
            streams.into_iter().map(|(n, s)| (n.to_owned(), s)).collect(),
            BTreeMap::new(),
        )
        .unwrap()
    }

    #[test]
    fn kind_dimensions() {
        assert_eq!(StreamKind::JointPos.fixed_dim(), Some(14));
        assert_eq!(StreamKind::JointVel.fixed_dim(), Some(14));
        assert_eq!(StreamKind::EePose.fixed_dim(), Some(14));
        assert_eq!(StreamKind::Gripper.fixed_dim(), Some(2));
        assert_eq!(StreamKind::ActionCommand.fixed_dim(), Some(14));
        assert!(StreamKind::VisualFeature.accepts_dim(1));
        assert!(!StreamKind::TactileFeature.accepts_dim(0));
    }

    #[test]
    fn duration_is_longest_span() {
        let ep = episode(vec![("a", joint_stream(vec![0.0, 0.01, 0.02]))]);
        assert_eq!(ep.duration(), 0.02);
    }

    #[test]
    fn duplicates_collapse_when_identical() {
        let recs = array![[1.0, 2.0], [1.0, 2.0], [3.0, 4.0]];
        let s = RawStream::new("g", StreamKind::Gripper, 30.0, vec![0.0, 0.0, 0.1], recs).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.records, array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn duplicates_with_different_records_rejected() {
        let recs = array![[1.0, 2.0], [1.0, 2.5]];
        let err = RawStream::new("g", StreamKind::Gripper, 30.0, vec![0.0, 0.0], recs).unwrap_err();
        assert!(matches!(err, EpisodeError::ConflictingDuplicate { row: 1, .. }));
    }

    #[test]
    fn non_monotonic_rejected() {
        let recs = Array2::zeros((3, 2));
        let err = RawStream::new("g", StreamKind::Gripper, 30.0, vec![0.0, 0.1, 0.05], recs).unwrap_err();
        assert!(matches!(err, EpisodeError::NonMonotonicTimestamps { row: 2, .. }));
    }

    #[test]
    fn non_finite_reports_row() {
        let recs = array![[0.0, 1.0], [f64::NAN, 0.0]];
        let err = RawStream::new("g", StreamKind::Gripper, 30.0, vec![0.0, 0.1], recs).unwrap_err();
        assert!(matches!(err, EpisodeError::NonFiniteValue { row: 1, .. }));
    }

    #[test]
    fn empty_stream_map_rejected() {
        let err = Episode::new("x", BTreeMap::new(), BTreeMap::new()).unwrap_err();
        assert!(matches!(err, EpisodeError::RejectedInvalid(_)));
    }

    #[test]
    fn clean_episode_has_no_issues() {
        let ts: Vec<f64> = (0..50).map(|i| i as f64 / 100.0).collect();
        let ep = episode(vec![("joint", joint_stream(ts))]);
        assert!(validate_episode(&ep, &ValidationConfig::default()).is_empty());
    }

    #[test]
    fn gap_is_reported_with_span() {
        // 100 Hz nominal, one 0.2 s hole (20 periods).
        let mut ts: Vec<f64> = (0..10).map(|i| i as f64 / 100.0).collect();
        ts.extend((0..10).map(|i| 0.29 + i as f64 / 100.0));
        let ep = episode(vec![("joint", joint_stream(ts.clone()))]);
        let issues = validate_episode(&ep, &ValidationConfig::default());

        // oracle: scan the deltas directly
        let expected: Vec<usize> = (1..ts.len()).filter(|&i| ts[i] - ts[i - 1] > 0.1).collect();
        assert_eq!(expected, vec![10]);
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].kind, IssueKind::Gap);
        assert_eq!(issues[0].stream, "joint");
        assert_eq!(issues[0].rows, (9, 10));
        assert_eq!(issues[0].span, Some((ts[9], ts[10])));
    }

    #[test]
    fn gripper_with_three_channels_flags_dimension() {
        let mut ep = episode(vec![("joint", joint_stream(vec![0.0, 0.01]))]);
        ep.streams.insert(
            "grip".into(),
            RawStream {
                kind: StreamKind::Gripper,
                nominal_rate: 30.0,
                timestamps: vec![0.0],
                records: Array2::zeros((1, 3)),
            },
        );
        let issues = validate_episode(&ep, &ValidationConfig::default());
        assert_eq!(issues.len(), 1);
        assert_eq!(issues[0].kind, IssueKind::Dimension);
        assert_eq!(issues[0].stream, "grip");
    }

    #[test]
    fn validation_is_pure() {
        let mut ts: Vec<f64> = (0..5).map(|i| i as f64 / 100.0).collect();
        ts.push(1.0);
        let ep = episode(vec![("joint", joint_stream(ts))]);
        let cfg = ValidationConfig::default();
        assert_eq!(validate_episode(&ep, &cfg), validate_episode(&ep, &cfg));
    }
}
