use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::{EmbedError, Result, POSE_DIM};

/// `B` paired samples: pose vectors (`B x 14`) and visual / tactile feature
/// frame stacks (`B x T x d`).
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub pose: Array2<f64>,
    pub visual: Array3<f64>,
    pub tactile: Array3<f64>,
}

impl Batch {
    pub fn new(pose: Array2<f64>, visual: Array3<f64>, tactile: Array3<f64>) -> Result<Self> {
        let b = pose.nrows();
        if visual.len_of(Axis(0)) != b || tactile.len_of(Axis(0)) != b {
            return Err(EmbedError::ShapeMismatch(format!(
                "batch sizes differ: pose {b}, visual {}, tactile {}",
                visual.len_of(Axis(0)),
                tactile.len_of(Axis(0))
            )));
        }
        if pose.ncols() != POSE_DIM {
            return Err(EmbedError::DimensionMismatch {
                expected: POSE_DIM,
                got: pose.ncols(),
            });
        }
        if visual.len_of(Axis(1)) == 0 || tactile.len_of(Axis(1)) == 0 {
            return Err(EmbedError::EmptyStack);
        }
        let finite = pose.iter().chain(visual.iter()).chain(tactile.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(EmbedError::NonFinite("batch"));
        }
        Ok(Self { pose, visual, tactile })
    }

    pub fn len(&self) -> usize {
        self.pose.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Batch {
        Batch {
            pose: self.pose.select(Axis(0), idx),
            visual: self.visual.select(Axis(0), idx),
            tactile: self.tactile.select(Axis(0), idx),
        }
    }
}

/// A paired multimodal dataset; on disk it is a JSON document of nested arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub samples: Batch,
}

#[derive(Serialize, Deserialize)]
struct DatasetDoc {
    pose: Vec<Vec<f64>>,
    visual: Vec<Vec<Vec<f64>>>,
    tactile: Vec<Vec<Vec<f64>>>,
}

fn to_nested3(a: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    a.outer_iter()
        .map(|m| m.outer_iter().map(|r| r.to_vec()).collect())
        .collect()
}

fn from_nested3(v: &[Vec<Vec<f64>>], what: &str) -> Result<Array3<f64>> {
    let n = v.len();
    let t = v.first().map_or(0, Vec::len);
    let d = v.first().and_then(|m| m.first()).map_or(0, Vec::len);
    let mut flat = Vec::with_capacity(n * t * d);
    for m in v {
        if m.len() != t || m.iter().any(|r| r.len() != d) {
            return Err(EmbedError::ShapeMismatch(format!("ragged {what} frames")));
        }
        for r in m {
            flat.extend_from_slice(r);
        }
    }
    Array3::from_shape_vec((n, t, d), flat).map_err(|e| EmbedError::ShapeMismatch(e.to_string()))
}

impl PairedDataset {
    pub fn new(samples: Batch) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn visual_dim(&self) -> usize {
        self.samples.visual.len_of(Axis(2))
    }

    pub fn tactile_dim(&self) -> usize {
        self.samples.tactile.len_of(Axis(2))
    }

    pub fn to_json(&self) -> String {
        let doc = DatasetDoc {
            pose: self.samples.pose.outer_iter().map(|r| r.to_vec()).collect(),
            visual: to_nested3(&self.samples.visual),
            tactile: to_nested3(&self.samples.tactile),
        };
        serde_json::to_string(&doc).expect("plain data serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DatasetDoc = serde_json::from_str(text).map_err(|e| EmbedError::ShapeMismatch(e.to_string()))?;
        let n = doc.pose.len();
        let mut flat = Vec::with_capacity(n * POSE_DIM);
        for r in &doc.pose {
            if r.len() != POSE_DIM {
                return Err(EmbedError::DimensionMismatch {
                    expected: POSE_DIM,
                    got: r.len(),
                });
            }
            flat.extend_from_slice(r);
        }
        let pose = Array2::from_shape_vec((n, POSE_DIM), flat).map_err(|e| EmbedError::ShapeMismatch(e.to_string()))?;
        let visual = from_nested3(&doc.visual, "visual")?;
        let tactile = from_nested3(&doc.tactile, "tactile")?;
        Ok(Self::new(Batch::new(pose, visual, tactile)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EmbedError::Checkpoint(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| EmbedError::Checkpoint(e.to_string()))
    }
}
