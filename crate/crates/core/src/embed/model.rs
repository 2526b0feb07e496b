use std::collections::BTreeMap;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use super::{
    clamp_alpha, l2_normalize, normalize_rows, temperature, Batch, EmbedError, Embedding, Result, ALPHA_INIT,
    POSE_DIM,
};
use crate::modality::{FusionPair, Modality, Side};

pub const CHECKPOINT_FORMAT: &str = "vtk-alignment-v1";

/// Affine layer `y = x W^T + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` initialization for weights and bias.
    pub fn random(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((output, input), |_| rng.random_range(-bound..bound)),
            bias: Array1::from_shape_fn(output, |_| rng.random_range(-bound..bound)),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    fn forward_one(&self, x: ArrayView1<'_, f64>) -> Array1<f64> {
        self.weight.dot(&x) + &self.bias
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standardize, four `(affine -> GELU)` blocks, then a linear projection to `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseEncoder {
    pub input_mean: Array1<f64>,
    pub input_scale: Array1<f64>,
    pub layers: Vec<Dense>,
    pub proj: Dense,
}

impl PoseEncoder {
    pub fn standardize(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        (&x - &self.input_mean) / &self.input_scale
    }

    /// Pre-normalization output for a batch of pose vectors.
    pub fn forward(&self, x: ArrayView2<'_, f64>) -> Array2<f64> {
        let mut h = self.standardize(x);
        for layer in &self.layers {
            h = layer.forward(h.view()).mapv(gelu);
        }
        self.proj.forward(h.view())
    }

    /// Sets the standardization constants from training poses; constant
    /// features keep unit scale.
    pub fn fit_standardization(&mut self, poses: ArrayView2<'_, f64>) {
        let n = poses.nrows().max(1) as f64;
        let mean = poses.sum_axis(Axis(0)) / n;
        let var = (&poses - &mean).mapv(|v| v * v).sum_axis(Axis(0)) / n;
        self.input_scale = var.mapv(|v| if v > 1e-24 { v.sqrt() } else { 1.0 });
        self.input_mean = mean;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dim: usize,
    pub hidden: usize,
    pub pose_layers: usize,
    pub visual_dim: usize,
    pub tactile_dim: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            hidden: 128,
            pose_layers: 4,
            visual_dim: 768,
            tactile_dim: 768,
            alpha: ALPHA_INIT,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentModel {
    pub dim: usize,
    pub hidden: usize,
    pub pose: PoseEncoder,
    pub visual: Dense,
    pub tactile: Dense,
    /// One fusion layer (`d x 2d`) per fused pair.
    pub fusion: BTreeMap<FusionPair, Dense>,
    /// Log inverse temperature, kept in `[0, ln 100]`.
    pub alpha: f64,
}

impl AlignmentModel {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        if cfg.dim == 0 || cfg.hidden == 0 || cfg.pose_layers == 0 || cfg.visual_dim == 0 || cfg.tactile_dim == 0 {
            return Err(EmbedError::InvalidConfig("all model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut layers = Vec::with_capacity(cfg.pose_layers);
        let mut input = POSE_DIM;
        for _ in 0..cfg.pose_layers {
            layers.push(Dense::random(input, cfg.hidden, &mut rng));
            input = cfg.hidden;
        }
        let proj = Dense::random(cfg.hidden, cfg.dim, &mut rng);
        let visual = Dense::random(cfg.visual_dim, cfg.dim, &mut rng);
        let tactile = Dense::random(cfg.tactile_dim, cfg.dim, &mut rng);
        let fusion = FusionPair::ALL
            .into_iter()
            .map(|p| (p, Dense::random(2 * cfg.dim, cfg.dim, &mut rng)))
            .collect();
        Ok(Self {
            dim: cfg.dim,
            hidden: cfg.hidden,
            pose: PoseEncoder {
                input_mean: Array1::zeros(POSE_DIM),
                input_scale: Array1::ones(POSE_DIM),
                layers,
                proj,
            },
            visual,
            tactile,
            fusion,
            alpha: clamp_alpha(cfg.alpha),
        })
    }

    pub fn tau(&self) -> f64 {
        temperature(self.alpha)
    }

    pub fn visual_dim(&self) -> usize {
        self.visual.input_dim()
    }

    pub fn tactile_dim(&self) -> usize {
        self.tactile.input_dim()
    }

    pub(crate) fn feature_layer(&self, m: Modality) -> &Dense {
        match m {
            Modality::Visual => &self.visual,
            Modality::Tactile => &self.tactile,
            Modality::Pose => &self.pose.proj,
        }
    }

    pub(crate) fn fusion_layer(&self, pair: FusionPair) -> Result<&Dense> {
        self.fusion
            .get(&pair)
            .ok_or_else(|| EmbedError::MissingFusionParameters(pair.key().into()))
    }

    pub fn encode_pose(&self, x: &[f64]) -> Result<Embedding> {
        if x.len() != POSE_DIM {
            return Err(EmbedError::DimensionMismatch {
                expected: POSE_DIM,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite("pose input"));
        }
        let row = ArrayView2::from_shape((1, POSE_DIM), x).expect("pose row shape");
        let u = self.pose.forward(row);
        l2_normalize(u.row(0))
    }

    /// Mean-pools `frames` (`T x d_in`), projects, normalizes.
    pub fn encode_feature(&self, frames: ArrayView2<'_, f64>, modality: Modality) -> Result<Embedding> {
        if modality == Modality::Pose {
            return Err(EmbedError::InvalidConfig("pose is not a feature modality".into()));
        }
        if frames.nrows() == 0 {
            return Err(EmbedError::EmptyStack);
        }
        let layer = self.feature_layer(modality);
        if frames.ncols() != layer.input_dim() {
            return Err(EmbedError::DimensionMismatch {
                expected: layer.input_dim(),
                got: frames.ncols(),
            });
        }
        let pooled = frames.mean_axis(Axis(0)).expect("non-empty stack");
        l2_normalize(layer.forward_one(pooled.view()).view())
    }

    pub fn fuse(&self, z1: &Embedding, z2: &Embedding, pair: FusionPair) -> Result<Embedding> {
        let layer = self.fusion_layer(pair)?;
        if z1.dim() != self.dim || z2.dim() != self.dim {
            return Err(EmbedError::DimensionMismatch {
                expected: self.dim,
                got: if z1.dim() != self.dim { z1.dim() } else { z2.dim() },
            });
        }
        let cat = concatenate![Axis(0), z1.values(), z2.values()];
        l2_normalize(layer.forward_one(cat.view()).view())
    }

    /// Normalized embeddings of one modality for every sample in `batch`.
    pub fn embed_modality(&self, batch: &Batch, m: Modality) -> Result<Array2<f64>> {
        let u = match m {
            Modality::Pose => self.pose.forward(batch.pose.view()),
            Modality::Visual | Modality::Tactile => {
                let stack = if m == Modality::Visual { &batch.visual } else { &batch.tactile };
                let layer = self.feature_layer(m);
                if stack.len_of(Axis(2)) != layer.input_dim() {
                    return Err(EmbedError::DimensionMismatch {
                        expected: layer.input_dim(),
                        got: stack.len_of(Axis(2)),
                    });
                }
                let pooled = stack.mean_axis(Axis(1)).ok_or(EmbedError::EmptyStack)?;
                layer.forward(pooled.view())
            }
        };
        Ok(normalize_rows(&u)?.0)
    }

    /// Normalized embeddings of a task side, fusing when the side has two modalities.
    pub fn embed_side(&self, batch: &Batch, side: Side) -> Result<Array2<f64>> {
        match side {
            Side::Single(m) => self.embed_modality(batch, m),
            Side::Fused(pair) => {
                let layer = self.fusion_layer(pair)?;
                let (a, b) = pair.parts();
                let za = self.embed_modality(batch, a)?;
                let zb = self.embed_modality(batch, b)?;
                let cat = concatenate![Axis(1), za, zb];
                Ok(normalize_rows(&layer.forward(cat.view()))?.0)
            }
        }
    }

    /// All trainable tensors in a fixed order, each as a flat slice.
    pub fn params(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        fn dense<'a>(name: String, d: &'a Dense, out: &mut Vec<(String, &'a [f64])>) {
            out.push((format!("{name}.weight"), d.weight.as_slice().expect("standard layout")));
            out.push((format!("{name}.bias"), d.bias.as_slice().expect("standard layout")));
        }
        for (i, l) in self.pose.layers.iter().enumerate() {
            dense(format!("pose.layers.{i}"), l, &mut out);
        }
        dense("pose.proj".into(), &self.pose.proj, &mut out);
        dense("visual.proj".into(), &self.visual, &mut out);
        dense("tactile.proj".into(), &self.tactile, &mut out);
        for (p, l) in &self.fusion {
            dense(format!("fusion.{}", p.key()), l, &mut out);
        }
        out.push(("alpha".into(), std::slice::from_ref(&self.alpha)));
        out
    }

    /// Mutable view of [`params`](Self::params), same order.
    pub fn params_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        fn dense<'a>(name: String, d: &'a mut Dense, out: &mut Vec<(String, &'a mut [f64])>) {
            out.push((format!("{name}.weight"), d.weight.as_slice_mut().expect("standard layout")));
            out.push((format!("{name}.bias"), d.bias.as_slice_mut().expect("standard layout")));
        }
        for (i, l) in self.pose.layers.iter_mut().enumerate() {
            dense(format!("pose.layers.{i}"), l, &mut out);
        }
        dense("pose.proj".into(), &mut self.pose.proj, &mut out);
        dense("visual.proj".into(), &mut self.visual, &mut out);
        dense("tactile.proj".into(), &mut self.tactile, &mut out);
        for (p, l) in self.fusion.iter_mut() {
            dense(format!("fusion.{}", p.key()), l, &mut out);
        }
        out.push(("alpha".into(), std::slice::from_mut(&mut self.alpha)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.len()).sum()
    }

    /// Same architecture with every trainable value set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, p) in z.params_mut() {
            p.fill(0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|(_, p)| p.iter().all(|v| v.is_finite()))
            && self.pose.input_mean.iter().chain(self.pose.input_scale.iter()).all(|v| v.is_finite())
    }

    pub fn to_checkpoint_json(&self) -> String {
        serde_json::to_string_pretty(&Checkpoint::from_model(self)).expect("plain data serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| EmbedError::Checkpoint(e.to_string()))?;
        ck.into_model()
    }
}

#[derive(Serialize, Deserialize)]
struct DenseDoc {
    weight: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl DenseDoc {
    fn from_dense(d: &Dense) -> Self {
        Self {
            weight: d.weight.outer_iter().map(|r| r.to_vec()).collect(),
            bias: d.bias.to_vec(),
        }
    }

    fn into_dense(self, input: usize, output: usize, name: &str) -> Result<Dense> {
        let bad = || EmbedError::Checkpoint(format!("`{name}` should be {output}x{input}"));
        if self.weight.len() != output || self.bias.len() != output || self.weight.iter().any(|r| r.len() != input) {
            return Err(bad());
        }
        let flat: Vec<f64> = self.weight.into_iter().flatten().collect();
        Ok(Dense {
            weight: Array2::from_shape_vec((output, input), flat).map_err(|_| bad())?,
            bias: Array1::from(self.bias),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    dim: usize,
    hidden: usize,
    visual_dim: usize,
    tactile_dim: usize,
    alpha: f64,
    pose_input_mean: Vec<f64>,
    pose_input_scale: Vec<f64>,
    pose_layers: Vec<DenseDoc>,
    pose_proj: DenseDoc,
    visual_proj: DenseDoc,
    tactile_proj: DenseDoc,
    fusion: BTreeMap<String, DenseDoc>,
}

impl Checkpoint {
    fn from_model(m: &AlignmentModel) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            dim: m.dim,
            hidden: m.hidden,
            visual_dim: m.visual_dim(),
            tactile_dim: m.tactile_dim(),
            alpha: m.alpha,
            pose_input_mean: m.pose.input_mean.to_vec(),
            pose_input_scale: m.pose.input_scale.to_vec(),
            pose_layers: m.pose.layers.iter().map(DenseDoc::from_dense).collect(),
            pose_proj: DenseDoc::from_dense(&m.pose.proj),
            visual_proj: DenseDoc::from_dense(&m.visual),
            tactile_proj: DenseDoc::from_dense(&m.tactile),
            fusion: m.fusion.iter().map(|(p, d)| (p.key().to_string(), DenseDoc::from_dense(d))).collect(),
        }
    }

    fn into_model(self) -> Result<AlignmentModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(EmbedError::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.pose_input_mean.len() != POSE_DIM || self.pose_input_scale.len() != POSE_DIM {
            return Err(EmbedError::Checkpoint("pose standardization must have 14 entries".into()));
        }
        let mut layers = Vec::with_capacity(self.pose_layers.len());
        let mut input = POSE_DIM;
        for (i, l) in self.pose_layers.into_iter().enumerate() {
            layers.push(l.into_dense(input, self.hidden, &format!("pose_layers[{i}]"))?);
            input = self.hidden;
        }
        let mut fusion = BTreeMap::new();
        for (k, d) in self.fusion {
            let pair = FusionPair::from_key(&k).ok_or_else(|| EmbedError::Checkpoint(format!("unknown fusion pair `{k}`")))?;
            fusion.insert(pair, d.into_dense(2 * self.dim, self.dim, &k)?);
        }
        let model = AlignmentModel {
            dim: self.dim,
            hidden: self.hidden,
            pose: PoseEncoder {
                input_mean: Array1::from(self.pose_input_mean),
                input_scale: Array1::from(self.pose_input_scale),
                layers,
                proj: self.pose_proj.into_dense(input, self.dim, "pose_proj")?,
            },
            visual: self.visual_proj.into_dense(self.visual_dim, self.dim, "visual_proj")?,
            tactile: self.tactile_proj.into_dense(self.tactile_dim, self.dim, "tactile_proj")?,
            fusion,
            alpha: self.alpha,
        };
        if !model.is_finite() {
            return Err(EmbedError::NonFinite("checkpoint"));
        }
        Ok(model)
    }
}
