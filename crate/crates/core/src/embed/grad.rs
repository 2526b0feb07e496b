use std::collections::BTreeMap;

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use super::model::{gelu, gelu_grad, AlignmentModel, Dense};
use super::{infonce_with_grad, normalize_rows, Batch, EmbedError, Result, ALPHA_MAX};
use crate::modality::{FusionPair, Modality, RetrievalTask, Side};

/// Parameter gradients, laid out exactly like the model they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub AlignmentModel);

impl Gradients {
    pub fn zeros_like(model: &AlignmentModel) -> Self {
        Self(model.zeros_like())
    }

    pub fn params(&self) -> Vec<(String, &[f64])> {
        self.0.params()
    }

    pub fn is_zero(&self) -> bool {
        self.params().iter().all(|(_, g)| g.iter().all(|&v| v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.0.is_finite()
    }
}

/// Inverted dropout on the pose MLP hidden activations.
pub(crate) struct Dropout<'r, R: Rng> {
    pub p: f64,
    pub rng: &'r mut R,
}

struct PoseTape {
    /// `inputs[l]` feeds layer `l`; the last entry feeds the projection.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    masks: Vec<Option<Array2<f64>>>,
}

/// Output of the last affine map before normalization, with what backward needs.
struct Node {
    input: Array2<f64>,
    z: Array2<f64>,
    norms: ndarray::Array1<f64>,
}

struct Tape<'m> {
    model: &'m AlignmentModel,
    pose: Option<PoseTape>,
    nodes: BTreeMap<Side, Node>,
}

fn dense_backward(layer: &Dense, grad: &mut Dense, x: ArrayView2<'_, f64>, du: ArrayView2<'_, f64>, want_dx: bool) -> Option<Array2<f64>> {
    grad.weight += &du.t().dot(&x);
    grad.bias += &du.sum_axis(Axis(0));
    want_dx.then(|| du.dot(&layer.weight))
}

/// Backward through row-wise `z = u / |u|`.
fn normalize_backward(node: &Node, dz: &Array2<f64>) -> Array2<f64> {
    let mut du = dz.clone();
    for ((mut row, z), &n) in du.outer_iter_mut().zip(node.z.outer_iter()).zip(node.norms.iter()) {
        let proj = z.dot(&row);
        Zip::from(&mut row).and(&z).for_each(|d, &zi| *d = (*d - zi * proj) / n);
    }
    du
}

impl<'m> Tape<'m> {
    fn new(model: &'m AlignmentModel) -> Self {
        Self {
            model,
            pose: None,
            nodes: BTreeMap::new(),
        }
    }

    fn single(&mut self, batch: &Batch, m: Modality, dropout: &mut Option<Dropout<'_, impl Rng>>) -> Result<()> {
        let side = Side::Single(m);
        if self.nodes.contains_key(&side) {
            return Ok(());
        }
        let input = match m {
            Modality::Pose => {
                let mut h = self.model.pose.standardize(batch.pose.view());
                let mut tape = PoseTape {
                    inputs: Vec::new(),
                    pre: Vec::new(),
                    masks: Vec::new(),
                };
                for layer in &self.model.pose.layers {
                    let a = layer.forward(h.view());
                    let mut out = a.mapv(gelu);
                    let mask = dropout.as_mut().filter(|d| d.p > 0.0).map(|d| {
                        let keep = 1.0 - d.p;
                        Array2::from_shape_fn(out.dim(), |_| if d.rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    });
                    if let Some(mask) = &mask {
                        out *= mask;
                    }
                    tape.inputs.push(h);
                    tape.pre.push(a);
                    tape.masks.push(mask);
                    h = out;
                }
                tape.inputs.push(h.clone());
                self.pose = Some(tape);
                h
            }
            Modality::Visual | Modality::Tactile => {
                let stack = if m == Modality::Visual { &batch.visual } else { &batch.tactile };
                let expected = self.model.feature_layer(m).input_dim();
                if stack.len_of(Axis(2)) != expected {
                    return Err(EmbedError::DimensionMismatch {
                        expected,
                        got: stack.len_of(Axis(2)),
                    });
                }
                stack.mean_axis(Axis(1)).ok_or(EmbedError::EmptyStack)?
            }
        };
        let u = self.model.feature_layer(m).forward(input.view());
        let (z, norms) = normalize_rows(&u)?;
        self.nodes.insert(side, Node { input, z, norms });
        Ok(())
    }

    fn side(&mut self, batch: &Batch, side: Side, dropout: &mut Option<Dropout<'_, impl Rng>>) -> Result<()> {
        match side {
            Side::Single(m) => self.single(batch, m, dropout),
            Side::Fused(pair) => {
                if self.nodes.contains_key(&side) {
                    return Ok(());
                }
                let layer = self.model.fusion_layer(pair)?;
                let (a, b) = pair.parts();
                self.single(batch, a, dropout)?;
                self.single(batch, b, dropout)?;
                let input = concatenate![Axis(1), self.nodes[&Side::Single(a)].z, self.nodes[&Side::Single(b)].z];
                let (z, norms) = normalize_rows(&layer.forward(input.view()))?;
                self.nodes.insert(side, Node { input, z, norms });
                Ok(())
            }
        }
    }

    fn backward(&self, mut dz: BTreeMap<Side, Array2<f64>>, grads: &mut AlignmentModel) {
        let d = self.model.dim;
        for pair in FusionPair::ALL {
            let side = Side::Fused(pair);
            let Some(g) = dz.remove(&side) else { continue };
            let node = &self.nodes[&side];
            let du = normalize_backward(node, &g);
            let layer = &self.model.fusion[&pair];
            let gl = grads.fusion.get_mut(&pair).expect("gradient layout mirrors model");
            let dcat = dense_backward(layer, gl, node.input.view(), du.view(), true).expect("requested");
            let (a, b) = pair.parts();
            for (m, part) in [(a, dcat.slice(s![.., ..d])), (b, dcat.slice(s![.., d..]))] {
                *dz.entry(Side::Single(m)).or_insert_with(|| Array2::zeros(part.dim())) += &part;
            }
        }
        for m in Modality::ALL {
            let side = Side::Single(m);
            let Some(g) = dz.remove(&side) else { continue };
            let node = &self.nodes[&side];
            let du = normalize_backward(node, &g);
            match m {
                Modality::Visual => {
                    dense_backward(&self.model.visual, &mut grads.visual, node.input.view(), du.view(), false);
                }
                Modality::Tactile => {
                    dense_backward(&self.model.tactile, &mut grads.tactile, node.input.view(), du.view(), false);
                }
                Modality::Pose => {
                    let tape = self.pose.as_ref().expect("pose forward recorded");
                    let layers = &self.model.pose.layers;
                    let mut dh = dense_backward(&self.model.pose.proj, &mut grads.pose.proj, node.input.view(), du.view(), true)
                        .expect("requested");
                    for l in (0..layers.len()).rev() {
                        if let Some(mask) = &tape.masks[l] {
                            dh *= mask;
                        }
                        let da = &dh * &tape.pre[l].mapv(gelu_grad);
                        dh = dense_backward(&layers[l], &mut grads.pose.layers[l], tape.inputs[l].view(), da.view(), l > 0)
                            .unwrap_or_default();
                    }
                }
            }
        }
    }
}

/// Loss of one retrieval pairing and its gradient with respect to every parameter.
pub fn loss_and_grads(model: &AlignmentModel, batch: &Batch, task: RetrievalTask) -> Result<(f64, Gradients)> {
    objective_and_grads(model, batch, &[task])
}

/// Mean contrastive loss over `tasks` and its gradient.
pub fn objective_and_grads(model: &AlignmentModel, batch: &Batch, tasks: &[RetrievalTask]) -> Result<(f64, Gradients)> {
    objective_impl(model, batch, tasks, &mut None::<Dropout<'_, rand_chacha::ChaCha8Rng>>)
}

pub(crate) fn objective_impl(
    model: &AlignmentModel,
    batch: &Batch,
    tasks: &[RetrievalTask],
    dropout: &mut Option<Dropout<'_, impl Rng>>,
) -> Result<(f64, Gradients)> {
    if tasks.is_empty() {
        return Err(EmbedError::InvalidConfig("at least one task is required".into()));
    }
    if batch.is_empty() {
        return Err(EmbedError::ShapeMismatch("empty batch".into()));
    }
    let mut tape = Tape::new(model);
    for t in tasks {
        tape.side(batch, t.query(), dropout)?;
        tape.side(batch, t.target(), dropout)?;
    }
    let scale = (model.alpha.clamp(0.0, ALPHA_MAX)).exp();
    let alpha_live = (0.0..=ALPHA_MAX).contains(&model.alpha);
    let weight = 1.0 / tasks.len() as f64;
    let mut grads = model.zeros_like();
    let mut dz: BTreeMap<Side, Array2<f64>> = BTreeMap::new();
    let mut total = 0.0;
    for t in tasks {
        let zq = &tape.nodes[&t.query()].z;
        let zt = &tape.nodes[&t.target()].z;
        let s = zq.dot(&zt.t()) * scale;
        let (loss, mut ds) = infonce_with_grad(s.view())?;
        total += weight * loss;
        ds *= weight;
        if alpha_live {
            grads.alpha += (&ds * &s).sum();
        }
        let dq = ds.dot(zt) * scale;
        let dt = ds.t().dot(zq) * scale;
        for (side, g) in [(t.query(), dq), (t.target(), dt)] {
            match dz.get_mut(&side) {
                Some(acc) => *acc += &g,
                None => {
                    dz.insert(side, g);
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(EmbedError::NonFinite("loss"));
    }
    tape.backward(dz, &mut grads);
    let grads = Gradients(grads);
    if !grads.is_finite() {
        return Err(EmbedError::NonFinite("gradients"));
    }
    Ok((total, grads))
}
