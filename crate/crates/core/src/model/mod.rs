//! Toy frozen backbone with residual bottleneck adapters and a per-client
//! linear head. Forward and backward passes are written out by hand.
//!
//! Batches are row-major: one sample per row. Weight matrices map rows
//! through `x · W`, so a layer with `in` inputs and `out` outputs stores an
//! `in × out` matrix. In that convention an adapter neuron's incoming
//! weights are a *column* of `w_down`.

mod checkpoint;
mod optim;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint};
pub use optim::{adamw_step, lr_at, OptimizerState};

use serde::{Deserialize, Serialize};

use crate::data::Labels;
use crate::error::{Error, Result};
use crate::numerics::{log_sum_exp, matmul, relu, rng_normal, sigmoid, softplus, Matrix, Rng};

/// Elementwise map inside the adapter bottleneck.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Relu,
    Tanh,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Relu => relu(x),
            Nonlinearity::Tanh => x.tanh(),
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Nonlinearity::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Nonlinearity::Tanh => {
                let t = pre.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Shape parameters shared by every participant of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub input_dim: usize,
    pub hidden: usize,
    pub bottleneck: usize,
    pub depth: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.depth == 0 || self.bottleneck == 0 {
            return Err(Error::shape(format!("degenerate model dims {self:?}")));
        }
        if self.bottleneck > self.hidden {
            return Err(Error::shape(format!(
                "bottleneck {} wider than hidden {}",
                self.bottleneck, self.hidden
            )));
        }
        Ok(())
    }
}

/// Any bundle of trainable tensors. Tensors are visited in a fixed order,
/// which is also the optimizer-state and serialization order.
pub trait ParamSet {
    fn tensors(&self) -> Vec<&[f64]>;
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `in × out`
    pub w: Matrix,
    pub b: Vec<f64>,
}

/// Dense tanh layers of constant output width. Frozen unless running the
/// full fine-tuning baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub layers: Vec<DenseLayer>,
    pub frozen: bool,
}

impl Backbone {
    pub fn init(rng: &mut Rng, dims: &ModelDims) -> Result<Self> {
        dims.validate()?;
        let layers = (0..dims.depth)
            .map(|l| {
                let fan_in = if l == 0 { dims.input_dim } else { dims.hidden };
                let w = rng_normal(rng, fan_in, dims.hidden, 1.0 / (fan_in as f64).sqrt());
                let b = rng_normal(rng, 1, dims.hidden, 0.1).into_vec();
                DenseLayer { w, b }
            })
            .collect();
        Ok(Self {
            layers,
            frozen: true,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.rows())
    }

    pub fn hidden(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.cols())
    }

    pub fn zeros_like(&self) -> Backbone {
        Backbone {
            layers: self
                .layers
                .iter()
                .map(|l| DenseLayer {
                    w: Matrix::zeros(l.w.rows(), l.w.cols()),
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
            frozen: self.frozen,
        }
    }
}

impl ParamSet for Backbone {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }
}

/// Residual bottleneck: `x + σ(x·W_down + b_down)·W_up + b_up`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer {
    /// `h × b`; column `j` holds the incoming weights of bottleneck neuron `j`.
    pub w_down: Matrix,
    pub b_down: Vec<f64>,
    /// `b × h`; row `j` holds the outgoing weights of bottleneck neuron `j`.
    pub w_up: Matrix,
    pub b_up: Vec<f64>,
    pub nonlinearity: Nonlinearity,
}

impl AdapterLayer {
    pub fn init(rng: &mut Rng, hidden: usize, bottleneck: usize, std: f64) -> Self {
        Self {
            w_down: rng_normal(rng, hidden, bottleneck, std),
            b_down: rng_normal(rng, 1, bottleneck, std).into_vec(),
            w_up: rng_normal(rng, bottleneck, hidden, std),
            b_up: rng_normal(rng, 1, hidden, std).into_vec(),
            nonlinearity: Nonlinearity::Relu,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_down.rows()
    }

    pub fn bottleneck(&self) -> usize {
        self.w_down.cols()
    }

    fn check_shapes(&self) -> Result<()> {
        let (h, b) = self.w_down.shape();
        if self.b_down.len() != b
            || self.w_up.shape() != (b, h)
            || self.b_up.len() != h
            || b > h
        {
            return Err(Error::shape(format!(
                "inconsistent adapter layer: w_down {:?}, b_down {}, w_up {:?}, b_up {}",
                self.w_down.shape(),
                self.b_down.len(),
                self.w_up.shape(),
                self.b_up.len()
            )));
        }
        Ok(())
    }

    /// Bottleneck pre-activations for a batch.
    pub fn pre_activation(&self, x: &Matrix) -> Result<Matrix> {
        matmul(x, &self.w_down)?.add_row_vector(&self.b_down)
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let pre = self.pre_activation(x)?;
        let hidden = pre.map(|v| self.nonlinearity.apply(v));
        x.add(&matmul(&hidden, &self.w_up)?)?.add_row_vector(&self.b_up)
    }
}

/// One adapter per backbone layer; the full communicated parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterStack {
    pub layers: Vec<AdapterLayer>,
}

impl AdapterStack {
    pub fn init(rng: &mut Rng, dims: &ModelDims, std: f64) -> Result<Self> {
        dims.validate()?;
        Ok(Self {
            layers: (0..dims.depth)
                .map(|_| AdapterLayer::init(rng, dims.hidden, dims.bottleneck, std))
                .collect(),
        })
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn check_shapes(&self) -> Result<()> {
        self.layers.iter().try_for_each(AdapterLayer::check_shapes)
    }

    /// True when both stacks have the same layer count and tensor shapes.
    pub fn same_shape(&self, other: &AdapterStack) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.w_down.shape() == b.w_down.shape()
                    && a.b_down.len() == b.b_down.len()
                    && a.w_up.shape() == b.w_up.shape()
                    && a.b_up.len() == b.b_up.len()
            })
    }

    pub fn ensure_same_shape(&self, other: &AdapterStack) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape("adapter stacks differ in shape"))
        }
    }

    pub fn zeros_like(&self) -> AdapterStack {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.fill(0.0);
        }
        out
    }

    pub fn scaled(&self, s: f64) -> AdapterStack {
        let mut out = self.clone();
        for t in out.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= s);
        }
        out
    }

    /// `self += s · other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &AdapterStack, s: f64) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, v) in dst.iter_mut().zip(src) {
                *d += s * v;
            }
        }
        Ok(())
    }

    /// Frobenius norm of `self − other` over every parameter.
    pub fn distance(&self, other: &AdapterStack) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let mut acc = 0.0;
        for (a, b) in self.tensors().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter().zip(b) {
                acc += (x - y) * (x - y);
            }
        }
        Ok(acc.sqrt())
    }

    pub fn max_abs_diff(&self, other: &AdapterStack) -> f64 {
        self.tensors()
            .into_iter()
            .zip(other.tensors())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

impl ParamSet for AdapterStack {
    fn tensors(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.w_down.as_slice(),
                    l.b_down.as_slice(),
                    l.w_up.as_slice(),
                    l.b_up.as_slice(),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.w_down.as_mut_slice(),
                    l.b_down.as_mut_slice(),
                    l.w_up.as_mut_slice(),
                    l.b_up.as_mut_slice(),
                ]
            })
            .collect()
    }
}

/// Client-private linear classifier. Never aggregated.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    /// `h × C_k`
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl ClassifierHead {
    pub fn init(rng: &mut Rng, hidden: usize, num_classes: usize, std: f64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::shape("classifier head needs at least one class"));
        }
        Ok(Self {
            w: rng_normal(rng, hidden, num_classes, std),
            b: vec![0.0; num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.b.len()
    }

    pub fn zeros_like(&self) -> ClassifierHead {
        ClassifierHead {
            w: Matrix::zeros(self.w.rows(), self.w.cols()),
            b: vec![0.0; self.b.len()],
        }
    }

    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        matmul(features, &self.w)?.add_row_vector(&self.b)
    }
}

impl ParamSet for ClassifierHead {
    fn tensors(&self) -> Vec<&[f64]> {
        vec![self.w.as_slice(), self.b.as_slice()]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_mut_slice(), self.b.as_mut_slice()]
    }
}

/// Backbone from `rng.split("backbone")`, so every client calling this with
/// the same root seed shares bit-identical frozen weights. Adapters and head
/// come from their own substreams.
pub fn init_model(
    rng: &Rng,
    dims: &ModelDims,
    num_classes: usize,
    adapter_std: f64,
) -> Result<(Backbone, AdapterStack, ClassifierHead)> {
    dims.validate()?;
    let backbone = Backbone::init(&mut rng.split("backbone"), dims)?;
    let adapters = AdapterStack::init(&mut rng.split("adapters"), dims, adapter_std)?;
    let head = ClassifierHead::init(&mut rng.split("head"), dims.hidden, num_classes, 0.01)?;
    Ok((backbone, adapters, head))
}

/// Per-insertion-point record of one forward pass.
#[derive(Clone, Debug)]
pub struct LayerCache {
    /// Input to the backbone layer.
    pub input: Matrix,
    /// Backbone output, which is also the adapter input.
    pub backbone_out: Matrix,
    /// Bottleneck pre-activations, `n × b`.
    pub pre: Matrix,
    /// Bottleneck post-activations, `n × b`.
    pub hidden: Matrix,
    /// Adapter (residual) output, `n × h`.
    pub output: Matrix,
}

#[derive(Clone, Debug)]
pub struct ActivationCache {
    pub layers: Vec<LayerCache>,
}

impl ActivationCache {
    pub fn batch_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.input.rows())
    }

    /// Features fed to the classifier head.
    pub fn features(&self) -> &Matrix {
        &self.layers.last().expect("non-empty cache").output
    }
}

/// Runs backbone and adapters only; the cache holds everything the backward
/// pass and activation-based alignment need.
pub fn forward_features(
    backbone: &Backbone,
    adapters: &AdapterStack,
    batch: &Matrix,
) -> Result<ActivationCache> {
    if backbone.layers.len() != adapters.layers.len() {
        return Err(Error::shape(format!(
            "{} backbone layers but {} adapters",
            backbone.layers.len(),
            adapters.layers.len()
        )));
    }
    if batch.cols() != backbone.input_dim() {
        return Err(Error::shape(format!(
            "batch has {} features, backbone expects {}",
            batch.cols(),
            backbone.input_dim()
        )));
    }
    let mut x = batch.clone();
    let mut layers = Vec::with_capacity(adapters.layers.len());
    for (dense, adapter) in backbone.layers.iter().zip(&adapters.layers) {
        if adapter.hidden() != dense.w.cols() {
            return Err(Error::shape("adapter width differs from backbone width"));
        }
        let backbone_out = matmul(&x, &dense.w)?
            .add_row_vector(&dense.b)?
            .map(f64::tanh);
        let pre = adapter.pre_activation(&backbone_out)?;
        let hidden = pre.map(|v| adapter.nonlinearity.apply(v));
        let output = backbone_out
            .add(&matmul(&hidden, &adapter.w_up)?)?
            .add_row_vector(&adapter.b_up)?;
        layers.push(LayerCache {
            input: x,
            backbone_out,
            pre,
            hidden,
            output: output.clone(),
        });
        x = output;
    }
    Ok(ActivationCache { layers })
}

pub fn forward(
    backbone: &Backbone,
    adapters: &AdapterStack,
    head: &ClassifierHead,
    batch: &Matrix,
) -> Result<(Matrix, ActivationCache)> {
    let cache = forward_features(backbone, adapters, batch)?;
    let logits = head.apply(cache.features())?;
    Ok((logits, cache))
}

/// Gradients with the same layout as the parameters they belong to.
#[derive(Clone, Debug)]
pub struct Grads {
    pub adapters: AdapterStack,
    pub head: ClassifierHead,
    /// Present only when the backbone is trainable.
    pub backbone: Option<Backbone>,
}

/// Mean loss over the batch and the gradient of the loss with respect to
/// the logits. Single-label targets use softmax cross-entropy; multi-hot
/// targets use per-class sigmoid cross-entropy averaged over classes.
pub fn loss_and_logit_grad(logits: &Matrix, labels: &Labels) -> Result<(f64, Matrix)> {
    let (n, c) = logits.shape();
    if labels.len() != n {
        return Err(Error::data(format!("{} labels for {n} logit rows", labels.len())));
    }
    if n == 0 {
        return Err(Error::data("empty batch"));
    }
    let mut grad = Matrix::zeros(n, c);
    let mut loss = 0.0;
    match labels {
        Labels::Single(idx) => {
            for (r, &y) in idx.iter().enumerate() {
                if y >= c {
                    return Err(Error::data(format!("label {y} out of range for {c} classes")));
                }
                let row = logits.row(r);
                let lse = log_sum_exp(row);
                loss += lse - row[y];
                let g = grad.row_mut(r);
                for (gj, &z) in g.iter_mut().zip(row) {
                    *gj = (z - lse).exp() / n as f64;
                }
                g[y] -= 1.0 / n as f64;
            }
            loss /= n as f64;
        }
        Labels::Multi(targets) => {
            if targets.shape() != (n, c) {
                return Err(Error::shape(format!(
                    "multi-hot targets {:?} against logits {:?}",
                    targets.shape(),
                    (n, c)
                )));
            }
            let denom = (n * c) as f64;
            for r in 0..n {
                for j in 0..c {
                    let z = logits[(r, j)];
                    let y = targets[(r, j)];
                    loss += softplus(z) - y * z;
                    grad[(r, j)] = (sigmoid(z) - y) / denom;
                }
            }
            loss /= denom;
        }
    }
    Ok((loss, grad))
}

/// Loss and gradients for adapters, head and (when `backbone.frozen` is
/// false) the backbone.
pub fn loss_and_backward(
    logits: &Matrix,
    labels: &Labels,
    cache: &ActivationCache,
    backbone: &Backbone,
    adapters: &AdapterStack,
    head: &ClassifierHead,
) -> Result<(f64, Grads)> {
    let (loss, dlogits) = loss_and_logit_grad(logits, labels)?;
    let features = cache.features();

    let head_grad = ClassifierHead {
        w: matmul(&features.transpose(), &dlogits)?,
        b: dlogits.column_sums(),
    };
    let mut d_out = matmul(&dlogits, &head.w.transpose())?;

    let mut adapter_grads = adapters.zeros_like();
    let mut backbone_grads = (!backbone.frozen).then(|| backbone.zeros_like());

    for l in (0..adapters.layers.len()).rev() {
        let lc = &cache.layers[l];
        let adapter = &adapters.layers[l];
        let g = &mut adapter_grads.layers[l];

        g.w_up = matmul(&lc.hidden.transpose(), &d_out)?;
        g.b_up = d_out.column_sums();
        let d_hidden = matmul(&d_out, &adapter.w_up.transpose())?;
        let mut d_pre = d_hidden;
        for (d, &p) in d_pre.as_mut_slice().iter_mut().zip(lc.pre.as_slice()) {
            *d *= adapter.nonlinearity.derivative(p);
        }
        g.w_down = matmul(&lc.backbone_out.transpose(), &d_pre)?;
        g.b_down = d_pre.column_sums();

        // Residual path plus the bottleneck path.
        let d_t = d_out.add(&matmul(&d_pre, &adapter.w_down.transpose())?)?;
        let mut d_z = d_t;
        for (d, &t) in d_z
            .as_mut_slice()
            .iter_mut()
            .zip(lc.backbone_out.as_slice())
        {
            *d *= 1.0 - t * t;
        }
        let dense = &backbone.layers[l];
        if let Some(bg) = backbone_grads.as_mut() {
            bg.layers[l].w = matmul(&lc.input.transpose(), &d_z)?;
            bg.layers[l].b = d_z.column_sums();
        }
        if l > 0 {
            d_out = matmul(&d_z, &dense.w.transpose())?;
        }
    }

    Ok((
        loss,
        Grads {
            adapters: adapter_grads,
            head: head_grad,
            backbone: backbone_grads,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            input_dim: 3,
            hidden: 4,
            bottleneck: 2,
            depth: 2,
        }
    }

    #[test]
    fn shared_seed_gives_identical_backbones() {
        let dims = tiny_dims();
        let a = init_model(&Rng::new(5), &dims, 3, 0.01).unwrap();
        let b = init_model(&Rng::new(5), &dims, 4, 0.5).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn shape_contract() {
        let dims = ModelDims {
            input_dim: 8,
            hidden: 8,
            bottleneck: 2,
            depth: 2,
        };
        let (_, adapters, head) = init_model(&Rng::new(1), &dims, 5, 0.01).unwrap();
        assert_eq!(adapters.depth(), 2);
        for l in &adapters.layers {
            assert_eq!(l.w_down.shape(), (8, 2));
            assert_eq!(l.w_up.shape(), (2, 8));
        }
        assert_eq!(head.w.shape(), (8, 5));
    }

    #[test]
    fn invalid_dims_rejected() {
        let dims = ModelDims {
            input_dim: 3,
            hidden: 2,
            bottleneck: 4,
            depth: 1,
        };
        assert!(matches!(
            init_model(&Rng::new(0), &dims, 2, 0.01),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_std_adapter_is_residual_identity() {
        let dims = tiny_dims();
        let mut rng = Rng::new(9);
        let layer = AdapterLayer::init(&mut rng, 4, 2, 0.0);
        let x = rng_normal(&mut rng, 5, 4, 1.0);
        assert_eq!(layer.apply(&x).unwrap(), x);

        let (_, mut adapters, _) = init_model(&Rng::new(2), &dims, 2, 0.3).unwrap();
        for l in &mut adapters.layers {
            l.w_up = Matrix::zeros(2, 4);
        }
        let out = adapters.layers[0].apply(&x).unwrap();
        let expected = x.add_row_vector(&adapters.layers[0].b_up).unwrap();
        assert_eq!(out, expected);
    }

    #[test]
    fn pass_through_with_identity_backbone() {
        let dims = ModelDims {
            input_dim: 3,
            hidden: 3,
            bottleneck: 1,
            depth: 1,
        };
        let (mut backbone, adapters, head) = init_model(&Rng::new(4), &dims, 2, 0.0).unwrap();
        backbone.layers[0].w = Matrix::identity(3);
        backbone.layers[0].b = vec![0.0; 3];
        let x = rng_normal(&mut Rng::new(8), 4, 3, 0.5);
        let (logits, _) = forward(&backbone, &adapters, &head, &x).unwrap();
        let expected = head.apply(&x.map(f64::tanh)).unwrap();
        assert_eq!(logits, expected);
    }

    #[test]
    fn identical_rows_give_identical_logits() {
        let dims = tiny_dims();
        let (backbone, adapters, head) = init_model(&Rng::new(4), &dims, 3, 0.2).unwrap();
        let row = vec![0.3, -1.2, 0.7];
        let batch = Matrix::from_rows(&vec![row; 6]).unwrap();
        let (logits, _) = forward(&backbone, &adapters, &head, &batch).unwrap();
        for r in 1..6 {
            assert_eq!(logits.row(r), logits.row(0));
        }
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let (backbone, adapters, head) = init_model(&Rng::new(4), &tiny_dims(), 3, 0.2).unwrap();
        let batch = Matrix::zeros(2, 5);
        assert!(matches!(
            forward(&backbone, &adapters, &head, &batch),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn uniform_logits_loss_is_log_c() {
        let logits = Matrix::zeros(3, 4);
        let (loss, _) = loss_and_logit_grad(&logits, &Labels::Single(vec![0, 1, 3])).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_logits_multilabel_loss_is_ln2() {
        let logits = Matrix::zeros(2, 5);
        let (loss, _) =
            loss_and_logit_grad(&logits, &Labels::Multi(Matrix::zeros(2, 5))).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn label_out_of_range_is_data_error() {
        let logits = Matrix::zeros(1, 3);
        assert!(matches!(
            loss_and_logit_grad(&logits, &Labels::Single(vec![3])),
            Err(Error::Data(_))
        ));
    }
}
