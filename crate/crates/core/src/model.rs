//! Feed-forward ReLU classifier `p(y | x, θ)`.
//!
//! Hidden layers compute `relu(x W + b + noise)`; the output layer produces
//! logits (softmax lives in [`crate::divergence`]). During training an
//! optional zero-mean Gaussian noise is added to every hidden pre-activation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::autodiff::{Tape, Var};
use crate::divergence::softmax;
use crate::rng::Rng;
use crate::tensor::{gemm, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
    /// Standard deviation of the training-time hidden noise; 0 disables it.
    pub hidden_noise_sd: f64,
}

impl ClassifierSpec {
    pub fn new(input_dim: usize, hidden_dims: &[usize], num_classes: usize) -> Self {
        ClassifierSpec { input_dim, hidden_dims: hidden_dims.to_vec(), num_classes, hidden_noise_sd: 0.0 }
    }

    pub fn with_noise(mut self, sd: f64) -> Self {
        self.hidden_noise_sd = sd;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be at least 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidConfig("num_classes must be at least 2".into()));
        }
        if self.hidden_dims.iter().any(|&h| h == 0) {
            return Err(Error::InvalidConfig("hidden layers must have at least one unit".into()));
        }
        if !(self.hidden_noise_sd >= 0.0 && self.hidden_noise_sd.is_finite()) {
            return Err(Error::InvalidConfig("hidden_noise_sd must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for every dense layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden_dims.iter().chain(core::iter::once(&self.num_classes)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Where one dense layer lives inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSlice {
    pub name: String,
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `[fan_in, fan_out]`.
    pub weight: Range<usize>,
    pub bias: Range<usize>,
}

/// Flat parameter vector θ with its per-layer layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    theta: Vec<f64>,
    layout: Vec<LayerSlice>,
}

fn layout_for(spec: &ClassifierSpec) -> Vec<LayerSlice> {
    let mut offset = 0;
    spec.layer_dims()
        .into_iter()
        .enumerate()
        .map(|(i, (fan_in, fan_out))| {
            let weight = offset..offset + fan_in * fan_out;
            let bias = weight.end..weight.end + fan_out;
            offset = bias.end;
            LayerSlice { name: format!("dense{}", i), fan_in, fan_out, weight, bias }
        })
        .collect()
}

impl ParamSet {
    pub fn zeros(spec: &ClassifierSpec) -> Self {
        ParamSet { theta: alloc::vec![0.0; spec.param_count()], layout: layout_for(spec) }
    }

    pub fn from_vec(spec: &ClassifierSpec, theta: Vec<f64>) -> Result<Self> {
        let expected = spec.param_count();
        if theta.len() != expected {
            return Err(Error::ShapeMismatch {
                op: "params",
                detail: format!("spec needs {} parameters, got {}", expected, theta.len()),
            });
        }
        Ok(ParamSet { theta, layout: layout_for(spec) })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn layout(&self) -> &[LayerSlice] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    pub fn weight(&self, layer: usize) -> &[f64] {
        &self.theta[self.layout[layer].weight.clone()]
    }

    pub fn bias(&self, layer: usize) -> &[f64] {
        &self.theta[self.layout[layer].bias.clone()]
    }
}

/// He-scaled Gaussian weights (sd = sqrt(2 / fan_in)), zero biases.
pub fn init_params(spec: &ClassifierSpec, rng: &mut Rng) -> Result<ParamSet> {
    spec.validate()?;
    let mut params = ParamSet::zeros(spec);
    let layout = params.layout.clone();
    for layer in &layout {
        let sd = libm::sqrt(2.0 / layer.fan_in as f64);
        for w in &mut params.theta[layer.weight.clone()] {
            *w = sd * rng.gaussian();
        }
    }
    Ok(params)
}

fn draw_noise(rng: &mut Rng, rows: usize, width: usize, sd: f64) -> Tensor {
    Tensor::new(alloc::vec![rows, width], rng.gaussian_vec(rows * width, sd)).expect("shape matches draw")
}

/// Parameter leaves of a [`Classifier`] on one tape, in θ order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl BoundParams {
    /// Interleaved `[w0, b0, w1, b1, ...]`, matching the θ layout.
    pub fn vars(&self) -> Vec<Var> {
        self.weights.iter().zip(&self.biases).flat_map(|(&w, &b)| [w, b]).collect()
    }

    /// Concatenates gradients returned for [`BoundParams::vars`] into a θ-shaped vector.
    pub fn flatten(grads: &[Tensor]) -> Vec<f64> {
        grads.iter().flat_map(|g| g.data().iter().copied()).collect()
    }
}

/// An MLP architecture together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub spec: ClassifierSpec,
    pub params: ParamSet,
}

impl Classifier {
    pub fn new(spec: ClassifierSpec, params: ParamSet) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.param_count() {
            return Err(Error::ShapeMismatch {
                op: "classifier",
                detail: format!("spec needs {} parameters, got {}", spec.param_count(), params.len()),
            });
        }
        Ok(Classifier { spec, params })
    }

    pub fn init(spec: ClassifierSpec, rng: &mut Rng) -> Result<Self> {
        let params = init_params(&spec, rng)?;
        Ok(Classifier { spec, params })
    }

    pub fn with_theta(&self, theta: Vec<f64>) -> Result<Self> {
        Ok(Classifier { spec: self.spec.clone(), params: ParamSet::from_vec(&self.spec, theta)? })
    }

    fn check_input(&self, shape: &[usize]) -> Result<usize> {
        if shape.len() != 2 || shape[1] != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                op: "logits",
                detail: format!("expected [batch, {}], got {:?}", self.spec.input_dim, shape),
            });
        }
        Ok(shape[0])
    }

    /// Adds every weight and bias as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundParams> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for layer in self.params.layout() {
            let w = Tensor::matrix(layer.fan_in, layer.fan_out, self.params.theta[layer.weight.clone()].to_vec())?;
            let b = Tensor::vector(self.params.theta[layer.bias.clone()].to_vec());
            weights.push(tape.leaf(w));
            biases.push(tape.leaf(b));
        }
        Ok(BoundParams { weights, biases })
    }

    /// Records the logits of `x` (shape `[batch, input_dim]`) on `tape`.
    ///
    /// With `noise = Some(rng)` and a positive `hidden_noise_sd`, fresh
    /// Gaussian noise is drawn for every hidden pre-activation; `None` is
    /// evaluation mode.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Var,
        mut noise: Option<&mut Rng>,
    ) -> Result<Var> {
        let batch = self.check_input(tape.shape(x)?)?;
        let n_layers = bound.weights.len();
        let mut h = x;
        for (l, (&w, &b)) in bound.weights.iter().zip(&bound.biases).enumerate() {
            let z = tape.matmul(h, w)?;
            let mut z = tape.add_bias(z, b)?;
            if l + 1 == n_layers {
                return Ok(z);
            }
            if let (Some(rng), true) = (noise.as_deref_mut(), self.spec.hidden_noise_sd > 0.0) {
                let width = self.params.layout[l].fan_out;
                let eps = tape.constant(draw_noise(rng, batch, width, self.spec.hidden_noise_sd));
                z = tape.add(z, eps)?;
            }
            h = tape.relu(z)?;
        }
        unreachable!("a classifier always has an output layer")
    }

    /// Logits without recording a tape. Draws noise in the same order as
    /// [`Classifier::logits_on_tape`].
    pub fn logits(&self, x: &Tensor, mut noise: Option<&mut Rng>) -> Result<Tensor> {
        let batch = self.check_input(x.shape())?;
        let layout = self.params.layout();
        let mut h = x.data().to_vec();
        for (l, layer) in layout.iter().enumerate() {
            let mut z = alloc::vec![0.0; batch * layer.fan_out];
            for row in z.chunks_mut(layer.fan_out) {
                row.copy_from_slice(self.params.bias(l));
            }
            gemm(batch, layer.fan_in, layer.fan_out, 1.0, &h, false, self.params.weight(l), false, 1.0, &mut z);
            if l + 1 < layout.len() {
                if let (Some(rng), true) = (noise.as_deref_mut(), self.spec.hidden_noise_sd > 0.0) {
                    let eps = draw_noise(rng, batch, layer.fan_out, self.spec.hidden_noise_sd);
                    z.iter_mut().zip(eps.data()).for_each(|(v, e)| *v += e);
                }
                z.iter_mut().for_each(|v| {
                    if *v <= 0.0 {
                        *v = 0.0
                    }
                });
            }
            h = z;
        }
        let out = Tensor::matrix(batch, self.spec.num_classes, h)?;
        if !out.is_finite() {
            return Err(Error::NonFinite { node: 0, op: "logits" });
        }
        Ok(out)
    }

    pub fn probs(&self, x: &Tensor, noise: Option<&mut Rng>) -> Result<Tensor> {
        softmax(&self.logits(x, noise)?)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let logits = self.logits(x, None)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |best, j| if row[j] > row[best] { j } else { best })
            })
            .collect())
    }

    /// Fraction of rows whose argmax prediction differs from `labels`.
    pub fn error_rate(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                op: "error_rate",
                detail: format!("{} labels for {} rows", labels.len(), x.rows()),
            });
        }
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        // chunked to bound the activation buffers on large evaluation sets
        let mut wrong = 0usize;
        let chunk = 1000;
        let mut start = 0;
        while start < labels.len() {
            let end = (start + chunk).min(labels.len());
            let idx: Vec<usize> = (start..end).collect();
            let pred = self.predict(&x.select_rows(&idx))?;
            wrong += pred.iter().zip(&labels[start..end]).filter(|(p, y)| p != y).count();
            start = end;
        }
        Ok(wrong as f64 / labels.len() as f64)
    }
}
