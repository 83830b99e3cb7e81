//! Fixed-depth multilayer perceptrons with a layerwise manual backward pass.
//!
//! Each layer computes `y = act(W x + b)` with `W` stored row-major as
//! `(out_dim, in_dim)`. Reverse mode is written out per layer: there is no
//! general graph, the forward pass records the activations it needs and
//! [`Mlp::backward`] replays them in reverse.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output `y`.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "tanh" => Some(Activation::Tanh),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        check_dim("layer bias", weights.rows(), bias.len())?;
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        Self {
            weights: Matrix::from_vec(out_dim, in_dim, data).expect("shape by construction"),
            bias: vec![0.0; out_dim],
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }

    fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.weights.matvec(x)?;
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi = self.activation.apply(*zi + bi);
        }
        Ok(z)
    }
}

/// Layer sizes and activations, without parameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub layers: Vec<(usize, Activation)>,
}

impl Architecture {
    pub fn new(input_dim: usize, layers: Vec<(usize, Activation)>) -> Self {
        Self { input_dim, layers }
    }

    /// Hidden tanh layers followed by an output layer with the given activation.
    pub fn tanh_mlp(input_dim: usize, hidden: &[usize], output_dim: usize, output: Activation) -> Self {
        let mut layers: Vec<_> = hidden.iter().map(|&h| (h, Activation::Tanh)).collect();
        layers.push((output_dim, output));
        Self { input_dim, layers }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, |l| l.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    input_dim: usize,
    layers: Vec<Layer>,
}

/// Activations recorded by a forward pass; `values[0]` is the input and
/// `values[i + 1]` the output of layer `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    values: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn input(&self) -> &[f64] {
        &self.values[0]
    }

    pub fn output(&self) -> &[f64] {
        self.values.last().expect("trace holds at least the input")
    }
}

impl Mlp {
    pub fn new(input_dim: usize, layers: Vec<Layer>) -> Result<Self> {
        let mut dim = input_dim;
        for (i, layer) in layers.iter().enumerate() {
            if layer.in_dim() != dim {
                return Err(Error::Structure(format!(
                    "layer {i} expects input of {} but previous layer yields {dim}",
                    layer.in_dim()
                )));
            }
            check_dim("layer bias", layer.out_dim(), layer.bias.len())?;
            dim = layer.out_dim();
        }
        Ok(Self { input_dim, layers })
    }

    pub fn init<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Self {
        let mut dim = arch.input_dim;
        let layers = arch
            .layers
            .iter()
            .map(|&(out, act)| {
                let layer = Layer::glorot(dim, out, act, rng);
                dim = out;
                layer
            })
            .collect();
        Self {
            input_dim: arch.input_dim,
            layers,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.input_dim,
            layers: self
                .layers
                .iter()
                .map(|l| (l.out_dim(), l.activation))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(self.input_dim, Layer::out_dim)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.as_slice().len() + l.bias.len())
            .sum()
    }

    /// Parameters flattened layer by layer: weights (row-major) then bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weights.as_slice().len();
            if index < nw {
                return &mut l.weights.as_mut_slice()[index];
            }
            index -= nw;
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        check_dim("mlp input", self.input_dim, input.len())?;
        let mut x = input.to_vec();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<ForwardTrace> {
        check_dim("mlp input", self.input_dim, input.len())?;
        let mut values = Vec::with_capacity(self.layers.len() + 1);
        values.push(input.to_vec());
        for layer in &self.layers {
            let next = layer.forward(values.last().unwrap())?;
            values.push(next);
        }
        Ok(ForwardTrace { values })
    }

    /// Reverse-mode gradients of `⟨output, output_grad⟩` with respect to the
    /// parameters and the input, using the activations stored in `trace`.
    pub fn backward(&self, trace: &ForwardTrace, output_grad: &[f64]) -> Result<(GradientTape, Vec<f64>)> {
        if trace.values.len() != self.layers.len() + 1
            || trace.values[0].len() != self.input_dim
            || trace
                .values
                .iter()
                .skip(1)
                .zip(&self.layers)
                .any(|(v, l)| v.len() != l.out_dim())
        {
            return Err(Error::Usage(
                "backward called with a trace that was not produced by this network".into(),
            ));
        }
        check_dim("mlp output grad", self.output_dim(), output_grad.len())?;

        let mut tape = GradientTape::zeros_like(self);
        let mut grad = output_grad.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let y = &trace.values[i + 1];
            let x = &trace.values[i];
            let dz: Vec<f64> = grad
                .iter()
                .zip(y)
                .map(|(g, &yi)| g * layer.activation.derivative_from_output(yi))
                .collect();
            let slot = &mut tape.layers[i];
            slot.weights.add_outer(1.0, &dz, x)?;
            for (b, d) in slot.bias.iter_mut().zip(&dz) {
                *b += d;
            }
            grad = layer.weights.matvec_t(&dz)?;
        }
        Ok((tape, grad))
    }

    /// Forward then backward on `input`.
    pub fn backward_from(&self, input: &[f64], output_grad: &[f64]) -> Result<(GradientTape, Vec<f64>)> {
        let trace = self.forward_trace(input)?;
        self.backward(&trace, output_grad)
    }

    /// Plain gradient descent: `θ ← θ − lr·grad`.
    pub fn sgd_step(&mut self, tape: &GradientTape, learning_rate: f64) -> Result<()> {
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        tape.check_aligned(self)?;
        if !tape.is_finite() {
            return Err(Error::Training("non-finite gradient in sgd step".into()));
        }
        for (layer, g) in self.layers.iter_mut().zip(&tape.layers) {
            for (w, gw) in layer.weights.as_mut_slice().iter_mut().zip(g.weights.as_slice()) {
                *w -= learning_rate * gw;
            }
            for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= learning_rate * gb;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// Gradient accumulators aligned with an [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape {
    layers: Vec<LayerGrad>,
}

impl GradientTape {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weights: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn layers(&self) -> &[LayerGrad] {
        &self.layers
    }

    pub fn zero(&mut self) {
        for l in &mut self.layers {
            l.weights.as_mut_slice().fill(0.0);
            l.bias.fill(0.0);
        }
    }

    /// Same flattening order as [`Mlp::params`].
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// `self += scale · other`
    pub fn add_scaled(&mut self, other: &GradientTape, scale: f64) -> Result<()> {
        check_dim("tape layers", self.layers.len(), other.layers.len())?;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            check_dim("tape layer", a.weights.as_slice().len(), b.weights.as_slice().len())?;
            for (x, y) in a.weights.as_mut_slice().iter_mut().zip(b.weights.as_slice()) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.flat().iter().map(|g| g * g).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn check_aligned(&self, net: &Mlp) -> Result<()> {
        check_dim("tape layers", net.layers.len(), self.layers.len())?;
        for (l, g) in net.layers.iter().zip(&self.layers) {
            if l.weights.rows() != g.weights.rows() || l.weights.cols() != g.weights.cols() {
                return Err(Error::Structure("gradient tape does not match network".into()));
            }
        }
        Ok(())
    }
}

/// Probe cotangent used by the finite-difference checks.
fn probe(dim: usize) -> Vec<f64> {
    (0..dim).map(|i| 1.0 - 0.37 * i as f64).collect()
}

/// Largest relative disagreement between analytic parameter gradients and
/// central finite differences of `⟨net(input), probe⟩`.
pub fn finite_difference_check(net: &Mlp, input: &[f64], step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let g = probe(net.output_dim());
    let (tape, _) = net.backward_from(input, &g)?;
    let analytic = tape.flat();
    let mut probe_net = net.clone();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let orig = *probe_net.param_mut(i);
        *probe_net.param_mut(i) = orig + step;
        let plus = super::matrix::dot(&probe_net.forward(input)?, &g);
        *probe_net.param_mut(i) = orig - step;
        let minus = super::matrix::dot(&probe_net.forward(input)?, &g);
        *probe_net.param_mut(i) = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1e-8));
    }
    Ok(worst)
}

/// Same check for the input gradient.
pub fn input_gradient_check(net: &Mlp, input: &[f64], step: f64) -> Result<f64> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {step}")));
    }
    let g = probe(net.output_dim());
    let (_, analytic) = net.backward_from(input, &g)?;
    let mut x = input.to_vec();
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let orig = x[i];
        x[i] = orig + step;
        let plus = super::matrix::dot(&net.forward(&x)?, &g);
        x[i] = orig - step;
        let minus = super::matrix::dot(&net.forward(&x)?, &g);
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        worst = worst.max((a - numeric).abs() / numeric.abs().max(1e-8));
    }
    Ok(worst)
}
