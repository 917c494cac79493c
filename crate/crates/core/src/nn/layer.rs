//! Dense layers and stacks of them.
//!
//! A [`DenseLayer`] computes `activation(W x + b)` with `W` stored row-major as
//! `[out × in]`. An [`Mlp`] chains layers and supports a cached forward pass
//! followed by exact reverse-mode backward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Default negative-side slope for LeakyReLU.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu(f64),
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x >= 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative at pre-activation `pre`, given the already computed output `out`.
    #[inline]
    pub fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if pre >= 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Activation::Sigmoid => out * (1.0 - out),
            Activation::Identity => 1.0,
        }
    }

    pub fn validate(self) -> Result<()> {
        match self {
            Activation::LeakyRelu(slope) if !(slope > 0.0 && slope < 1.0) => Err(Error::Config(
                format!("LeakyReLU slope must lie in (0, 1), got {slope}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Logistic function, evaluated without overflow for large |x|.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    in_dim: usize,
    out_dim: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
    activation: Activation,
}

impl DenseLayer {
    /// Zero-initialised layer.
    pub fn zeros(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        Self::from_parts(
            in_dim,
            out_dim,
            vec![0.0; in_dim * out_dim],
            vec![0.0; out_dim],
            activation,
        )
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        weight: Vec<f64>,
        bias: Vec<f64>,
        activation: Activation,
    ) -> Result<Self> {
        activation.validate()?;
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Shape(format!(
                "layer dimensions must be positive, got {out_dim}x{in_dim}"
            )));
        }
        if weight.len() != in_dim * out_dim {
            return Err(Error::Shape(format!(
                "weight has {} entries, expected {out_dim}x{in_dim}",
                weight.len()
            )));
        }
        if bias.len() != out_dim {
            return Err(Error::Shape(format!(
                "bias has {} entries, expected {out_dim}",
                bias.len()
            )));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weight,
            bias,
            activation,
        })
    }

    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn xavier<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::zeros(in_dim, out_dim, activation)?;
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        for w in &mut layer.weight {
            *w = rng.random_range(-limit..=limit);
        }
        Ok(layer)
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    /// Disjoint mutable views of weight and bias.
    pub fn params_mut(&mut self) -> (&mut [f64], &mut [f64]) {
        (&mut self.weight, &mut self.bias)
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
            activation: self.activation,
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.in_dim {
            return Err(Error::Shape(format!(
                "layer expects input of length {}, got {}",
                self.in_dim,
                input.len()
            )));
        }
        Ok(())
    }

    /// `W x + b`.
    pub fn pre_activation(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        Ok(self
            .weight
            .chunks_exact(self.in_dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect())
    }

    /// `activation(W x + b)`.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut z = self.pre_activation(input)?;
        for v in &mut z {
            *v = self.activation.apply(*v);
        }
        Ok(z)
    }

    /// Backward through the layer given its cached input, pre-activation and
    /// output. Parameter gradients are added into `grads`; the gradient with
    /// respect to the input is returned.
    pub fn backward(
        &self,
        input: &[f64],
        pre: &[f64],
        out: &[f64],
        out_grad: &[f64],
        grads: &mut DenseLayer,
    ) -> Result<Vec<f64>> {
        self.check_input(input)?;
        if pre.len() != self.out_dim || out.len() != self.out_dim || out_grad.len() != self.out_dim
        {
            return Err(Error::Shape(format!(
                "layer backward expects length-{} activations and gradient",
                self.out_dim
            )));
        }
        if grads.weight.len() != self.weight.len() || grads.bias.len() != self.bias.len() {
            return Err(Error::Shape("gradient buffer does not match layer".into()));
        }
        let mut input_grad = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let delta = out_grad[o] * self.activation.derivative(pre[o], out[o]);
            if delta == 0.0 {
                continue;
            }
            grads.bias[o] += delta;
            let row = o * self.in_dim;
            let w_row = &self.weight[row..row + self.in_dim];
            let g_row = &mut grads.weight[row..row + self.in_dim];
            for i in 0..self.in_dim {
                g_row[i] += delta * input[i];
                input_grad[i] += delta * w_row[i];
            }
        }
        Ok(input_grad)
    }
}

/// Activations recorded by [`Mlp::forward_cached`] for one input.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer; `inputs[0]` is the network input.
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.outputs.last().map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn input(&self) -> &[f64] {
        &self.inputs[0]
    }
}

/// A stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
}

impl Mlp {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("an MLP needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer output {} does not feed next layer input {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-initialised stack `in_dim -> hidden... -> out_dim`.
    pub fn build<R: Rng + ?Sized>(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        hidden_activation: Activation,
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let mut dims = Vec::with_capacity(hidden.len() + 2);
        dims.push(in_dim);
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n {
                    output_activation
                } else {
                    hidden_activation
                };
                DenseLayer::xavier(dims[i], dims[i + 1], act, rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Layer dimensions and activations, without the parameter values.
    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.in_dim == b.in_dim && a.out_dim == b.out_dim && a.activation == b.activation
            })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(DenseLayer::zeros_like).collect(),
        }
    }

    /// All weights and biases in layer order: `w0, b0, w1, b1, ...`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(&l.weight);
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Adds a flat vector laid out as in [`Mlp::flatten`] into the parameters.
    pub fn add_flat(&mut self, delta: &[f64]) -> Result<()> {
        if delta.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "flat vector has {} entries, network has {}",
                delta.len(),
                self.param_count()
            )));
        }
        let mut offset = 0;
        for l in &mut self.layers {
            for p in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *p += delta[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let mut x = self.layers[0].forward(input)?;
        for l in &self.layers[1..] {
            x = l.forward(&x)?;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &[f64]) -> Result<MlpCache> {
        let n = self.layers.len();
        let mut cache = MlpCache {
            inputs: Vec::with_capacity(n),
            pre: Vec::with_capacity(n),
            outputs: Vec::with_capacity(n),
        };
        let mut x = input.to_vec();
        for l in &self.layers {
            let z = l.pre_activation(&x)?;
            let y: Vec<f64> = z.iter().map(|&v| l.activation.apply(v)).collect();
            cache.inputs.push(x);
            cache.pre.push(z);
            x = y.clone();
            cache.outputs.push(y);
        }
        Ok(cache)
    }

    /// Reverse-mode pass. Parameter gradients accumulate into `grads`, which
    /// must have this network's shape; returns the gradient w.r.t. the input.
    pub fn backward(&self, cache: &MlpCache, out_grad: &[f64], grads: &mut Mlp) -> Result<Vec<f64>> {
        let n = self.layers.len();
        if cache.inputs.len() != n
            || cache
                .inputs
                .iter()
                .zip(&self.layers)
                .any(|(x, l)| x.len() != l.in_dim)
        {
            return Err(Error::Usage(
                "backward called without a forward cache for this network".into(),
            ));
        }
        if !self.same_shape(grads) {
            return Err(Error::Shape("gradient buffer does not match network".into()));
        }
        let mut g = out_grad.to_vec();
        for i in (0..n).rev() {
            g = self.layers[i].backward(
                &cache.inputs[i],
                &cache.pre[i],
                &cache.outputs[i],
                &g,
                &mut grads.layers[i],
            )?;
        }
        Ok(g)
    }

    /// Named parameter buffers, `"{prefix}.{layer}.weight"` / `".bias"`.
    pub fn groups<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &l.weight));
            out.push((format!("{prefix}.{i}.bias"), &l.bias));
        }
    }

    pub fn groups_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("{prefix}.{i}.weight"), &mut l.weight));
            out.push((format!("{prefix}.{i}.bias"), &mut l.bias));
        }
    }
}
