//! Dense feed-forward networks with exact backpropagation and Adam.
//!
//! Everything is 64-bit: the models are desk scale and the gradient checks
//! demand the precision. Layers are fully connected with relu or identity
//! activations; encoder heads use identity outputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::matrix::Matrix;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("input has length {got}, expected {expected}")]
    InputShape { expected: usize, got: usize },
    #[error("network has no layers")]
    EmptyNetwork,
    #[error("layer {index}: fan_in {got} does not chain with previous fan_out {expected}")]
    LayerChain { index: usize, expected: usize, got: usize },
    #[error("layer {index}: bias length {got} does not match fan_out {expected}")]
    BiasShape { index: usize, expected: usize, got: usize },
    #[error("forward cache does not match this network ({0})")]
    CacheMismatch(alloc::string::String),
    #[error("gradient shapes do not mirror the network parameters")]
    GradientShape,
    #[error("optimizer state shapes do not mirror the network parameters")]
    StateShape,
    #[error("non-finite gradient; optimizer step refused")]
    NonFiniteGradient,
    #[error("non-finite parameter after optimizer step")]
    NonFiniteParameter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Identity => z,
        }
    }

    /// Derivative at pre-activation `z` (relu subgradient at 0 is 0).
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One dense layer: `h = act(W x + b)` with `W` of shape `[fan_out, fan_in]`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn fan_in(&self) -> usize {
        self.weight.cols()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.rows()
    }
}

/// A multilayer perceptron; adjacent layer dimensions chain.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct DenseNet {
    layers: Vec<Layer>,
}

impl DenseNet {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::EmptyNetwork);
        }
        for (index, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.fan_out() {
                return Err(NnError::BiasShape {
                    index,
                    expected: layer.fan_out(),
                    got: layer.bias.len(),
                });
            }
            if index > 0 {
                let expected = layers[index - 1].fan_out();
                if layer.fan_in() != expected {
                    return Err(NnError::LayerChain { index, expected, got: layer.fan_in() });
                }
            }
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform initialized network over the dimension chain `dims`
    /// (input, hidden..., output). Hidden layers are relu, the output layer
    /// uses `output_activation`. Biases start at zero.
    pub fn glorot_uniform<R: Rng + ?Sized>(
        dims: &[usize],
        output_activation: Activation,
        rng: &mut R,
    ) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::EmptyNetwork);
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for k in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[k], dims[k + 1]);
            let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
            let mut weight = Matrix::zeros(fan_out, fan_in);
            for v in weight.data_mut() {
                *v = rng.random_range(-bound..bound);
            }
            let activation = if k + 1 == dims.len() - 1 {
                output_activation
            } else {
                Activation::Relu
            };
            layers.push(Layer { weight, bias: vec![0.0; fan_out], activation });
        }
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.data().len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    /// Runs the network, returning the output and a cache sufficient for an
    /// exact backward pass.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, ForwardCache), NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::InputShape { expected: self.input_dim(), got: x.len() });
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut post = Vec::with_capacity(self.layers.len());
        let mut current: Vec<f64> = x.to_vec();
        for layer in &self.layers {
            let mut z = layer.weight.matvec(&current);
            for (zi, b) in z.iter_mut().zip(&layer.bias) {
                *zi += b;
            }
            current = z.iter().map(|&v| layer.activation.apply(v)).collect();
            pre.push(z);
            post.push(current.clone());
        }
        let cache = ForwardCache { input: x.to_vec(), pre, post };
        Ok((current, cache))
    }

    /// Exact gradients for the computation captured by `cache`.
    ///
    /// Returns the parameter gradients and the gradient with respect to the
    /// network input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_output: &[f64],
    ) -> Result<(NetGradients, Vec<f64>), NnError> {
        self.check_cache(cache)?;
        if grad_output.len() != self.output_dim() {
            return Err(NnError::CacheMismatch(format!(
                "grad_output length {} does not match output dim {}",
                grad_output.len(),
                self.output_dim()
            )));
        }
        let mut grads = NetGradients::zeros_like(self);
        let mut upstream: Vec<f64> = grad_output.to_vec();
        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let pre = &cache.pre[k];
            let layer_input: &[f64] =
                if k == 0 { &cache.input } else { &cache.post[k - 1] };
            // dz = dh * act'(z)
            let dz: Vec<f64> = upstream
                .iter()
                .zip(pre)
                .map(|(g, &z)| g * layer.activation.derivative(z))
                .collect();
            let lg = &mut grads.layers[k];
            for (i, &dzi) in dz.iter().enumerate() {
                lg.bias[i] += dzi;
                let row = lg.weight.row_mut(i);
                for (j, &xj) in layer_input.iter().enumerate() {
                    row[j] += dzi * xj;
                }
            }
            // d input = W^T dz
            let mut below = vec![0.0; layer.fan_in()];
            for (i, &dzi) in dz.iter().enumerate() {
                let row = layer.weight.row(i);
                for (j, wij) in row.iter().enumerate() {
                    below[j] += wij * dzi;
                }
            }
            upstream = below;
        }
        Ok((grads, upstream))
    }

    fn check_cache(&self, cache: &ForwardCache) -> Result<(), NnError> {
        if cache.pre.len() != self.layers.len() || cache.post.len() != self.layers.len() {
            return Err(NnError::CacheMismatch(format!(
                "cache has {} layers, network has {}",
                cache.pre.len(),
                self.layers.len()
            )));
        }
        if cache.input.len() != self.input_dim() {
            return Err(NnError::CacheMismatch(format!(
                "cached input has length {}, network expects {}",
                cache.input.len(),
                self.input_dim()
            )));
        }
        for (k, layer) in self.layers.iter().enumerate() {
            if cache.pre[k].len() != layer.fan_out() || cache.post[k].len() != layer.fan_out() {
                return Err(NnError::CacheMismatch(format!(
                    "cache layer {k} has width {}, network layer has fan_out {}",
                    cache.pre[k].len(),
                    layer.fan_out()
                )));
            }
        }
        Ok(())
    }
}

/// Per-layer pre/post activations captured by [`DenseNet::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    input: Vec<f64>,
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.post.last().expect("cache always has at least one layer")
    }
}

/// Parameter gradients mirroring a [`DenseNet`]'s shape.
#[derive(Debug, Clone)]
pub struct NetGradients {
    pub layers: Vec<LayerGradients>,
}

#[derive(Debug, Clone)]
pub struct LayerGradients {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl NetGradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerGradients { weight: l.weight.zeros_like(), bias: vec![0.0; l.bias.len()] })
            .collect();
        Self { layers }
    }

    pub fn accumulate(&mut self, other: &NetGradients) {
        debug_assert_eq!(self.layers.len(), other.layers.len());
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.data_mut().iter_mut().zip(b.weight.data()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for layer in &mut self.layers {
            for v in layer.weight.data_mut() {
                *v *= factor;
            }
            for v in &mut layer.bias {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn mirrors(&self, net: &DenseNet) -> bool {
        self.layers.len() == net.layers.len()
            && self.layers.iter().zip(&net.layers).all(|(g, l)| {
                g.weight.rows() == l.weight.rows()
                    && g.weight.cols() == l.weight.cols()
                    && g.bias.len() == l.bias.len()
            })
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
pub struct AdamParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamParams {
    pub fn with_learning_rate(learning_rate: f64) -> Self {
        Self { learning_rate, ..Self::default() }
    }
}

impl Default for AdamParams {
    fn default() -> Self {
        Self { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Per-parameter first/second moment accumulators plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub params: AdamParams,
    first_moment: NetGradients,
    second_moment: NetGradients,
    step: u64,
}

impl AdamState {
    pub fn new(net: &DenseNet, params: AdamParams) -> Self {
        Self {
            params,
            first_moment: NetGradients::zeros_like(net),
            second_moment: NetGradients::zeros_like(net),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update. Refuses the step (leaving net and state
/// untouched) when any gradient is non-finite.
pub fn adam_step(
    net: &mut DenseNet,
    grads: &NetGradients,
    state: &mut AdamState,
) -> Result<(), NnError> {
    if !grads.mirrors(net) {
        return Err(NnError::GradientShape);
    }
    if !state.first_moment.mirrors(net) || !state.second_moment.mirrors(net) {
        return Err(NnError::StateShape);
    }
    if !grads.is_finite() {
        return Err(NnError::NonFiniteGradient);
    }
    state.step += 1;
    let p = state.params;
    let bias1 = 1.0 - libm::pow(p.beta1, state.step as f64);
    let bias2 = 1.0 - libm::pow(p.beta2, state.step as f64);
    for (k, layer) in net.layers.iter_mut().enumerate() {
        let g = &grads.layers[k];
        let m = &mut state.first_moment.layers[k];
        let v = &mut state.second_moment.layers[k];
        update_slice(
            layer.weight.data_mut(),
            g.weight.data(),
            m.weight.data_mut(),
            v.weight.data_mut(),
            p,
            bias1,
            bias2,
        );
        update_slice(&mut layer.bias, &g.bias, &mut m.bias, &mut v.bias, p, bias1, bias2);
    }
    if !net.is_finite() {
        return Err(NnError::NonFiniteParameter);
    }
    Ok(())
}

fn update_slice(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    p: AdamParams,
    bias1: f64,
    bias2: f64,
) {
    for i in 0..params.len() {
        m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * grads[i];
        v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * grads[i] * grads[i];
        let m_hat = m[i] / bias1;
        let v_hat = v[i] / bias2;
        params[i] -= p.learning_rate * m_hat / (libm::sqrt(v_hat) + p.epsilon);
    }
}
