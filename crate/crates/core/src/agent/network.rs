//! Fully connected Q-network with hand-written backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{AgentError, Result};

/// Affine layer; `weights` is `outputs x inputs`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { inputs, outputs, weights: vec![0.0; inputs * outputs], biases: vec![0.0; outputs] }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for (row, b) in self.weights.chunks_exact(self.inputs).zip(&self.biases) {
            out.push(dot(row, x) + b);
        }
    }
}

/// Dot product with four interleaved partial sums.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Rectifier on every hidden layer, identity on the output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QNetwork {
    layers: Vec<Dense>,
}

/// Per-layer outputs from a forward pass; `values[0]` is the input.
#[derive(Debug, Clone, Default)]
pub struct Activations {
    values: Vec<Vec<f64>>,
}

impl Activations {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Parameter gradients with the same shape as a network.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(net: &QNetwork) -> Self {
        Self { layers: net.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect() }
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
    }

    /// Same ordering as [`QNetwork::params`].
    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }
}

fn flatten(layers: &[Dense]) -> Vec<f64> {
    let mut v = Vec::new();
    for l in layers {
        v.extend_from_slice(&l.weights);
        v.extend_from_slice(&l.biases);
    }
    v
}

impl QNetwork {
    /// He-uniform weights for the rectifier layers, Glorot-uniform for the
    /// output layer, zero biases.
    pub fn new(sizes: &[usize], seed: u64) -> Result<Self> {
        check_sizes(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (fan_in, fan_out) = (sizes[i], sizes[i + 1]);
                let bound = if i + 1 < n { (6.0 / fan_in as f64).sqrt() } else { (6.0 / (fan_in + fan_out) as f64).sqrt() };
                let mut l = Dense::zeros(fan_in, fan_out);
                for w in &mut l.weights {
                    *w = rng.random_range(-bound..bound);
                }
                l
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(Self { layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect() })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(AgentError::Shape("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 || l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(AgentError::Shape(format!("layer {i} has inconsistent dimensions")));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(AgentError::Shape(format!(
                    "layer {i} expects {} inputs but layer {} produces {}",
                    l.inputs,
                    i - 1,
                    layers[i - 1].outputs
                )));
            }
            if l.weights.iter().chain(&l.biases).any(|v| !v.is_finite()) {
                return Err(AgentError::NonFinite(format!("parameters of layer {i}")));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs];
        s.extend(self.layers.iter().map(|l| l.outputs));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut acts = Activations::default();
        self.forward_cached(x, &mut acts)?;
        Ok(acts.values.pop().unwrap_or_default())
    }

    /// Forward pass that keeps every layer output for [`Self::backward`].
    pub fn forward_cached(&self, x: &[f64], acts: &mut Activations) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(AgentError::Dimension { expected: self.input_dim(), found: x.len() });
        }
        let n = self.layers.len();
        acts.values.resize_with(n + 1, Vec::new);
        acts.values[0].clear();
        acts.values[0].extend_from_slice(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = acts.values.split_at_mut(i + 1);
            let out = &mut rest[0];
            layer.affine(&done[i], out);
            if i + 1 < n {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        Ok(())
    }

    /// Adds `d(loss)/d(params)` to `grads`, given `d(loss)/d(output)` for
    /// the pass recorded in `acts`.
    pub fn backward(&self, acts: &Activations, out_grad: &[f64], grads: &mut Gradients) {
        let mut delta = out_grad.to_vec();
        let mut next = Vec::new();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &acts.values[i];
            let g = &mut grads.layers[i];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                g.biases[o] += d;
                for (gw, x) in g.weights[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(input) {
                    *gw += d * x;
                }
            }
            if i == 0 {
                break;
            }
            next.clear();
            next.resize(layer.inputs, 0.0);
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                for (n, w) in next.iter_mut().zip(&layer.weights[o * layer.inputs..(o + 1) * layer.inputs]) {
                    *n += d * w;
                }
            }
            // rectifier derivative; inputs to this layer are post-activation
            for (n, a) in next.iter_mut().zip(input) {
                if *a <= 0.0 {
                    *n = 0.0;
                }
            }
            std::mem::swap(&mut delta, &mut next);
        }
    }

    /// `params -= lr * grads`.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
                *w -= lr * gw;
            }
            for (b, gb) in l.biases.iter_mut().zip(&g.biases) {
                *b -= lr * gb;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.biases.len()).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(AgentError::Dimension { expected: self.param_count(), found: flat.len() });
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.biases.iter_mut()) {
                *w = it.next().unwrap_or_default();
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weights.iter().chain(&l.biases).all(|v| v.is_finite()))
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(AgentError::Shape(format!("invalid layer sizes {sizes:?}")));
    }
    Ok(())
}

/// One regression sample: push `Q(state)[action]` toward `target`.
#[derive(Debug, Clone, Copy)]
pub struct RegressionSample<'a> {
    pub state: &'a [f64],
    pub action: usize,
    pub target: f64,
}

/// Mean squared error over the batch and its parameter gradient.
pub fn mse_loss_and_grad(net: &QNetwork, batch: &[RegressionSample<'_>], grads: &mut Gradients) -> Result<f64> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    grads.clear();
    let n = batch.len() as f64;
    let mut acts = Activations::default();
    let mut out_grad = vec![0.0; net.output_dim()];
    let mut loss = 0.0;
    for s in batch {
        if s.action >= net.output_dim() {
            return Err(AgentError::Dimension { expected: net.output_dim(), found: s.action + 1 });
        }
        net.forward_cached(s.state, &mut acts)?;
        let err = s.target - acts.output()[s.action];
        loss += err * err;
        out_grad.fill(0.0);
        out_grad[s.action] = -2.0 * err / n;
        net.backward(&acts, &out_grad, grads);
    }
    Ok(loss / n)
}
