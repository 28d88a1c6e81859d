//! Multilayer perceptron with ELU hidden layers, inverted dropout, a
//! hand-written reverse pass and Adam.
//!
//! Parameters live in one flat vector. Layer `l` stores its weight matrix
//! (`fan_out x fan_in`, row-major) followed by its bias. Gradients and Adam
//! moments share that layout, so an update is a single zip over slices.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::numerics::dot;

pub const DEFAULT_HIDDEN: usize = 200;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Elu,
}

pub fn elu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| elu_scalar(x)).collect()
}

#[inline]
fn elu_scalar(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp_m1()
    }
}

#[inline]
fn elu_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        pre.exp()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    w_off: usize,
    b_off: usize,
}

fn layout(dims: &[usize]) -> (Vec<Layer>, usize) {
    let mut off = 0;
    let layers = dims
        .windows(2)
        .map(|w| {
            let l = Layer {
                fan_in: w[0],
                fan_out: w[1],
                w_off: off,
                b_off: off + w[0] * w[1],
            };
            off += w[0] * w[1] + w[1];
            l
        })
        .collect();
    (layers, off)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
    params: Vec<f64>,
    dropout_rate: f64,
    activation: Activation,
}

/// Values recorded by [`Mlp::forward`] for the reverse pass.
#[derive(Clone, Debug)]
pub struct ForwardTape {
    pub mode: Mode,
    /// Input to each linear layer (after activation and dropout of the previous one).
    pub inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pub pre_activations: Vec<Vec<f64>>,
    /// Per hidden layer, the multiplier applied to each unit: 0 or `1/(1-p)`.
    /// Empty in eval mode.
    pub masks: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    dropout_rate: f64,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new<R: Rng + ?Sized>(layer_dims: &[usize], dropout_rate: f64, rng: &mut R) -> Result<Self> {
        let mut model = Self::zeros(layer_dims, dropout_rate)?;
        for l in model.layers.clone() {
            let bound = (6.0 / (l.fan_in + l.fan_out) as f64).sqrt();
            for w in &mut model.params[l.w_off..l.b_off] {
                *w = rng.random_range(-bound..=bound);
            }
        }
        Ok(model)
    }

    /// Input width, two hidden layers of `hidden`, output width.
    pub fn with_two_hidden<R: Rng + ?Sized>(
        input: usize,
        hidden: usize,
        output: usize,
        dropout_rate: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::new(&[input, hidden, hidden, output], dropout_rate, rng)
    }

    pub fn zeros(layer_dims: &[usize], dropout_rate: f64) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidConfig(format!(
                "layer_dims must hold at least two positive widths, got {layer_dims:?}"
            )));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        let (layers, len) = layout(layer_dims);
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            layers,
            params: vec![0.0; len],
            dropout_rate,
            activation: Activation::Elu,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Row-major weights of layer `l` (`fan_out x fan_in`).
    pub fn weights(&self, l: usize) -> &[f64] {
        let layer = self.layers[l];
        &self.params[layer.w_off..layer.b_off]
    }

    pub fn weights_mut(&mut self, l: usize) -> &mut [f64] {
        let layer = self.layers[l];
        &mut self.params[layer.w_off..layer.b_off]
    }

    pub fn bias(&self, l: usize) -> &[f64] {
        let layer = self.layers[l];
        &self.params[layer.b_off..layer.b_off + layer.fan_out]
    }

    pub fn bias_mut(&mut self, l: usize) -> &mut [f64] {
        let layer = self.layers[l];
        &mut self.params[layer.b_off..layer.b_off + layer.fan_out]
    }

    /// Offsets of `(weights, bias)` of layer `l` inside the flat parameter vector.
    pub fn param_offsets(&self, l: usize) -> (usize, usize) {
        (self.layers[l].w_off, self.layers[l].b_off)
    }

    fn affine(&self, l: usize, input: &[f64]) -> Vec<f64> {
        let layer = self.layers[l];
        let w = &self.params[layer.w_off..layer.b_off];
        let b = &self.params[layer.b_off..layer.b_off + layer.fan_out];
        (0..layer.fan_out)
            .map(|o| dot(&w[o * layer.fan_in..(o + 1) * layer.fan_in], input) + b[o])
            .collect()
    }

    /// Forward pass. Train mode draws fresh dropout masks from `rng`; eval
    /// mode ignores `rng` entirely.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        d: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, ForwardTape)> {
        check_dim("Mlp::forward input", self.input_dim(), d.len())?;
        let n_layers = self.layers.len();
        let mut tape = ForwardTape {
            mode,
            inputs: Vec::with_capacity(n_layers),
            pre_activations: Vec::with_capacity(n_layers - 1),
            masks: Vec::new(),
        };
        let keep = 1.0 - self.dropout_rate;
        let mut h = d.to_vec();
        for l in 0..n_layers {
            let pre = self.affine(l, &h);
            tape.inputs.push(h);
            if l + 1 == n_layers {
                return Ok((pre, tape));
            }
            let mut act = elu(&pre);
            if mode == Mode::Train && self.dropout_rate > 0.0 {
                let mask: Vec<f64> = (0..act.len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                act.iter_mut().zip(&mask).for_each(|(a, m)| *a *= m);
                tape.masks.push(mask);
            } else if mode == Mode::Train {
                tape.masks.push(vec![1.0; act.len()]);
            }
            tape.pre_activations.push(pre);
            h = act;
        }
        unreachable!("network has at least one layer")
    }

    /// Deterministic eval-mode prediction.
    pub fn predict(&self, d: &[f64]) -> Result<Vec<f64>> {
        let mut h = d.to_vec();
        check_dim("Mlp::predict input", self.input_dim(), d.len())?;
        let n_layers = self.layers.len();
        for l in 0..n_layers {
            let pre = self.affine(l, &h);
            h = if l + 1 == n_layers { pre } else { elu(&pre) };
        }
        Ok(h)
    }

    /// Reverse pass: gradient of a scalar loss with respect to every
    /// parameter, given the loss gradient at the output. Uses the dropout
    /// masks stored in `tape`.
    pub fn backward(&self, tape: &ForwardTape, dl_dout: &[f64]) -> Result<Vec<f64>> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(tape, dl_dout, &mut grad)?;
        Ok(grad)
    }

    /// As [`Mlp::backward`], accumulating into `grad`.
    pub fn backward_into(&self, tape: &ForwardTape, dl_dout: &[f64], grad: &mut [f64]) -> Result<()> {
        check_dim("Mlp::backward upstream", self.output_dim(), dl_dout.len())?;
        check_dim("Mlp::backward grad", self.params.len(), grad.len())?;
        check_dim("Mlp::backward tape", self.layers.len(), tape.inputs.len())?;
        let mut delta = dl_dout.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = self.layers[l];
            let input = &tape.inputs[l];
            for (o, &dv) in delta.iter().enumerate() {
                if dv == 0.0 {
                    continue;
                }
                let row = &mut grad[layer.w_off + o * layer.fan_in..layer.w_off + (o + 1) * layer.fan_in];
                row.iter_mut().zip(input).for_each(|(g, x)| *g += dv * x);
                grad[layer.b_off + o] += dv;
            }
            if l == 0 {
                break;
            }
            // Through W^T, then dropout mask and ELU of layer l-1.
            let w = &self.params[layer.w_off..layer.b_off];
            let mut upstream = vec![0.0; layer.fan_in];
            for (o, &dv) in delta.iter().enumerate() {
                if dv != 0.0 {
                    let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    upstream.iter_mut().zip(row).for_each(|(u, wv)| *u += dv * wv);
                }
            }
            let pre = &tape.pre_activations[l - 1];
            for (i, u) in upstream.iter_mut().enumerate() {
                *u *= elu_grad(pre[i]);
                if let Some(mask) = tape.masks.get(l - 1) {
                    *u *= mask[i];
                }
            }
            delta = upstream;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let ck = Checkpoint {
            layer_dims: self.layer_dims.clone(),
            weights: (0..self.layers.len()).map(|l| self.weights(l).to_vec()).collect(),
            biases: (0..self.layers.len()).map(|l| self.bias(l).to_vec()).collect(),
            dropout_rate: self.dropout_rate,
        };
        Ok(serde_json::to_string(&ck)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        let mut model = Self::zeros(&ck.layer_dims, ck.dropout_rate)?;
        check_dim("checkpoint weights", model.layers.len(), ck.weights.len())?;
        check_dim("checkpoint biases", model.layers.len(), ck.biases.len())?;
        for (l, (w, b)) in ck.weights.iter().zip(&ck.biases).enumerate() {
            check_dim("checkpoint layer weights", model.weights(l).len(), w.len())?;
            check_dim("checkpoint layer bias", model.bias(l).len(), b.len())?;
            model.weights_mut(l).copy_from_slice(w);
            model.bias_mut(l).copy_from_slice(b);
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            first_moment: vec![0.0; num_params],
            second_moment: vec![0.0; num_params],
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_model(model: &Mlp) -> Self {
        Self::new(model.num_params())
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_update(params: &mut [f64], state: &mut AdamState, grad: &[f64], lr: f64) -> Result<()> {
    check_dim("adam_step grad", params.len(), grad.len())?;
    check_dim("adam_step state", params.len(), state.first_moment.len())?;
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    for (((w, &g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(state.first_moment.iter_mut())
        .zip(state.second_moment.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *w -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

pub fn adam_step(model: &mut Mlp, state: &mut AdamState, grad: &[f64], lr: f64) -> Result<()> {
    adam_update(model.params_mut(), state, grad, lr)
}
