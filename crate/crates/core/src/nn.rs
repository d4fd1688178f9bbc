//! Small fully-connected building blocks and the Adam optimizer used by all
//! three learned modules.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Dense layer `y = x W + b` with `x` as rows of samples.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Xavier-style init scaled for tanh nets.
    pub fn init(inp: usize, out: usize, rng: &mut impl Rng) -> Self {
        let scale = math_scale(inp, out);
        let w = Tensor::randn(&[inp, out], rng).scale(scale);
        let b = Tensor::zeros(&[out]);
        Self { w, b }
    }

    pub fn lift(&self, tape: &mut Tape) -> LinearVars {
        LinearVars { w: tape.leaf(self.w.clone()), b: tape.leaf(self.b.clone()) }
    }
}

fn math_scale(inp: usize, out: usize) -> f64 {
    crate::math::sqrt(2.0 / (inp + out) as f64)
}

/// Tape handles for one layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let xw = tape.matmul(x, self.w);
        tape.add_row(xw, self.b)
    }
}

/// Activation applied between MLP layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Plain multi-layer perceptron; activation after every layer but the last.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn init(dims: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        let layers = dims.windows(2).map(|w| Linear::init(w[0], w[1], rng)).collect();
        Self { layers, activation }
    }

    pub fn lift(&self, tape: &mut Tape) -> MlpVars {
        MlpVars {
            layers: self.layers.iter().map(|l| l.lift(tape)).collect(),
            activation: self.activation,
        }
    }

    pub fn named_params(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("{prefix}.{i}.w"), l.w.clone()));
            out.push((format!("{prefix}.{i}.b"), l.b.clone()));
        }
    }

    pub fn param_refs(&mut self) -> Vec<&mut Tensor> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.push(&mut l.w);
            v.push(&mut l.b);
        }
        v
    }

    /// Forward pass without a tape, for inference paths.
    pub fn forward_plain(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let mut y = h.matmul(&l.w);
            for r in 0..y.rows() {
                for c in 0..y.cols() {
                    let v = y.at(r, c) + l.b.data()[c];
                    y.set(r, c, v);
                }
            }
            h = if i < last {
                match self.activation {
                    Activation::Tanh => y.map(crate::math::tanh),
                    Activation::Relu => y.map(|v| crate::math::max(v, 0.0)),
                }
            } else {
                y
            };
        }
        h
    }
}

/// Tape handles for a whole MLP.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<LinearVars>,
    activation: Activation,
}

impl MlpVars {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(tape, h);
            if i < last {
                h = match self.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::Relu => tape.relu(h),
                };
            }
        }
        h
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| [l.w, l.b]).collect()
    }
}

/// Optimizer selection for the trainers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptKind {
    Adam,
    Sgd,
}

/// Dispatching wrapper so trainers can run either plain gradient descent or
/// Adam with one code path.
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(kind: OptKind, lr: f64) -> Self {
        match kind {
            OptKind::Adam => Optimizer::Adam(Adam::new(lr)),
            OptKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        match self {
            Optimizer::Adam(a) => a.step(params, grads),
            Optimizer::Sgd { lr } => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for k in 0..g.len() {
                        p.data_mut()[k] -= *lr * g.data()[k];
                    }
                }
            }
        }
    }
}

/// Adam with bias correction; state kept per parameter tensor in
/// registration order, so updates are deterministic.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Vec::new(), v: Vec::new() }
    }

    /// Apply one update; `params` and `grads` must line up index-by-index
    /// across calls.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - crate::math::powi(self.beta1, self.t as usize);
        let bc2 = 1.0 - crate::math::powi(self.beta2, self.t as usize);
        for (i, p) in params.iter_mut().enumerate() {
            let g = &grads[i];
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for k in 0..g.len() {
                let gk = g.data()[k];
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let mhat = mk / bc1;
                let vhat = vk / bc2;
                p.data_mut()[k] -= self.lr * mhat / (crate::math::sqrt(vhat) + self.eps);
            }
        }
    }
}
