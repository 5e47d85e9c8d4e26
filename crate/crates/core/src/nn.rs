//! Dense layers and small MLPs over flat parameter buffers, with
//! hand-written reverse-mode passes.
//!
//! Layers never own their weights: a [`Dense`] is an offset into a shared
//! `&[f64]`, so one buffer can hold several networks and gradients share
//! the same layout as the parameters they belong to.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::normal_vec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// Affine map `y = W x + b`; `W` is stored row-major (`output x input`)
/// followed by `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dense {
    pub input: usize,
    pub output: usize,
    pub offset: usize,
}

impl Dense {
    pub fn len(&self) -> usize {
        self.output * (self.input + 1)
    }

    pub fn weight_range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.output * self.input
    }

    pub fn bias_range(&self) -> std::ops::Range<usize> {
        let s = self.offset + self.output * self.input;
        s..s + self.output
    }

    pub fn end(&self) -> usize {
        self.offset + self.len()
    }

    pub fn forward(&self, params: &[f64], x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input);
        let w = &params[self.weight_range()];
        let b = &params[self.bias_range()];
        for (o, yo) in y.iter_mut().enumerate().take(self.output) {
            let row = &w[o * self.input..(o + 1) * self.input];
            *yo = b[o] + row.iter().zip(x).map(|(a, c)| a * c).sum::<f64>();
        }
    }

    /// Accumulates `gy`'s pullback into `grad_params` (scaled by `scale`)
    /// and into `grad_x`.
    pub fn backward(
        &self,
        params: &[f64],
        x: &[f64],
        gy: &[f64],
        grad_params: Option<(&mut [f64], f64)>,
        grad_x: Option<&mut [f64]>,
    ) {
        if let Some((gp, scale)) = grad_params {
            let (wr, br) = (self.weight_range(), self.bias_range());
            for o in 0..self.output {
                let g = gy[o] * scale;
                if g == 0.0 {
                    continue;
                }
                let row = &mut gp[wr.start + o * self.input..wr.start + (o + 1) * self.input];
                for (r, xi) in row.iter_mut().zip(x) {
                    *r += g * xi;
                }
                gp[br.start + o] += g;
            }
        }
        if let Some(gx) = grad_x {
            let w = &params[self.weight_range()];
            for o in 0..self.output {
                let g = gy[o];
                if g == 0.0 {
                    continue;
                }
                let row = &w[o * self.input..(o + 1) * self.input];
                for (gxi, wi) in gx.iter_mut().zip(row) {
                    *gxi += g * wi;
                }
            }
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R, gain: f64) {
        let std = gain / (self.input as f64).sqrt();
        let w = normal_vec(rng, self.output * self.input);
        for (p, v) in params[self.weight_range()].iter_mut().zip(w) {
            *p = v * std;
        }
        params[self.bias_range()].iter_mut().for_each(|b| *b = 0.0);
    }
}

/// A chain of dense layers with an activation between consecutive layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpLayout {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

/// Per-layer inputs and pre-activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpLayout {
    /// Lays out layers of the given widths contiguously from `offset`.
    pub fn new(widths: &[usize], activation: Activation, offset: usize) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut at = offset;
        for w in widths.windows(2) {
            let d = Dense {
                input: w[0],
                output: w[1],
                offset: at,
            };
            at = d.end();
            layers.push(d);
        }
        Self { layers, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().output
    }

    pub fn offset(&self) -> usize {
        self.layers[0].offset
    }

    pub fn end(&self) -> usize {
        self.layers.last().unwrap().end()
    }

    pub fn forward(&self, params: &[f64], x: &[f64]) -> (Vec<f64>, MlpCache) {
        let n = self.layers.len();
        let mut inputs = Vec::with_capacity(n);
        let mut pre = Vec::with_capacity(n);
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = vec![0.0; layer.output];
            layer.forward(params, &h, &mut y);
            inputs.push(h);
            if i + 1 < n {
                h = y.iter().map(|v| self.activation.apply(*v)).collect();
                pre.push(y);
            } else {
                h = y;
            }
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn apply(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let mut h = x.to_vec();
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = vec![0.0; layer.output];
            layer.forward(params, &h, &mut y);
            if i + 1 < n {
                y.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            h = y;
        }
        h
    }

    /// Pulls `g_out` back to the input; parameter gradients are accumulated
    /// (times `scale`) when a buffer is supplied.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &MlpCache,
        g_out: &[f64],
        mut grad_params: Option<(&mut [f64], f64)>,
    ) -> Vec<f64> {
        let mut g = g_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let mut gx = vec![0.0; layer.input];
            let gp = grad_params.as_mut().map(|(buf, s)| (&mut **buf, *s));
            layer.backward(params, &cache.inputs[i], &g, gp, Some(&mut gx));
            if i > 0 {
                for (gxi, p) in gx.iter_mut().zip(&cache.pre[i - 1]) {
                    *gxi *= self.activation.derivative(*p);
                }
            }
            g = gx;
        }
        g
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut [f64], rng: &mut R) {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            let gain = if i + 1 < n { 1.0 } else { 0.5 };
            layer.init(params, rng, gain);
        }
    }
}

/// An MLP that owns its parameters. Used for frozen feature maps and
/// attribute classifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layout: MlpLayout,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn random<R: Rng + ?Sized>(widths: &[usize], activation: Activation, rng: &mut R) -> Self {
        let layout = MlpLayout::new(widths, activation, 0);
        let mut params = vec![0.0; layout.end()];
        layout.init(&mut params, rng);
        Self { layout, params }
    }

    /// Random network whose biases are also drawn at random, so the map
    /// is not odd-symmetric. Feature extractors use this.
    pub fn random_with_bias<R: Rng + ?Sized>(
        widths: &[usize],
        activation: Activation,
        bias_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut m = Self::random(widths, activation, rng);
        for layer in m.layout.layers.clone() {
            let b = normal_vec(rng, layer.output);
            for (p, v) in m.params[layer.bias_range()].iter_mut().zip(b) {
                *p = v * bias_std;
            }
        }
        m
    }

    pub fn forward(&self, x: &[f64]) -> (Vec<f64>, MlpCache) {
        self.layout.forward(&self.params, x)
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.layout.apply(&self.params, x)
    }

    pub fn input_grad(&self, cache: &MlpCache, g_out: &[f64]) -> Vec<f64> {
        self.layout.backward(&self.params, cache, g_out, None)
    }

    pub fn input_dim(&self) -> usize {
        self.layout.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layout.output_dim()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
