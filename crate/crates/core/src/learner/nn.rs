//! Dense layers and the encoder/predictor networks, with hand-written
//! backward passes.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

/// Dot product with four independent accumulators.
#[inline(always)]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (a[..n].chunks_exact(4), b[..n].chunks_exact(4));
    let mut tail = 0.0;
    for (x, y) in a.remainder().iter().zip(b.remainder()) {
        tail += x * y;
    }
    let mut acc = [0.0f64; 4];
    for (x, y) in a.zip(b) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Fully connected layer `y = W x + b`, `W` stored row-major (`out × in`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    /// Uniform initialisation in `±1/sqrt(in_dim)` for weights and biases.
    pub fn init<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("positive bound");
        Dense {
            in_dim,
            out_dim,
            weight: (0..in_dim * out_dim).map(|_| dist.sample(rng)).collect(),
            bias: (0..out_dim).map(|_| dist.sample(rng)).collect(),
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut weight = vec![0.0; dim * dim];
        for i in 0..dim {
            weight[i * dim + i] = 1.0;
        }
        Dense {
            in_dim: dim,
            out_dim: dim,
            weight,
            bias: vec![0.0; dim],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Dense {
            in_dim: self.in_dim,
            out_dim: self.out_dim,
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.bias.len()],
        }
    }

    pub fn forward(&self, x: &[f64], y: &mut [f64]) {
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.weight[o * self.in_dim..(o + 1) * self.in_dim];
            *yo = self.bias[o] + dot(row, x);
        }
    }

    /// Accumulates parameter gradients into `grad` and, if requested, writes
    /// the input gradient into `dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Dense, dx: Option<&mut [f64]>) {
        for (o, &g) in dy.iter().enumerate() {
            axpy(g, x, &mut grad.weight[o * self.in_dim..(o + 1) * self.in_dim]);
            grad.bias[o] += g;
        }
        if let Some(dx) = dx {
            dx.fill(0.0);
            for (o, &g) in dy.iter().enumerate() {
                axpy(g, &self.weight[o * self.in_dim..(o + 1) * self.in_dim], dx);
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn is_finite(&self) -> bool {
        self.weight.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

/// Two-layer perceptron `f(x) = W2 tanh(W1 x + b1) + b2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub hidden: Dense,
    pub output: Dense,
}

/// Intermediate values of one encoder pass, kept for backpropagation.
#[derive(Clone, Debug, Default)]
pub struct EncoderTrace {
    pub input: Vec<f64>,
    pub activation: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl Encoder {
    pub fn init<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, embed_dim: usize, rng: &mut R) -> Self {
        Encoder {
            hidden: Dense::init(input_dim, hidden_dim, rng),
            output: Dense::init(hidden_dim, embed_dim, rng),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.in_dim
    }

    pub fn embed_dim(&self) -> usize {
        self.output.out_dim
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut t = EncoderTrace::default();
        self.forward_traced(x, &mut t);
        t.embedding
    }

    pub fn forward_traced(&self, x: &[f64], trace: &mut EncoderTrace) {
        trace.input.clear();
        trace.input.extend_from_slice(x);
        trace.activation.resize(self.hidden.out_dim, 0.0);
        trace.embedding.resize(self.output.out_dim, 0.0);
        self.hidden.forward(x, &mut trace.activation);
        trace.activation.iter_mut().for_each(|a| *a = a.tanh());
        self.output.forward(&trace.activation, &mut trace.embedding);
    }

    pub fn backward(&self, trace: &EncoderTrace, d_embedding: &[f64], grad: &mut Encoder) {
        let mut d_act = vec![0.0; self.hidden.out_dim];
        self.output
            .backward(&trace.activation, d_embedding, &mut grad.output, Some(&mut d_act));
        for (d, a) in d_act.iter_mut().zip(&trace.activation) {
            *d *= 1.0 - a * a;
        }
        self.hidden.backward(&trace.input, &d_act, &mut grad.hidden, None);
    }

    pub fn zeros_like(&self) -> Self {
        Encoder {
            hidden: self.hidden.zeros_like(),
            output: self.output.zeros_like(),
        }
    }
}

/// Flat mutable views over every parameter tensor, in a fixed order.
pub(crate) fn tensors_mut<'a>(enc: &'a mut Encoder, pred: &'a mut Dense) -> [&'a mut Vec<f64>; 6] {
    [
        &mut enc.hidden.weight,
        &mut enc.hidden.bias,
        &mut enc.output.weight,
        &mut enc.output.bias,
        &mut pred.weight,
        &mut pred.bias,
    ]
}
