//! Minimal dense layers used by the encoder. Row-major `f32` throughout.

use rand::Rng;
use rand_distr::{Distribution, Normal};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f32 = 1e-5;

/// `y = W x + b`. `weight` is stored input-major: entry `(o, i)` of `W`
/// lives at `weight[i * out_dim + o]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl Linear {
    pub fn init<R: Rng>(rng: &mut R, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let weight = (0..in_dim * out_dim)
            .map(|_| normal.sample(rng) as f32)
            .collect();
        let bias = bias.then(|| (0..out_dim).map(|_| normal.sample(rng) as f32).collect());
        Self {
            in_dim,
            out_dim,
            weight,
            bias,
        }
    }

    /// Applies the layer to `n` rows of `input`, writing `n * out_dim` values.
    pub fn forward(&self, input: &[f32], n: usize, out: &mut [f32]) {
        debug_assert_eq!(input.len(), n * self.in_dim);
        debug_assert_eq!(out.len(), n * self.out_dim);
        for (x, y) in input
            .chunks_exact(self.in_dim)
            .zip(out.chunks_exact_mut(self.out_dim))
        {
            self.forward_row(x, y);
        }
    }

    pub fn w(&self, o: usize, i: usize) -> f32 {
        self.weight[i * self.out_dim + o]
    }

    #[inline]
    pub fn forward_row(&self, x: &[f32], y: &mut [f32]) {
        match &self.bias {
            Some(b) => y.copy_from_slice(b),
            None => y.iter_mut().for_each(|v| *v = 0.0),
        }
        for (xi, col) in x.iter().zip(self.weight.chunks_exact(self.out_dim)) {
            for (o, w) in y.iter_mut().zip(col) {
                *o += xi * w;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub dim: usize,
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    #[inline]
    pub fn forward_row(&self, x: &[f32], y: &mut [f32]) {
        let n = self.dim as f32;
        let mean = x.iter().sum::<f32>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for i in 0..self.dim {
            y[i] = (x[i] - mean) * inv * self.gamma[i] + self.beta[i];
        }
    }

    pub fn forward(&self, input: &[f32], out: &mut [f32]) {
        for (x, y) in input
            .chunks_exact(self.dim)
            .zip(out.chunks_exact_mut(self.dim))
        {
            self.forward_row(x, y);
        }
    }
}

/// tanh approximation of GELU.
#[inline]
pub fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}
