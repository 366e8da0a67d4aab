use rand::Rng;

use crate::nn::ops::{gelu, gelu_grad};
use crate::nn::{Linear, Module, Tensor};
use crate::scalar::Scalar;

/// Two-layer MLP mapping encoder vectors into the decoder embedding space.
/// The hidden width equals the output width.
#[derive(Clone, Debug)]
pub struct Projection<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

pub struct ProjectionCache<T> {
    input: Vec<T>,
    h_pre: Vec<T>,
    h_act: Vec<T>,
}

impl<T: Scalar> Projection<T> {
    pub fn new<R: Rng + ?Sized>(enc_dim: usize, dec_dim: usize, zero_out: bool, rng: &mut R) -> Self {
        let out = if zero_out { Linear::zeros(dec_dim, dec_dim) } else { Linear::new(dec_dim, dec_dim, 0.02, rng) };
        Self { hidden: Linear::new(enc_dim, dec_dim, 0.02, rng), out }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.fan_in()
    }

    pub fn out_dim(&self) -> usize {
        self.out.fan_out()
    }

    pub fn forward(&self, c: &[T], n: usize) -> (Vec<T>, ProjectionCache<T>) {
        let h_pre = self.hidden.forward(c, n);
        let h_act: Vec<T> = h_pre.iter().map(|&v| gelu(v)).collect();
        let y = self.out.forward(&h_act, n);
        (y, ProjectionCache { input: c.to_vec(), h_pre, h_act })
    }

    pub fn backward(&self, cache: &ProjectionCache<T>, dy: &[T], n: usize, grads: Option<&mut Self>) -> Vec<T> {
        let (g_hidden, g_out) = match grads {
            Some(g) => (Some(&mut g.hidden), Some(&mut g.out)),
            None => (None, None),
        };
        let mut dh = self.out.backward(&cache.h_act, dy, n, g_out);
        for (g, &pre) in dh.iter_mut().zip(&cache.h_pre) {
            *g = *g * gelu_grad(pre);
        }
        self.hidden.backward(&cache.input, &dh, n, g_hidden)
    }
}

impl<T: Scalar> Module<T> for Projection<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.hidden.collect(&format!("{prefix}.hidden"), out);
        self.out.collect(&format!("{prefix}.out"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.hidden.collect_mut(&format!("{prefix}.hidden"), out);
        self.out.collect_mut(&format!("{prefix}.out"), out);
    }
}
