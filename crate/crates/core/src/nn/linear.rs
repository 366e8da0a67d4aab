use rand::Rng;

use super::ops::{gemm, Mat};
use super::tensor::Tensor;
use super::Module;
use crate::scalar::Scalar;

/// `y = x W + b` with `W` stored `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Self { w: Tensor::randn(&[fan_in, fan_out], std, rng), b: Tensor::zeros(&[fan_out]) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Tensor::zeros(&[fan_in, fan_out]), b: Tensor::zeros(&[fan_out]) }
    }

    pub fn fan_in(&self) -> usize {
        self.w.shape[0]
    }

    pub fn fan_out(&self) -> usize {
        self.w.shape[1]
    }

    /// `x` holds `n` rows of width `fan_in`.
    pub fn forward(&self, x: &[T], n: usize) -> Vec<T> {
        let (din, dout) = (self.fan_in(), self.fan_out());
        debug_assert_eq!(x.len(), n * din);
        let mut y = Vec::with_capacity(n * dout);
        for _ in 0..n {
            y.extend_from_slice(&self.b.data);
        }
        gemm(T::one(), x, Mat::new(n, din), &self.w.data, Mat::new(din, dout), T::one(), &mut y, Mat::new(n, dout));
        y
    }

    /// Returns `dx`; accumulates parameter gradients into `grads` when given.
    pub fn backward(&self, x: &[T], dy: &[T], n: usize, grads: Option<&mut Self>) -> Vec<T> {
        let (din, dout) = (self.fan_in(), self.fan_out());
        if let Some(g) = grads {
            gemm(T::one(), x, Mat::new(n, din).t(), dy, Mat::new(n, dout), T::one(), &mut g.w.data, Mat::new(din, dout));
            for r in 0..n {
                for (gb, &d) in g.b.data.iter_mut().zip(&dy[r * dout..(r + 1) * dout]) {
                    *gb = *gb + d;
                }
            }
        }
        let mut dx = vec![T::zero(); n * din];
        gemm(T::one(), dy, Mat::new(n, dout), &self.w.data, Mat::new(din, dout).t(), T::zero(), &mut dx, Mat::new(n, din));
        dx
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.w"), &self.w));
        out.push((format!("{prefix}.b"), &self.b));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.w"), &mut self.w));
        out.push((format!("{prefix}.b"), &mut self.b));
    }
}
