//! Minimal transformer building blocks with hand-written backward passes.
//!
//! Every layer exposes `forward` returning its output plus a cache, and
//! `backward` consuming that cache. Parameter gradients are accumulated into
//! a structurally identical "gradient twin" of the layer when one is passed;
//! passing `None` propagates input gradients only (frozen layers).

pub mod attention;
pub mod block;
pub mod linear;
pub mod norm;
pub mod ops;
pub mod tensor;

pub use attention::{LayerKv, Segment, SelfAttention};
pub use block::{Block, Stack, StackCache};
pub use linear::Linear;
pub use norm::LayerNorm;
pub use tensor::Tensor;

use crate::scalar::Scalar;

/// Named-parameter traversal.
pub trait Module<T: Scalar> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.collect(prefix, &mut out);
        out
    }

    fn named_params_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.collect_mut(prefix, &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params("").iter().map(|(_, t)| t.len()).sum()
    }

    /// A copy with every parameter set to zero, used as a gradient buffer.
    fn zeroed(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        for (_, t) in z.named_params_mut("") {
            t.fill(T::zero());
        }
        z
    }
}
