use rand::Rng;

use crate::nn::{Linear, Module, Segment, Stack, StackCache, Tensor};
use crate::scalar::Scalar;

/// Shape of the selection policy network.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PolicyConfig {
    /// Width of the chunk embeddings it reads.
    pub input_dim: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub max_chunks: usize,
    pub seed: u64,
}

impl PolicyConfig {
    pub fn new(input_dim: usize, max_chunks: usize) -> Self {
        Self { input_dim, dim: 32, heads: 2, layers: 2, max_chunks, seed: 0 }
    }
}

/// Bidirectional transformer over a sequence of chunk embeddings emitting one
/// logit per chunk. Already-selected chunks can be flagged in the input so the
/// logits may be recomputed after each selection.
#[derive(Clone, Debug)]
pub struct PolicyNet<T> {
    pub input: Linear<T>,
    pub pos_emb: Tensor<T>,
    /// Added to the input row of every already-selected chunk.
    pub selected_emb: Tensor<T>,
    pub stack: Stack<T>,
    pub score: Linear<T>,
}

/// One policy evaluation: chunk embeddings `[L, input_dim]` plus selection flags.
#[derive(Clone, Debug)]
pub struct PolicyInput<'a, T> {
    pub chunks: &'a [T],
    pub selected: Vec<bool>,
}

pub struct PolicyCache<T> {
    inputs: Vec<T>,
    flags: Vec<bool>,
    positions: Vec<usize>,
    segs: Vec<Segment>,
    stack: StackCache<T>,
    hidden: Vec<T>,
}

impl<T: Scalar> PolicyNet<T> {
    /// The scoring head starts at zero, so an untrained policy is uniform.
    pub fn new<R: Rng + ?Sized>(cfg: &PolicyConfig, rng: &mut R) -> Self {
        Self {
            input: Linear::new(cfg.input_dim, cfg.dim, 0.02, rng),
            pos_emb: Tensor::randn(&[cfg.max_chunks, cfg.dim], 0.02, rng),
            selected_emb: Tensor::randn(&[1, cfg.dim], 0.02, rng),
            stack: Stack::new(cfg.dim, cfg.heads, cfg.layers, false, rng),
            score: Linear::zeros(cfg.dim, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input.fan_in()
    }

    pub fn max_chunks(&self) -> usize {
        self.pos_emb.shape[0]
    }

    /// Logits for every input, concatenated in input order.
    pub fn forward(&self, inputs: &[PolicyInput<'_, T>]) -> (Vec<T>, PolicyCache<T>) {
        let de = self.input_dim();
        let mut raw = Vec::new();
        let mut flags = Vec::new();
        let mut positions = Vec::new();
        let mut segs = Vec::with_capacity(inputs.len());
        for inp in inputs {
            let l = inp.chunks.len() / de;
            assert_eq!(inp.selected.len(), l, "selection flags must match chunk count");
            assert!(l <= self.max_chunks(), "more chunks than the policy's positional table");
            segs.push(Segment { start: positions.len(), len: l });
            raw.extend_from_slice(inp.chunks);
            flags.extend_from_slice(&inp.selected);
            positions.extend(0..l);
        }
        let n = positions.len();
        let mut x = self.input.forward(&raw, n);
        let d = self.stack.dim();
        for (r, (&pos, &flag)) in positions.iter().zip(&flags).enumerate() {
            let row = &mut x[r * d..(r + 1) * d];
            for (a, &b) in row.iter_mut().zip(self.pos_emb.row(pos)) {
                *a = *a + b;
            }
            if flag {
                for (a, &b) in row.iter_mut().zip(&self.selected_emb.data) {
                    *a = *a + b;
                }
            }
        }
        let (hidden, stack) = self.stack.forward(x, &segs);
        let logits = self.score.forward(&hidden, n);
        (logits, PolicyCache { inputs: raw, flags, positions, segs, stack, hidden })
    }

    /// Accumulates parameter gradients for `dlogits` into `grads`.
    pub fn backward(&self, cache: &PolicyCache<T>, dlogits: &[T], grads: &mut Self) {
        let n = cache.positions.len();
        let d = self.stack.dim();
        let dh = self.score.backward(&cache.hidden, dlogits, n, Some(&mut grads.score));
        let dx = self.stack.backward(&cache.stack, &dh, &cache.segs, Some(&mut grads.stack));
        for (r, (&pos, &flag)) in cache.positions.iter().zip(&cache.flags).enumerate() {
            let g = &dx[r * d..(r + 1) * d];
            for (a, &b) in grads.pos_emb.row_mut(pos).iter_mut().zip(g) {
                *a = *a + b;
            }
            if flag {
                for (a, &b) in grads.selected_emb.data.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
        }
        self.input.backward(&cache.inputs, &dx, n, Some(&mut grads.input));
    }
}

impl<T: Scalar> Module<T> for PolicyNet<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.input.collect(&format!("{prefix}.input"), out);
        out.push((format!("{prefix}.pos_emb"), &self.pos_emb));
        out.push((format!("{prefix}.selected_emb"), &self.selected_emb));
        self.stack.collect(&format!("{prefix}.stack"), out);
        self.score.collect(&format!("{prefix}.score"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.input.collect_mut(&format!("{prefix}.input"), out);
        out.push((format!("{prefix}.pos_emb"), &mut self.pos_emb));
        out.push((format!("{prefix}.selected_emb"), &mut self.selected_emb));
        self.stack.collect_mut(&format!("{prefix}.stack"), out);
        self.score.collect_mut(&format!("{prefix}.score"), out);
    }
}
