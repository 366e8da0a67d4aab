use rand::Rng;

use super::attention::{AttentionCache, LayerKv, Segment, SelfAttention};
use super::linear::Linear;
use super::norm::{LayerNorm, LayerNormCache};
use super::ops::{add_assign, gelu, gelu_grad};
use super::tensor::Tensor;
use super::Module;
use crate::scalar::Scalar;

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub attn: SelfAttention<T>,
    pub ln2: LayerNorm<T>,
    pub fc: Linear<T>,
    pub proj: Linear<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    ln1: LayerNormCache<T>,
    a_in: Vec<T>,
    attn: AttentionCache<T>,
    ln2: LayerNormCache<T>,
    m_in: Vec<T>,
    h_pre: Vec<T>,
    h_act: Vec<T>,
}

impl<T: Scalar> Block<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, causal: bool, depth: usize, rng: &mut R) -> Self {
        let out_std = 0.02 / ((2 * depth.max(1)) as f64).sqrt();
        Self {
            ln1: LayerNorm::new(dim),
            attn: SelfAttention::new(dim, heads, causal, out_std, rng),
            ln2: LayerNorm::new(dim),
            fc: Linear::new(dim, 4 * dim, 0.02, rng),
            proj: Linear::new(4 * dim, dim, out_std, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.ln1.dim()
    }

    pub fn forward(&self, x: &[T], segs: &[Segment]) -> (Vec<T>, BlockCache<T>) {
        let d = self.dim();
        let n = x.len() / d;
        let (a_in, ln1) = self.ln1.forward(x, n);
        let (a_out, attn) = self.attn.forward(&a_in, segs);
        let mut mid = x.to_vec();
        add_assign(&mut mid, &a_out);
        let (m_in, ln2) = self.ln2.forward(&mid, n);
        let h_pre = self.fc.forward(&m_in, n);
        let h_act: Vec<T> = h_pre.iter().map(|&v| gelu(v)).collect();
        let m_out = self.proj.forward(&h_act, n);
        add_assign(&mut mid, &m_out);
        (mid, BlockCache { ln1, a_in, attn, ln2, m_in, h_pre, h_act })
    }

    pub fn backward(&self, cache: &BlockCache<T>, dy: &[T], segs: &[Segment], grads: Option<&mut Self>) -> Vec<T> {
        let d = self.dim();
        let n = dy.len() / d;
        let (g_ln1, g_attn, g_ln2, g_fc, g_proj) = match grads {
            Some(g) => (Some(&mut g.ln1), Some(&mut g.attn), Some(&mut g.ln2), Some(&mut g.fc), Some(&mut g.proj)),
            None => (None, None, None, None, None),
        };
        let mut dh = self.proj.backward(&cache.h_act, dy, n, g_proj);
        for (g, &pre) in dh.iter_mut().zip(&cache.h_pre) {
            *g = *g * gelu_grad(pre);
        }
        let dm_in = self.fc.backward(&cache.m_in, &dh, n, g_fc);
        let mut dmid = self.ln2.backward(&cache.ln2, &dm_in, n, g_ln2);
        add_assign(&mut dmid, dy);
        let da_in = self.attn.backward(&cache.a_in, &cache.attn, &dmid, segs, g_attn);
        let mut dx = self.ln1.backward(&cache.ln1, &da_in, n, g_ln1);
        add_assign(&mut dx, &dmid);
        dx
    }

    /// Single-row step against a key/value cache.
    pub fn forward_step(&self, x: &[T], kv: &mut LayerKv<T>) -> Vec<T> {
        let (a_in, _) = self.ln1.forward(x, 1);
        let a_out = self.attn.forward_step(&a_in, kv);
        let mut mid = x.to_vec();
        add_assign(&mut mid, &a_out);
        let (m_in, _) = self.ln2.forward(&mid, 1);
        let h: Vec<T> = self.fc.forward(&m_in, 1).into_iter().map(gelu).collect();
        add_assign(&mut mid, &self.proj.forward(&h, 1));
        mid
    }

    pub fn kv_for(&self, cache: &BlockCache<T>, seg: Segment) -> LayerKv<T> {
        self.attn.kv_from_cache(&cache.attn, seg)
    }
}

impl<T: Scalar> Module<T> for Block<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.ln1.collect(&format!("{prefix}.ln1"), out);
        self.attn.collect(&format!("{prefix}.attn"), out);
        self.ln2.collect(&format!("{prefix}.ln2"), out);
        self.fc.collect(&format!("{prefix}.fc"), out);
        self.proj.collect(&format!("{prefix}.proj"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.ln1.collect_mut(&format!("{prefix}.ln1"), out);
        self.attn.collect_mut(&format!("{prefix}.attn"), out);
        self.ln2.collect_mut(&format!("{prefix}.ln2"), out);
        self.fc.collect_mut(&format!("{prefix}.fc"), out);
        self.proj.collect_mut(&format!("{prefix}.proj"), out);
    }
}

/// A stack of blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Stack<T> {
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
}

#[derive(Clone, Debug)]
pub struct StackCache<T> {
    blocks: Vec<BlockCache<T>>,
    ln_f: LayerNormCache<T>,
}

impl<T: Scalar> Stack<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, layers: usize, causal: bool, rng: &mut R) -> Self {
        Self { blocks: (0..layers).map(|_| Block::new(dim, heads, causal, layers, rng)).collect(), ln_f: LayerNorm::new(dim) }
    }

    pub fn dim(&self) -> usize {
        self.ln_f.dim()
    }

    pub fn forward(&self, x: Vec<T>, segs: &[Segment]) -> (Vec<T>, StackCache<T>) {
        let n = x.len() / self.dim();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut h = x;
        for b in &self.blocks {
            let (y, c) = b.forward(&h, segs);
            caches.push(c);
            h = y;
        }
        let (y, ln_f) = self.ln_f.forward(&h, n);
        (y, StackCache { blocks: caches, ln_f })
    }

    pub fn backward(&self, cache: &StackCache<T>, dy: &[T], segs: &[Segment], grads: Option<&mut Self>) -> Vec<T> {
        let n = dy.len() / self.dim();
        match grads {
            Some(g) => {
                let mut dh = self.ln_f.backward(&cache.ln_f, dy, n, Some(&mut g.ln_f));
                for (i, b) in self.blocks.iter().enumerate().rev() {
                    dh = b.backward(&cache.blocks[i], &dh, segs, Some(&mut g.blocks[i]));
                }
                dh
            }
            None => {
                let mut dh = self.ln_f.backward(&cache.ln_f, dy, n, None);
                for (i, b) in self.blocks.iter().enumerate().rev() {
                    dh = b.backward(&cache.blocks[i], &dh, segs, None);
                }
                dh
            }
        }
    }

    /// Key/value caches for one segment, one per block.
    pub fn kv_for(&self, cache: &StackCache<T>, seg: Segment) -> Vec<LayerKv<T>> {
        self.blocks.iter().zip(&cache.blocks).map(|(b, c)| b.kv_for(c, seg)).collect()
    }

    pub fn forward_step(&self, x: Vec<T>, kv: &mut [LayerKv<T>]) -> Vec<T> {
        let mut h = x;
        for (b, layer_kv) in self.blocks.iter().zip(kv.iter_mut()) {
            h = b.forward_step(&h, layer_kv);
        }
        self.ln_f.forward(&h, 1).0
    }
}

impl<T: Scalar> Module<T> for Stack<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.collect(&format!("{prefix}.blocks.{i}"), out);
        }
        self.ln_f.collect(&format!("{prefix}.ln_f"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.collect_mut(&format!("{prefix}.blocks.{i}"), out);
        }
        self.ln_f.collect_mut(&format!("{prefix}.ln_f"), out);
    }
}
