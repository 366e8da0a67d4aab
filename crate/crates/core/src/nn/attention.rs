use rand::Rng;

use super::linear::Linear;
use super::ops::{gemm, softmax_in_place, Mat};
use super::tensor::Tensor;
use super::Module;
use crate::scalar::Scalar;

/// A run of consecutive rows forming one independent sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Splits `n` rows into equal segments of length `len`.
pub fn uniform_segments(count: usize, len: usize) -> Vec<Segment> {
    (0..count).map(|i| Segment { start: i * len, len }).collect()
}

/// Multi-head self-attention. Each [`Segment`] attends only within itself.
#[derive(Clone, Debug)]
pub struct SelfAttention<T> {
    pub qkv: Linear<T>,
    pub out: Linear<T>,
    pub heads: usize,
    pub causal: bool,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    qkv: Vec<T>,
    probs: Vec<T>,
    ctx: Vec<T>,
}

impl<T> AttentionCache<T> {
    /// Fused `[q | k | v]` rows, width `3 d`.
    pub fn qkv(&self) -> &[T] {
        &self.qkv
    }
}

/// Per-layer key/value cache for incremental decoding.
#[derive(Clone, Debug, Default)]
pub struct LayerKv<T> {
    pub keys: Vec<T>,
    pub values: Vec<T>,
    pub len: usize,
}

impl<T: Scalar> SelfAttention<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, heads: usize, causal: bool, out_std: f64, rng: &mut R) -> Self {
        assert!(heads > 0 && dim.is_multiple_of(heads), "dim must be divisible by heads");
        Self { qkv: Linear::new(dim, 3 * dim, 0.02, rng), out: Linear::new(dim, dim, out_std, rng), heads, causal }
    }

    pub fn dim(&self) -> usize {
        self.out.fan_out()
    }

    fn scale(&self) -> T {
        let hd = self.dim() / self.heads;
        T::one() / T::from_usize(hd).unwrap().sqrt()
    }

    pub fn forward(&self, x: &[T], segs: &[Segment]) -> (Vec<T>, AttentionCache<T>) {
        let d = self.dim();
        let n = x.len() / d;
        let hd = d / self.heads;
        let scale = self.scale();
        let qkv = self.qkv.forward(x, n);
        let mut ctx = vec![T::zero(); n * d];
        let total: usize = segs.iter().map(|s| s.len * s.len).sum::<usize>() * self.heads;
        let mut probs = vec![T::zero(); total];
        let mut p_off = 0;
        for seg in segs {
            let t = seg.len;
            for h in 0..self.heads {
                let q = Mat::strided(seg.start * 3 * d + h * hd, t, hd, 3 * d);
                let k = Mat::strided(seg.start * 3 * d + d + h * hd, t, hd, 3 * d);
                let v = Mat::strided(seg.start * 3 * d + 2 * d + h * hd, t, hd, 3 * d);
                let p = &mut probs[p_off..p_off + t * t];
                gemm(scale, &qkv, q, &qkv, k.t(), T::zero(), p, Mat::new(t, t));
                for i in 0..t {
                    let row = &mut p[i * t..(i + 1) * t];
                    if self.causal {
                        softmax_in_place(&mut row[..=i]);
                        row[i + 1..].iter_mut().for_each(|x| *x = T::zero());
                    } else {
                        softmax_in_place(row);
                    }
                }
                let c = Mat::strided(seg.start * d + h * hd, t, hd, d);
                gemm(T::one(), p, Mat::new(t, t), &qkv, v, T::zero(), &mut ctx, c);
                p_off += t * t;
            }
        }
        let y = self.out.forward(&ctx, n);
        (y, AttentionCache { qkv, probs, ctx })
    }

    pub fn backward(&self, x: &[T], cache: &AttentionCache<T>, dy: &[T], segs: &[Segment], grads: Option<&mut Self>) -> Vec<T> {
        let d = self.dim();
        let n = x.len() / d;
        let hd = d / self.heads;
        let scale = self.scale();
        let (g_qkv, g_out) = match grads {
            Some(g) => (Some(&mut g.qkv), Some(&mut g.out)),
            None => (None, None),
        };
        let dctx = self.out.backward(&cache.ctx, dy, n, g_out);
        let mut dqkv = vec![T::zero(); n * 3 * d];
        let max_t = segs.iter().map(|s| s.len).max().unwrap_or(0);
        let mut dp = vec![T::zero(); max_t * max_t];
        let mut p_off = 0;
        for seg in segs {
            let t = seg.len;
            for h in 0..self.heads {
                let q = Mat::strided(seg.start * 3 * d + h * hd, t, hd, 3 * d);
                let k = Mat::strided(seg.start * 3 * d + d + h * hd, t, hd, 3 * d);
                let v = Mat::strided(seg.start * 3 * d + 2 * d + h * hd, t, hd, 3 * d);
                let dc = Mat::strided(seg.start * d + h * hd, t, hd, d);
                let p = &cache.probs[p_off..p_off + t * t];
                let dp = &mut dp[..t * t];
                // dP = dC V^T, dV = P^T dC
                gemm(T::one(), &dctx, dc, &cache.qkv, v.t(), T::zero(), dp, Mat::new(t, t));
                gemm(T::one(), p, Mat::new(t, t).t(), &dctx, dc, T::zero(), &mut dqkv, v);
                // softmax backward; masked entries have p == 0 and stay 0
                for i in 0..t {
                    let pr = &p[i * t..(i + 1) * t];
                    let dr = &mut dp[i * t..(i + 1) * t];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for j in 0..t {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                }
                // dQ = s dS K, dK = s dS^T Q
                gemm(scale, dp, Mat::new(t, t), &cache.qkv, k, T::zero(), &mut dqkv, q);
                gemm(scale, dp, Mat::new(t, t).t(), &cache.qkv, q, T::zero(), &mut dqkv, k);
                p_off += t * t;
            }
        }
        self.qkv.backward(x, &dqkv, n, g_qkv)
    }

    /// Builds a key/value cache from the fused projections of one segment.
    pub fn kv_from_cache(&self, cache: &AttentionCache<T>, seg: Segment) -> LayerKv<T> {
        let d = self.dim();
        let mut kv = LayerKv { keys: Vec::with_capacity(seg.len * d), values: Vec::with_capacity(seg.len * d), len: seg.len };
        for r in seg.start..seg.start + seg.len {
            let row = &cache.qkv[r * 3 * d..(r + 1) * 3 * d];
            kv.keys.extend_from_slice(&row[d..2 * d]);
            kv.values.extend_from_slice(&row[2 * d..]);
        }
        kv
    }

    /// Attention output for one new row appended after the cached rows.
    pub fn forward_step(&self, x: &[T], kv: &mut LayerKv<T>) -> Vec<T> {
        let d = self.dim();
        let hd = d / self.heads;
        let scale = self.scale();
        let qkv = self.qkv.forward(x, 1);
        kv.keys.extend_from_slice(&qkv[d..2 * d]);
        kv.values.extend_from_slice(&qkv[2 * d..]);
        kv.len += 1;
        let t = kv.len;
        let mut ctx = vec![T::zero(); d];
        let mut scores = vec![T::zero(); t];
        for h in 0..self.heads {
            let q = Mat::strided(h * hd, 1, hd, 3 * d);
            let k = Mat::strided(h * hd, t, hd, d);
            let v = Mat::strided(h * hd, t, hd, d);
            gemm(scale, &qkv, q, &kv.keys, k.t(), T::zero(), &mut scores, Mat::new(1, t));
            softmax_in_place(&mut scores);
            gemm(T::one(), &scores, Mat::new(1, t), &kv.values, v, T::zero(), &mut ctx, Mat::strided(h * hd, 1, hd, d));
        }
        self.out.forward(&ctx, 1)
    }
}

impl<T: Scalar> Module<T> for SelfAttention<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.qkv.collect(&format!("{prefix}.qkv"), out);
        self.out.collect(&format!("{prefix}.out"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.qkv.collect_mut(&format!("{prefix}.qkv"), out);
        self.out.collect_mut(&format!("{prefix}.out"), out);
    }
}
