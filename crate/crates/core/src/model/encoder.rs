use rand::Rng;

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::nn::{Module, Segment, Stack, StackCache, Tensor};
use crate::scalar::Scalar;

use super::config::EncoderConfig;

/// Bidirectional chunk encoder: one mean-pooled vector per chunk.
///
/// Positions restart at zero for every chunk and attention never crosses a
/// chunk boundary, so a chunk's embedding depends on its own tokens only.
#[derive(Clone, Debug)]
pub struct Encoder<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub stack: Stack<T>,
}

pub struct EncoderCache<T> {
    tokens: Vec<TokenId>,
    segs: Vec<Segment>,
    stack: StackCache<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &EncoderConfig, vocab: usize, rng: &mut R) -> Self {
        Self {
            tok_emb: Tensor::randn(&[vocab, cfg.dim], 0.02, rng),
            pos_emb: Tensor::randn(&[cfg.max_chunk_len, cfg.dim], 0.01, rng),
            stack: Stack::new(cfg.dim, cfg.heads, cfg.layers, false, rng),
        }
    }

    pub fn dim(&self) -> usize {
        self.tok_emb.shape[1]
    }

    pub fn max_chunk_len(&self) -> usize {
        self.pos_emb.shape[0]
    }

    fn check(&self, chunks: &[&[TokenId]]) -> Result<()> {
        let vocab = self.tok_emb.shape[0];
        for c in chunks {
            if c.is_empty() || c.len() > self.max_chunk_len() {
                return Err(Error::ShapeMismatch {
                    expected: format!("chunk length in 1..={}", self.max_chunk_len()),
                    got: c.len().to_string(),
                });
            }
            if let Some(&bad) = c.iter().find(|&&t| t as usize >= vocab) {
                return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
            }
        }
        Ok(())
    }

    /// Encodes chunks into a `[chunks, dim]` matrix.
    pub fn forward(&self, chunks: &[&[TokenId]]) -> Result<(Vec<T>, EncoderCache<T>)> {
        self.check(chunks)?;
        let d = self.dim();
        let mut segs = Vec::with_capacity(chunks.len());
        let mut tokens = Vec::new();
        let mut x = Vec::new();
        for c in chunks {
            segs.push(Segment { start: tokens.len(), len: c.len() });
            for (p, &t) in c.iter().enumerate() {
                tokens.push(t);
                let e = self.tok_emb.row(t as usize);
                let pe = self.pos_emb.row(p);
                x.extend(e.iter().zip(pe).map(|(&a, &b)| a + b));
            }
        }
        let (h, stack) = self.stack.forward(x, &segs);
        let mut pooled = vec![T::zero(); chunks.len() * d];
        for (i, seg) in segs.iter().enumerate() {
            let inv = T::one() / T::from_usize(seg.len).unwrap();
            let out = &mut pooled[i * d..(i + 1) * d];
            for r in seg.start..seg.start + seg.len {
                for (o, &v) in out.iter_mut().zip(&h[r * d..(r + 1) * d]) {
                    *o = *o + v;
                }
            }
            out.iter_mut().for_each(|o| *o = *o * inv);
        }
        Ok((pooled, EncoderCache { tokens, segs, stack }))
    }

    pub fn backward(&self, cache: &EncoderCache<T>, dpooled: &[T], grads: &mut Self) {
        let d = self.dim();
        let n = cache.tokens.len();
        let mut dh = vec![T::zero(); n * d];
        for (i, seg) in cache.segs.iter().enumerate() {
            let inv = T::one() / T::from_usize(seg.len).unwrap();
            let g = &dpooled[i * d..(i + 1) * d];
            for r in seg.start..seg.start + seg.len {
                for (o, &v) in dh[r * d..(r + 1) * d].iter_mut().zip(g) {
                    *o = v * inv;
                }
            }
        }
        let dx = self.stack.backward(&cache.stack, &dh, &cache.segs, Some(&mut grads.stack));
        for seg in &cache.segs {
            for (p, r) in (seg.start..seg.start + seg.len).enumerate() {
                let t = cache.tokens[r] as usize;
                let g = &dx[r * d..(r + 1) * d];
                for (a, &b) in grads.tok_emb.row_mut(t).iter_mut().zip(g) {
                    *a = *a + b;
                }
                for (a, &b) in grads.pos_emb.row_mut(p).iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
        }
    }

    /// Inference-only encoding spread over up to `threads` workers.
    ///
    /// Chunks are independent, so the result is bit-identical for any thread count.
    pub fn encode_parallel(&self, chunks: &[&[TokenId]], threads: usize) -> Result<Vec<T>> {
        self.check(chunks)?;
        let threads = threads.max(1).min(chunks.len().max(1));
        if threads == 1 {
            return Ok(self.forward(chunks)?.0);
        }
        let per = chunks.len().div_ceil(threads);
        let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
            let handles: Vec<_> = chunks.chunks(per).map(|group| s.spawn(move || self.forward(group).map(|(v, _)| v))).collect();
            handles.into_iter().map(|h| h.join().expect("encoder worker panicked")).collect()
        });
        let mut out = Vec::with_capacity(chunks.len() * self.dim());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }
}

impl<T: Scalar> Module<T> for Encoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.tok_emb"), &self.tok_emb));
        out.push((format!("{prefix}.pos_emb"), &self.pos_emb));
        self.stack.collect(&format!("{prefix}.stack"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.tok_emb"), &mut self.tok_emb));
        out.push((format!("{prefix}.pos_emb"), &mut self.pos_emb));
        self.stack.collect_mut(&format!("{prefix}.stack"), out);
    }
}
