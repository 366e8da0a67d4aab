use rand::Rng;

use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::nn::{LayerKv, Linear, Module, Segment, Stack, StackCache, Tensor};
use crate::scalar::Scalar;

use super::config::DecoderConfig;

/// One decoder input position: a token looked up in the embedding table, or
/// row `i` of a caller-supplied matrix of soft (already projected) embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Row {
    Token(TokenId),
    Soft(usize),
}

/// Causal decoder-only language model that accepts embedding-level inputs.
///
/// The output head starts at zero, so an untrained decoder predicts the
/// uniform distribution.
#[derive(Clone, Debug)]
pub struct Decoder<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub stack: Stack<T>,
    pub head: Linear<T>,
}

pub struct DecoderCache<T> {
    rows: Vec<Row>,
    segs: Vec<Segment>,
    stack: StackCache<T>,
    hidden: Vec<T>,
}

impl<T: Scalar> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &DecoderConfig, vocab: usize, rng: &mut R) -> Self {
        Self {
            tok_emb: Tensor::randn(&[vocab, cfg.dim], 0.02, rng),
            pos_emb: Tensor::randn(&[cfg.max_positions, cfg.dim], 0.01, rng),
            stack: Stack::new(cfg.dim, cfg.heads, cfg.layers, true, rng),
            head: Linear::zeros(cfg.dim, vocab),
        }
    }

    pub fn dim(&self) -> usize {
        self.tok_emb.shape[1]
    }

    pub fn vocab(&self) -> usize {
        self.tok_emb.shape[0]
    }

    pub fn max_positions(&self) -> usize {
        self.pos_emb.shape[0]
    }

    fn embed(&self, row: Row, pos: usize, soft: &[T], out: &mut Vec<T>) -> Result<()> {
        let d = self.dim();
        let e = match row {
            Row::Token(t) => {
                if t as usize >= self.vocab() {
                    return Err(Error::InvalidArgument(format!("token id {t} outside vocabulary")));
                }
                self.tok_emb.row(t as usize)
            }
            Row::Soft(i) => soft.get(i * d..(i + 1) * d).ok_or(Error::IndexOutOfRange { index: i, len: soft.len() / d })?,
        };
        out.extend(e.iter().zip(self.pos_emb.row(pos)).map(|(&a, &b)| a + b));
        Ok(())
    }

    /// Runs independent sequences and returns logits `[rows, vocab]`.
    pub fn forward(&self, seqs: &[&[Row]], soft: &[T]) -> Result<(Vec<T>, DecoderCache<T>)> {
        let d = self.dim();
        if !soft.len().is_multiple_of(d) {
            return Err(Error::ShapeMismatch { expected: format!("soft rows of width {d}"), got: soft.len().to_string() });
        }
        let mut segs = Vec::with_capacity(seqs.len());
        let mut rows = Vec::new();
        let mut x = Vec::new();
        for seq in seqs {
            if seq.len() > self.max_positions() {
                return Err(Error::Overlength { len: seq.len(), max: self.max_positions() });
            }
            segs.push(Segment { start: rows.len(), len: seq.len() });
            for (pos, &row) in seq.iter().enumerate() {
                self.embed(row, pos, soft, &mut x)?;
                rows.push(row);
            }
        }
        let (hidden, stack) = self.stack.forward(x, &segs);
        let logits = self.head.forward(&hidden, rows.len());
        Ok((logits, DecoderCache { rows, segs, stack, hidden }))
    }

    /// Backpropagates `dlogits`; returns the gradient for the soft rows
    /// (`n_soft x dim`). Parameter gradients go to `grads` when given.
    pub fn backward(&self, cache: &DecoderCache<T>, dlogits: &[T], n_soft: usize, grads: Option<&mut Self>) -> Vec<T> {
        let d = self.dim();
        let n = cache.rows.len();
        let mut dsoft = vec![T::zero(); n_soft * d];
        match grads {
            Some(g) => {
                let dh = self.head.backward(&cache.hidden, dlogits, n, Some(&mut g.head));
                let dx = self.stack.backward(&cache.stack, &dh, &cache.segs, Some(&mut g.stack));
                for seg in &cache.segs {
                    for (pos, r) in (seg.start..seg.start + seg.len).enumerate() {
                        let gr = &dx[r * d..(r + 1) * d];
                        for (a, &b) in g.pos_emb.row_mut(pos).iter_mut().zip(gr) {
                            *a = *a + b;
                        }
                        let target = match cache.rows[r] {
                            Row::Token(t) => g.tok_emb.row_mut(t as usize),
                            Row::Soft(i) => &mut dsoft[i * d..(i + 1) * d],
                        };
                        for (a, &b) in target.iter_mut().zip(gr) {
                            *a = *a + b;
                        }
                    }
                }
            }
            None => {
                let dh = self.head.backward(&cache.hidden, dlogits, n, None);
                let dx = self.stack.backward(&cache.stack, &dh, &cache.segs, None);
                for (r, row) in cache.rows.iter().enumerate() {
                    if let Row::Soft(i) = *row {
                        for (a, &b) in dsoft[i * d..(i + 1) * d].iter_mut().zip(&dx[r * d..(r + 1) * d]) {
                            *a = *a + b;
                        }
                    }
                }
            }
        }
        dsoft
    }

    /// Processes a prompt and returns the last position's logits plus the
    /// per-layer key/value cache for incremental decoding.
    pub fn prefill(&self, rows: &[Row], soft: &[T]) -> Result<(Vec<T>, Vec<LayerKv<T>>)> {
        if rows.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        let (logits, cache) = self.forward(&[rows], soft)?;
        let v = self.vocab();
        let last = logits[(rows.len() - 1) * v..].to_vec();
        let kv = self.stack.kv_for(&cache.stack, Segment { start: 0, len: rows.len() });
        Ok((last, kv))
    }

    /// Appends one token at `pos` and returns its logits.
    pub fn step(&self, token: TokenId, kv: &mut [LayerKv<T>]) -> Result<Vec<T>> {
        let pos = kv.first().map_or(0, |k| k.len);
        if pos >= self.max_positions() {
            return Err(Error::Overlength { len: pos + 1, max: self.max_positions() });
        }
        let mut x = Vec::with_capacity(self.dim());
        self.embed(Row::Token(token), pos, &[], &mut x)?;
        let h = self.stack.forward_step(x, kv);
        Ok(self.head.forward(&h, 1))
    }
}

impl<T: Scalar> Module<T> for Decoder<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}.tok_emb"), &self.tok_emb));
        out.push((format!("{prefix}.pos_emb"), &self.pos_emb));
        self.stack.collect(&format!("{prefix}.stack"), out);
        self.head.collect(&format!("{prefix}.head"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}.tok_emb"), &mut self.tok_emb));
        out.push((format!("{prefix}.pos_emb"), &mut self.pos_emb));
        self.stack.collect_mut(&format!("{prefix}.stack"), out);
        self.head.collect_mut(&format!("{prefix}.head"), out);
    }
}
