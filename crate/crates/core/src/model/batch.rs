use crate::corpus::TokenId;
use crate::error::{Error, Result};
use crate::nn::ops::logsumexp;
use crate::scalar::Scalar;

use super::decoder::Row;
use super::RefragModel;

/// One decoder sequence for training or batched evaluation.
///
/// `rows` starts with BOS; `Row::Soft(i)` stands for the compressed embedding
/// of `chunks[i]`. `targets` pairs a row position with the token predicted there.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub chunks: Vec<Vec<TokenId>>,
    pub rows: Vec<Row>,
    pub targets: Vec<(usize, TokenId)>,
}

impl Example {
    /// `prefix` rows followed by teacher-forced `targets`; BOS is prepended.
    pub fn continuation(bos: TokenId, chunks: Vec<Vec<TokenId>>, prefix: &[Row], targets: &[TokenId]) -> Self {
        let mut rows = Vec::with_capacity(1 + prefix.len() + targets.len());
        rows.push(Row::Token(bos));
        rows.extend_from_slice(prefix);
        let a = prefix.len();
        if let Some((_, init)) = targets.split_last() {
            rows.extend(init.iter().map(|&t| Row::Token(t)));
        }
        let targets = targets.iter().enumerate().map(|(j, &t)| (a + j, t)).collect();
        Self { chunks, rows, targets }
    }

    /// Plain next-token prediction over `tokens`.
    pub fn language_model(bos: TokenId, tokens: &[TokenId]) -> Self {
        Self::continuation(bos, Vec::new(), &[], tokens)
    }
}

/// Which components receive parameter gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub encoder: bool,
    pub projection: bool,
    pub decoder: bool,
}

impl Trainable {
    pub const ALL: Self = Self { encoder: true, projection: true, decoder: true };
    pub const ENCODER_SIDE: Self = Self { encoder: true, projection: true, decoder: false };
    pub const DECODER_ONLY: Self = Self { encoder: false, projection: false, decoder: true };

    /// Whether a parameter name (as produced by `named_params("")`) is trainable.
    pub fn allows(&self, name: &str) -> bool {
        (self.encoder && name.starts_with("encoder."))
            || (self.projection && name.starts_with("projection."))
            || (self.decoder && name.starts_with("decoder."))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    /// Mean NLL over every target token in the batch.
    pub loss: f64,
    pub tokens: usize,
    /// Mean NLL per example.
    pub per_example: Vec<f64>,
}

struct Prepared {
    chunk_refs: Vec<(usize, usize)>,
    seqs: Vec<Vec<Row>>,
}

impl<T: Scalar> RefragModel<T> {
    fn prepare(&self, examples: &[Example]) -> Prepared {
        let mut chunk_refs = Vec::new();
        let mut seqs = Vec::with_capacity(examples.len());
        for (e, ex) in examples.iter().enumerate() {
            let base = chunk_refs.len();
            chunk_refs.extend((0..ex.chunks.len()).map(|c| (e, c)));
            seqs.push(
                ex.rows
                    .iter()
                    .map(|r| match *r {
                        Row::Soft(i) => Row::Soft(base + i),
                        tok => tok,
                    })
                    .collect(),
            );
        }
        Prepared { chunk_refs, seqs }
    }

    fn validate(&self, examples: &[Example]) -> Result<()> {
        for ex in examples {
            for &(pos, _) in &ex.targets {
                if pos >= ex.rows.len() {
                    return Err(Error::IndexOutOfRange { index: pos, len: ex.rows.len() });
                }
            }
            for r in &ex.rows {
                if let Row::Soft(i) = *r {
                    if i >= ex.chunks.len() {
                        return Err(Error::IndexOutOfRange { index: i, len: ex.chunks.len() });
                    }
                }
            }
        }
        Ok(())
    }

    /// Per-target NLLs for each example, forward only.
    pub fn batch_nll(&self, examples: &[Example]) -> Result<Vec<Vec<f64>>> {
        self.validate(examples)?;
        let prep = self.prepare(examples);
        let soft = if prep.chunk_refs.is_empty() {
            Vec::new()
        } else {
            let refs: Vec<&[TokenId]> = prep.chunk_refs.iter().map(|&(e, c)| examples[e].chunks[c].as_slice()).collect();
            let (c, _) = self.encoder.forward(&refs)?;
            self.projection.forward(&c, refs.len()).0
        };
        let seq_refs: Vec<&[Row]> = prep.seqs.iter().map(|s| s.as_slice()).collect();
        let (logits, _) = self.decoder.forward(&seq_refs, &soft)?;
        let v = self.decoder.vocab();
        let mut offset = 0;
        let mut out = Vec::with_capacity(examples.len());
        for ex in examples {
            out.push(
                ex.targets
                    .iter()
                    .map(|&(pos, t)| {
                        let row = &logits[(offset + pos) * v..(offset + pos + 1) * v];
                        (logsumexp(row) - row[t as usize]).as_f64()
                    })
                    .collect(),
            );
            offset += ex.rows.len();
        }
        Ok(out)
    }

    /// Mean-NLL loss over all targets and its gradient, accumulated into `grads`
    /// for the components marked trainable.
    pub fn loss_and_grads(&self, examples: &[Example], trainable: Trainable, grads: &mut Self) -> Result<BatchLoss> {
        self.validate(examples)?;
        let prep = self.prepare(examples);
        let n_chunks = prep.chunk_refs.len();
        let refs: Vec<&[TokenId]> = prep.chunk_refs.iter().map(|&(e, c)| examples[e].chunks[c].as_slice()).collect();
        let enc = if n_chunks > 0 { Some(self.encoder.forward(&refs)?) } else { None };
        let proj = enc.as_ref().map(|(c, _)| self.projection.forward(c, n_chunks));
        let soft: &[T] = proj.as_ref().map_or(&[], |(e, _)| e.as_slice());

        let seq_refs: Vec<&[Row]> = prep.seqs.iter().map(|s| s.as_slice()).collect();
        let (logits, dcache) = self.decoder.forward(&seq_refs, soft)?;
        let v = self.decoder.vocab();
        let tokens: usize = examples.iter().map(|e| e.targets.len()).sum();
        if tokens == 0 {
            return Err(Error::InvalidArgument("batch has no targets".into()));
        }
        let scale = T::one() / T::from_usize(tokens).unwrap();
        let mut dlogits = vec![T::zero(); logits.len()];
        let mut per_example = Vec::with_capacity(examples.len());
        let mut total = 0.0;
        let mut offset = 0;
        for ex in examples {
            let mut sum = 0.0;
            for &(pos, t) in &ex.targets {
                let r = offset + pos;
                let row = &logits[r * v..(r + 1) * v];
                let lse = logsumexp(row);
                sum += (lse - row[t as usize]).as_f64();
                let d = &mut dlogits[r * v..(r + 1) * v];
                for (g, &x) in d.iter_mut().zip(row) {
                    *g = *g + (x - lse).exp() * scale;
                }
                d[t as usize] = d[t as usize] - scale;
            }
            total += sum;
            per_example.push(if ex.targets.is_empty() { 0.0 } else { sum / ex.targets.len() as f64 });
            offset += ex.rows.len();
        }

        let need_soft_grad = n_chunks > 0 && (trainable.encoder || trainable.projection);
        if trainable.decoder || need_soft_grad {
            let dec_grads = if trainable.decoder { Some(&mut grads.decoder) } else { None };
            let dsoft = self.decoder.backward(&dcache, &dlogits, n_chunks, dec_grads);
            if need_soft_grad {
                let (_, pcache) = proj.as_ref().unwrap();
                let p_grads = if trainable.projection { Some(&mut grads.projection) } else { None };
                let dc = self.projection.backward(pcache, &dsoft, n_chunks, p_grads);
                if trainable.encoder {
                    let (_, ecache) = enc.as_ref().unwrap();
                    self.encoder.backward(ecache, &dc, &mut grads.encoder);
                }
            }
        }
        Ok(BatchLoss { loss: total / tokens as f64, tokens, per_example })
    }
}
