//! Encoder, projection, decoder and their composition over mixed inputs.
//!
//! A context is cut into `k`-token chunks; each chunk is encoded on its own
//! into a vector `c_i`, projected into the decoder's embedding space, and
//! occupies a single decoder position. Chunks listed in an expansion set are
//! fed as their raw tokens instead.

pub mod arrangement;
pub mod batch;
pub mod config;
pub mod decoder;
pub mod encoder;
pub mod projection;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub use arrangement::{assemble_input, ChunkEmbedding, InputArrangement, Slot, SlotForm};
pub use batch::{BatchLoss, Example, Trainable};
pub use config::{DecoderConfig, EncoderConfig, ModelConfig, QuestionOrder};
pub use decoder::{Decoder, Row};
pub use encoder::Encoder;
pub use projection::Projection;

use crate::corpus::{chunk_context, Chunk, TokenId};
use crate::error::{Error, Result};
use crate::nn::ops::{argmax, logsumexp};
use crate::nn::{Module, Tensor};
use crate::scalar::Scalar;

/// Worker cap for chunk encoding, from `REFRAG_LAB_THREADS` (default: all cores).
pub fn worker_threads() -> usize {
    std::env::var("REFRAG_LAB_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerateOptions {
    pub max_new_tokens: usize,
    /// `None` decodes greedily.
    pub temperature: Option<f64>,
    pub seed: u64,
}

impl GenerateOptions {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self { max_new_tokens, temperature: None, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct RefragModel<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub projection: Projection<T>,
    pub decoder: Decoder<T>,
}

impl<T: Scalar> RefragModel<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let decoder = Decoder::new(&config.decoder, config.vocab_size, &mut rng);
        let encoder = Encoder::new(&config.encoder, config.vocab_size, &mut rng);
        let projection = Projection::new(config.encoder.dim, config.decoder.dim, config.zero_init_projection, &mut rng);
        Ok(Self { config, encoder, projection, decoder })
    }

    /// Encodes and projects chunks; every chunk must have the same length.
    pub fn encode_chunks(&self, chunks: &[Chunk]) -> Result<Vec<ChunkEmbedding<T>>> {
        let Some(first) = chunks.first() else { return Ok(Vec::new()) };
        let k = first.tokens.len();
        if let Some(bad) = chunks.iter().find(|c| c.tokens.len() != k) {
            return Err(Error::ShapeMismatch { expected: format!("chunk length {k}"), got: bad.tokens.len().to_string() });
        }
        let refs: Vec<&[TokenId]> = chunks.iter().map(|c| c.tokens.as_slice()).collect();
        let encoded = self.encoder.encode_parallel(&refs, worker_threads())?;
        let (projected, _) = self.projection.forward(&encoded, chunks.len());
        let (de, d) = (self.encoder.dim(), self.decoder.dim());
        Ok(chunks
            .iter()
            .enumerate()
            .map(|(i, c)| ChunkEmbedding {
                index: c.index,
                encoded: encoded[i * de..(i + 1) * de].to_vec(),
                projected: projected[i * d..(i + 1) * d].to_vec(),
            })
            .collect())
    }

    /// Applies the projection to a single encoder vector.
    pub fn project(&self, c: &[T]) -> Result<Vec<T>> {
        if c.len() != self.projection.in_dim() {
            return Err(Error::ShapeMismatch { expected: self.projection.in_dim().to_string(), got: c.len().to_string() });
        }
        Ok(self.projection.forward(c, 1).0)
    }

    /// Chunks, encodes and assembles a context in one call.
    pub fn arrange(
        &self,
        question: &[TokenId],
        context: &[TokenId],
        k: usize,
        expansion: &[usize],
    ) -> Result<InputArrangement<T>> {
        let chunks = chunk_context(context, k, self.config.pad_id)?;
        let embeddings = self.encode_chunks(&chunks)?;
        assemble_input(question, &embeddings, &chunks, expansion, self.config.question_order)
    }

    fn prompt_rows(&self, arrangement: &InputArrangement<T>) -> Vec<Row> {
        let mut rows = Vec::with_capacity(arrangement.len() + 1);
        rows.push(Row::Token(self.config.bos_id));
        rows.extend_from_slice(&arrangement.rows);
        rows
    }

    /// Logits `[1 + len, vocab]` for BOS followed by the arrangement.
    pub fn logits(&self, arrangement: &InputArrangement<T>) -> Result<Vec<T>> {
        let rows = self.prompt_rows(arrangement);
        Ok(self.decoder.forward(&[&rows], &arrangement.soft)?.0)
    }

    /// Per-token negative log-likelihood of `targets` following the arrangement.
    pub fn decoder_forward(&self, arrangement: &InputArrangement<T>, targets: &[TokenId]) -> Result<Vec<T>> {
        let mut rows = self.prompt_rows(arrangement);
        if let Some((_, init)) = targets.split_last() {
            rows.extend(init.iter().map(|&t| Row::Token(t)));
        }
        let len = rows.len();
        if len > self.decoder.max_positions() {
            return Err(Error::Overlength { len, max: self.decoder.max_positions() });
        }
        let (logits, _) = self.decoder.forward(&[&rows], &arrangement.soft)?;
        let v = self.decoder.vocab();
        let a = arrangement.len();
        Ok(targets
            .iter()
            .enumerate()
            .map(|(j, &t)| {
                let row = &logits[(a + j) * v..(a + j + 1) * v];
                logsumexp(row) - row[t as usize]
            })
            .collect())
    }

    /// Greedy (or seeded sampling) continuation after the arrangement.
    pub fn generate(&self, arrangement: &InputArrangement<T>, opts: &GenerateOptions) -> Result<Vec<TokenId>> {
        if opts.max_new_tokens == 0 {
            return Ok(Vec::new());
        }
        let rows = self.prompt_rows(arrangement);
        let needed = rows.len() + opts.max_new_tokens - 1;
        if needed > self.decoder.max_positions() {
            return Err(Error::Overlength { len: needed, max: self.decoder.max_positions() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut pick = |logits: &[T]| -> Result<TokenId> {
            match opts.temperature {
                None => Ok(argmax(logits) as TokenId),
                Some(temp) => {
                    let max = logits.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = logits.iter().map(|x| ((x.as_f64() - max) / temp).exp()).collect();
                    let dist = WeightedIndex::new(&w).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                    Ok(dist.sample(&mut rng) as TokenId)
                }
            }
        };
        let (logits, mut kv) = self.decoder.prefill(&rows, &arrangement.soft)?;
        let mut out = vec![pick(&logits)?];
        while out.len() < opts.max_new_tokens {
            let logits = self.decoder.step(*out.last().unwrap(), &mut kv)?;
            out.push(pick(&logits)?);
        }
        Ok(out)
    }

    /// SHA-256 over every parameter whose name starts with `prefix`.
    pub fn fingerprint(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        let mut bytes = Vec::new();
        for (name, t) in self.named_params("") {
            if !name.starts_with(prefix) {
                continue;
            }
            h.update(name.as_bytes());
            bytes.clear();
            for &x in &t.data {
                x.write_le(&mut bytes);
            }
            h.update(&bytes);
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn decoder_fingerprint(&self) -> String {
        self.fingerprint("decoder.")
    }
}

impl<T: Scalar> Module<T> for RefragModel<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.encoder.collect(&format!("{prefix}encoder"), out);
        self.projection.collect(&format!("{prefix}projection"), out);
        self.decoder.collect(&format!("{prefix}decoder"), out);
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.encoder.collect_mut(&format!("{prefix}encoder"), out);
        self.projection.collect_mut(&format!("{prefix}projection"), out);
        self.decoder.collect_mut(&format!("{prefix}decoder"), out);
    }
}
