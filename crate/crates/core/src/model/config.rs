use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Longest decoder sequence, BOS included.
    pub max_positions: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Longest chunk the encoder accepts (its positional table size).
    pub max_chunk_len: usize,
}

/// Where question tokens sit relative to the chunk slots.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionOrder {
    #[default]
    BeforeContext,
    AfterContext,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub pad_id: u32,
    pub bos_id: u32,
    pub decoder: DecoderConfig,
    pub encoder: EncoderConfig,
    /// Start the projection's output layer at zero.
    pub zero_init_projection: bool,
    pub question_order: QuestionOrder,
    pub seed: u64,
}

impl ModelConfig {
    /// Decoder d=128 / 4 layers / 4 heads, encoder 64 / 2 layers.
    pub fn toy(vocab_size: usize, pad_id: u32, bos_id: u32) -> Self {
        Self {
            vocab_size,
            pad_id,
            bos_id,
            decoder: DecoderConfig { dim: 128, layers: 4, heads: 4, max_positions: 256 },
            encoder: EncoderConfig { dim: 64, layers: 2, heads: 4, max_chunk_len: 32 },
            zero_init_projection: true,
            question_order: QuestionOrder::BeforeContext,
            seed: 0,
        }
    }

    /// A very small shape for unit tests and gradient checks.
    pub fn tiny(vocab_size: usize, pad_id: u32, bos_id: u32) -> Self {
        Self {
            vocab_size,
            pad_id,
            bos_id,
            decoder: DecoderConfig { dim: 16, layers: 2, heads: 2, max_positions: 96 },
            encoder: EncoderConfig { dim: 8, layers: 1, heads: 2, max_chunk_len: 16 },
            zero_init_projection: true,
            question_order: QuestionOrder::BeforeContext,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.decoder;
        let e = &self.encoder;
        if d.dim == 0 || d.heads == 0 || !d.dim.is_multiple_of(d.heads) {
            return Err(invalid("decoder dim must be a positive multiple of heads"));
        }
        if e.dim == 0 || e.heads == 0 || !e.dim.is_multiple_of(e.heads) {
            return Err(invalid("encoder dim must be a positive multiple of heads"));
        }
        if self.pad_id == self.bos_id {
            return Err(invalid("pad_id and bos_id must differ"));
        }
        if self.pad_id as usize >= self.vocab_size || self.bos_id as usize >= self.vocab_size {
            return Err(invalid("special ids must be inside the vocabulary"));
        }
        if d.max_positions == 0 || e.max_chunk_len == 0 {
            return Err(invalid("positional tables must be non-empty"));
        }
        Ok(())
    }
}
