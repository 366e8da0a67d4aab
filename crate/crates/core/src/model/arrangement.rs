use std::collections::BTreeSet;

use crate::corpus::{Chunk, TokenId};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::config::QuestionOrder;
use super::decoder::Row;

/// Encoder output for one chunk and its projection into decoder space.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkEmbedding<T> {
    pub index: usize,
    pub encoded: Vec<T>,
    pub projected: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SlotForm {
    Compressed,
    Expanded,
}

/// Where chunk `chunk` landed in the assembled sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Slot {
    pub chunk: usize,
    pub form: SlotForm,
    pub start: usize,
    pub len: usize,
}

/// Decoder-ready mix of question tokens, compressed chunk slots (one position
/// each) and expanded chunks (their `k` raw tokens), in chunk order.
#[derive(Clone, Debug, PartialEq)]
pub struct InputArrangement<T> {
    pub question_len: usize,
    pub chunk_len: usize,
    pub order: QuestionOrder,
    pub slots: Vec<Slot>,
    /// Expanded chunk indices, ascending, 0-based.
    pub expansion: Vec<usize>,
    pub rows: Vec<Row>,
    /// Projected embeddings referenced by `Row::Soft`, row-major.
    pub soft: Vec<T>,
}

impl<T: Scalar> InputArrangement<T> {
    /// Plain token input with no chunk slots.
    pub fn from_tokens(tokens: &[TokenId]) -> Self {
        Self {
            question_len: tokens.len(),
            chunk_len: 0,
            order: QuestionOrder::BeforeContext,
            slots: Vec::new(),
            expansion: Vec::new(),
            rows: tokens.iter().map(|&t| Row::Token(t)).collect(),
            soft: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_chunks(&self) -> usize {
        self.slots.len()
    }

    /// `q + (L - |l|) + k |l|`.
    pub fn expected_len(q: usize, chunks: usize, k: usize, expanded: usize) -> usize {
        q + (chunks - expanded) + k * expanded
    }
}

fn validate_expansion(expansion: &[usize], chunks: usize) -> Result<BTreeSet<usize>> {
    let mut set = BTreeSet::new();
    for &i in expansion {
        if i >= chunks {
            return Err(Error::IndexOutOfRange { index: i, len: chunks });
        }
        if !set.insert(i) {
            return Err(Error::DuplicateIndex(i));
        }
    }
    Ok(set)
}

/// Builds `E(x, l)`: chunk `i` is its projected embedding unless `i` is in
/// `expansion`, in which case its `k` tokens are used.
pub fn assemble_input<T: Scalar>(
    question: &[TokenId],
    embeddings: &[ChunkEmbedding<T>],
    chunks: &[Chunk],
    expansion: &[usize],
    order: QuestionOrder,
) -> Result<InputArrangement<T>> {
    if embeddings.len() != chunks.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} chunk embeddings", chunks.len()),
            got: embeddings.len().to_string(),
        });
    }
    let expanded = validate_expansion(expansion, chunks.len())?;
    let k = chunks.first().map_or(0, |c| c.tokens.len());
    if chunks.iter().any(|c| c.tokens.len() != k) {
        return Err(Error::InvalidArgument("chunks must share one length".into()));
    }
    let width = embeddings.first().map_or(0, |e| e.projected.len());
    if embeddings.iter().any(|e| e.projected.len() != width) {
        return Err(Error::InvalidArgument("chunk embeddings must share one width".into()));
    }

    let mut rows = Vec::with_capacity(InputArrangement::<T>::expected_len(question.len(), chunks.len(), k, expanded.len()));
    let mut soft = Vec::new();
    let mut slots = Vec::with_capacity(chunks.len());
    let push_question = |rows: &mut Vec<Row>| rows.extend(question.iter().map(|&t| Row::Token(t)));
    if order == QuestionOrder::BeforeContext {
        push_question(&mut rows);
    }
    for (i, (chunk, emb)) in chunks.iter().zip(embeddings).enumerate() {
        let start = rows.len();
        if expanded.contains(&i) {
            rows.extend(chunk.tokens.iter().map(|&t| Row::Token(t)));
            slots.push(Slot { chunk: i, form: SlotForm::Expanded, start, len: k });
        } else {
            rows.push(Row::Soft(soft.len() / width.max(1)));
            soft.extend_from_slice(&emb.projected);
            slots.push(Slot { chunk: i, form: SlotForm::Compressed, start, len: 1 });
        }
    }
    if order == QuestionOrder::AfterContext {
        push_question(&mut rows);
    }
    Ok(InputArrangement {
        question_len: question.len(),
        chunk_len: k,
        order,
        slots,
        expansion: expanded.into_iter().collect(),
        rows,
        soft,
    })
}
