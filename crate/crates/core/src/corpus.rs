//! Character vocabulary, data points, chunking and the synthetic corpus.
//!
//! Data-point dumps are JSON Lines: one object per line with the fields
//! `tokens` (array of ids), `s` (context length) and `o` (output length).

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type TokenId = u32;

/// Character-level vocabulary: sorted corpus characters, then `<pad>`, then `<bos>`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    chars: Vec<char>,
}

impl Vocab {
    pub fn from_chars(chars: impl IntoIterator<Item = char>) -> Result<Self> {
        let set: BTreeSet<char> = chars.into_iter().collect();
        if set.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        Ok(Self { chars: set.into_iter().collect() })
    }

    /// Number of ids, specials included.
    pub fn size(&self) -> usize {
        self.chars.len() + 2
    }

    pub fn pad_id(&self) -> TokenId {
        self.chars.len() as TokenId
    }

    pub fn bos_id(&self) -> TokenId {
        self.chars.len() as TokenId + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }

    pub fn id(&self, c: char) -> Result<TokenId> {
        self.chars.binary_search(&c).map(|i| i as TokenId).map_err(|_| Error::UnknownSymbol(c))
    }

    pub fn symbol(&self, id: TokenId) -> Option<String> {
        let i = id as usize;
        if i < self.chars.len() {
            Some(self.chars[i].to_string())
        } else if id == self.pad_id() {
            Some("<pad>".into())
        } else if id == self.bos_id() {
            Some("<bos>".into())
        } else {
            None
        }
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.chars().map(|c| self.id(c)).collect()
    }

    /// Decodes ids to text, dropping specials.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().filter_map(|&i| self.chars.get(i as usize)).collect()
    }
}

/// Builds the vocabulary of a corpus with deterministic (sorted) id order.
pub fn build_vocab(corpus_text: &str) -> Result<Vocab> {
    Vocab::from_chars(corpus_text.chars())
}

/// One training unit: `s` context tokens followed by `o` output tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataPoint {
    pub tokens: Vec<TokenId>,
    pub s: usize,
    pub o: usize,
}

impl DataPoint {
    pub fn new(tokens: Vec<TokenId>, s: usize, o: usize) -> Result<Self> {
        if tokens.len() != s + o {
            return Err(invalid(format!("data point has {} tokens, expected s+o={}", tokens.len(), s + o)));
        }
        Ok(Self { tokens, s, o })
    }

    pub fn context(&self) -> &[TokenId] {
        &self.tokens[..self.s]
    }

    pub fn output(&self) -> &[TokenId] {
        &self.tokens[self.s..]
    }
}

/// Cuts a token stream into non-overlapping windows of `s + o` tokens; the
/// trailing remainder is dropped.
pub fn make_datapoints(stream: &[TokenId], s: usize, o: usize) -> Result<Vec<DataPoint>> {
    if s == 0 || o == 0 {
        return Err(invalid("s and o must be positive"));
    }
    let t = s + o;
    Ok(stream.chunks_exact(t).map(|w| DataPoint { tokens: w.to_vec(), s, o }).collect())
}

/// A fixed-size block of `k` context tokens.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub index: usize,
    pub tokens: Vec<TokenId>,
    pub padded: bool,
    /// Tokens before the pad tail.
    pub real_len: usize,
}

impl Chunk {
    pub fn real_tokens(&self) -> &[TokenId] {
        &self.tokens[..self.real_len]
    }
}

/// Splits a context into `ceil(s / k)` chunks, right-padding the last one.
pub fn chunk_context(context: &[TokenId], k: usize, pad_id: TokenId) -> Result<Vec<Chunk>> {
    if k == 0 {
        return Err(invalid("chunk size k must be at least 1"));
    }
    Ok(context
        .chunks(k)
        .enumerate()
        .map(|(index, c)| {
            let mut tokens = c.to_vec();
            tokens.resize(k, pad_id);
            Chunk { index, tokens, padded: c.len() < k, real_len: c.len() }
        })
        .collect())
}

/// Concatenates the unpadded chunk prefixes.
pub fn unchunk(chunks: &[Chunk]) -> Vec<TokenId> {
    chunks.iter().flat_map(|c| c.real_tokens().iter().copied()).collect()
}

pub fn write_datapoints<W: Write>(mut w: W, points: &[DataPoint]) -> Result<()> {
    for p in points {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_datapoints<R: BufRead>(r: R) -> Result<Vec<DataPoint>> {
    let mut out = Vec::new();
    for line in r.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: DataPoint = serde_json::from_str(&line)?;
        if p.tokens.len() != p.s + p.o {
            return Err(invalid("data point record violates s + o = len(tokens)"));
        }
        out.push(p);
    }
    Ok(out)
}

/// Knobs for the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    /// Approximate corpus length in characters.
    pub total_chars: usize,
    /// Size of the global word lexicon.
    pub lexicon_size: usize,
    /// Words drawn from the lexicon for each document's topic.
    pub topic_words: usize,
    pub min_doc_chars: usize,
    pub max_doc_chars: usize,
    /// Key/value facts planted per document.
    pub facts_per_doc: usize,
    /// Probability that a sentence slot is a fact mention.
    pub fact_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            total_chars: 2_000_000,
            lexicon_size: 400,
            topic_words: 10,
            min_doc_chars: 500,
            max_doc_chars: 1200,
            facts_per_doc: 3,
            fact_rate: 0.25,
            seed: 0,
        }
    }
}

/// Letters used for fact keys; keys are two of these.
pub const KEY_LETTERS: &[char] = &['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H', 'J', 'K'];
pub const VALUE_DIGITS: &[char] = &['0', '1', '2', '3', '4', '5', '6', '7', '8', '9'];

/// A planted `KEY=VALUE` fact.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fact {
    pub key: String,
    pub value: String,
}

impl Fact {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let key: String = (0..2).map(|_| *KEY_LETTERS.choose(rng).unwrap()).collect();
        let value: String = (0..2).map(|_| *VALUE_DIGITS.choose(rng).unwrap()).collect();
        Self { key, value }
    }

    /// Full mention, e.g. `"BD=37. "`.
    pub fn mention(&self) -> String {
        format!("{}={}. ", self.key, self.value)
    }

    /// Prompt that precedes the value, e.g. `"BD="`.
    pub fn cue(&self) -> String {
        format!("{}=", self.key)
    }

    /// Number of distinct values a fact can take.
    pub fn value_space() -> usize {
        VALUE_DIGITS.len().pow(2)
    }
}

/// Markov word generator plus topic-structured documents with recurring facts.
///
/// Each document draws a handful of topic words and facts, so later text in a
/// document is predictable from earlier text but not from global statistics.
pub struct SyntheticCorpus {
    cfg: SyntheticConfig,
    lexicon: Vec<String>,
    rng: ChaCha8Rng,
}

impl SyntheticCorpus {
    pub fn new(cfg: SyntheticConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let letters: Vec<char> = ('a'..='z').collect();
        // Sparse bigram chain: every letter has a few preferred successors.
        let successors: Vec<Vec<char>> =
            (0..letters.len()).map(|_| (0..4).map(|_| *letters.choose(&mut rng).unwrap()).collect()).collect();
        let mut lexicon = BTreeSet::new();
        while lexicon.len() < cfg.lexicon_size {
            let len = rng.random_range(3..=7);
            let mut c = *letters.choose(&mut rng).unwrap();
            let mut w = String::new();
            for _ in 0..len {
                w.push(c);
                let idx = (c as u8 - b'a') as usize;
                c = if rng.random_bool(0.8) {
                    *successors[idx].choose(&mut rng).unwrap()
                } else {
                    *letters.choose(&mut rng).unwrap()
                };
            }
            lexicon.insert(w);
        }
        Self { lexicon: lexicon.into_iter().collect(), cfg, rng }
    }

    pub fn lexicon(&self) -> &[String] {
        &self.lexicon
    }

    /// One document of topic sentences with fact mentions mixed in.
    pub fn document(&mut self, target_chars: usize) -> (String, Vec<Fact>) {
        let topic: Vec<&String> = self.lexicon.choose_multiple(&mut self.rng, self.cfg.topic_words).collect();
        let facts: Vec<Fact> = (0..self.cfg.facts_per_doc).map(|_| Fact::random(&mut self.rng)).collect();
        let mut text = String::new();
        while text.len() < target_chars {
            if !facts.is_empty() && self.rng.random_bool(self.cfg.fact_rate) {
                text.push_str(&facts.choose(&mut self.rng).unwrap().mention());
                continue;
            }
            let words = self.rng.random_range(3..=7);
            for w in 0..words {
                // Zipf-like preference for the first topic words.
                let r: f64 = self.rng.random();
                let idx = ((r * r) * topic.len() as f64) as usize;
                text.push_str(topic[idx.min(topic.len() - 1)]);
                text.push_str(if w + 1 == words { ". " } else { " " });
            }
        }
        (text, facts)
    }

    /// Whole corpus text, documents separated by newlines.
    pub fn generate(&mut self) -> String {
        let mut out = String::with_capacity(self.cfg.total_chars + self.cfg.max_doc_chars);
        while out.len() < self.cfg.total_chars {
            let len = self.rng.random_range(self.cfg.min_doc_chars..=self.cfg.max_doc_chars);
            let (doc, _) = self.document(len);
            out.push_str(&doc);
            out.push('\n');
        }
        out
    }

    /// Every symbol the generator can emit, so vocabularies built from small
    /// samples still cover held-out text.
    pub fn alphabet() -> Vec<char> {
        let mut v: Vec<char> = ('a'..='z').collect();
        v.extend_from_slice(KEY_LETTERS);
        v.extend_from_slice(VALUE_DIGITS);
        v.extend([' ', '.', '=', '\n']);
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn vocab_sizes() {
        let v = build_vocab("ab").unwrap();
        assert_eq!(v.size(), 4);
        assert_ne!(v.pad_id(), v.bos_id());
        assert_eq!(build_vocab("aaaa").unwrap().size(), 3);
        assert!(matches!(build_vocab(""), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn vocab_ids_are_sorted_and_bijective() {
        let v = build_vocab("cba").unwrap();
        assert_eq!(v.encode("abc").unwrap(), vec![0, 1, 2]);
        assert_eq!(v.decode(&[2, 1, 0, v.pad_id()]), "cba");
        for id in 0..v.size() as TokenId {
            assert!(v.symbol(id).is_some());
        }
        assert!(v.symbol(v.size() as TokenId).is_none());
        assert!(matches!(v.encode("z"), Err(Error::UnknownSymbol('z'))));
    }

    #[test]
    fn datapoint_counts() {
        let stream: Vec<TokenId> = (0..10).collect();
        assert_eq!(make_datapoints(&stream, 3, 2).unwrap().len(), 2);
        assert_eq!(make_datapoints(&stream[..4], 3, 2).unwrap().len(), 0);
        let long = vec![0; 4096 * 3];
        assert_eq!(make_datapoints(&long, 2048, 2048).unwrap().len(), 3);
        assert!(make_datapoints(&stream, 0, 2).is_err());
    }

    #[test]
    fn datapoints_are_non_overlapping_windows() {
        let stream: Vec<TokenId> = (0..23).collect();
        let dps = make_datapoints(&stream, 4, 3).unwrap();
        assert_eq!(dps.len(), 3);
        assert_eq!(dps[1].context(), &[7, 8, 9, 10]);
        assert_eq!(dps[1].output(), &[11, 12, 13]);
    }

    #[test]
    fn chunk_examples() {
        let ctx = vec![1; 2048];
        let c = chunk_context(&ctx, 16, 99).unwrap();
        assert_eq!(c.len(), 128);
        assert!(c.iter().all(|c| !c.padded));
        assert_eq!(chunk_context(&ctx, 32, 99).unwrap().len(), 64);

        let ctx: Vec<TokenId> = (0..100).collect();
        let c = chunk_context(&ctx, 16, 999).unwrap();
        assert_eq!(c.len(), 7);
        let last = c.last().unwrap();
        assert!(last.padded);
        assert_eq!(last.tokens.iter().filter(|&&t| t == 999).count(), 12);
        assert!(chunk_context(&ctx, 0, 0).is_err());
    }

    #[test]
    fn datapoint_dump_round_trips() {
        let dps = make_datapoints(&(0..20).collect::<Vec<_>>(), 6, 4).unwrap();
        let mut buf = Vec::new();
        write_datapoints(&mut buf, &dps).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.lines().next().unwrap().contains("\"s\":6"));
        assert_eq!(read_datapoints(&buf[..]).unwrap(), dps);
        assert!(read_datapoints(&b"{\"tokens\":[1],\"s\":1,\"o\":1}\n"[..]).is_err());
    }

    #[test]
    fn synthetic_corpus_is_deterministic_and_covered_by_alphabet() {
        let cfg = SyntheticConfig { total_chars: 5000, seed: 11, ..Default::default() };
        let a = SyntheticCorpus::new(cfg.clone()).generate();
        let b = SyntheticCorpus::new(cfg).generate();
        assert_eq!(a, b);
        assert!(a.len() >= 5000);
        let alphabet: BTreeSet<char> = SyntheticCorpus::alphabet().into_iter().collect();
        assert!(a.chars().all(|c| alphabet.contains(&c)));
        assert!(a.contains('='));
    }

    proptest! {
        #[test]
        fn chunking_round_trips(len in 1usize..300, k in 1usize..40) {
            let ctx: Vec<TokenId> = (0..len as TokenId).collect();
            let chunks = chunk_context(&ctx, k, 10_000).unwrap();
            prop_assert_eq!(chunks.len(), len.div_ceil(k));
            prop_assert!(chunks.iter().all(|c| c.tokens.len() == k));
            prop_assert!(chunks.iter().enumerate().all(|(i, c)| c.index == i));
            prop_assert_eq!(unchunk(&chunks), ctx);
        }

        #[test]
        fn datapoints_tile_the_stream(len in 0usize..500, s in 1usize..20, o in 1usize..20) {
            let stream: Vec<TokenId> = (0..len as TokenId).collect();
            let dps = make_datapoints(&stream, s, o).unwrap();
            prop_assert_eq!(dps.len(), len / (s + o));
            let flat: Vec<TokenId> = dps.iter().flat_map(|d| d.tokens.clone()).collect();
            prop_assert_eq!(&flat[..], &stream[..flat.len()]);
        }
    }
}
