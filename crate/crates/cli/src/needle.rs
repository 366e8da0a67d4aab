//! Fact recall through compressed context: a held-out document mentions
//! `KEY=VV`, the prompt ends with `KEY=` and the model must emit `VV`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refrag_core::corpus::{chunk_context, Fact, SyntheticConfig, SyntheticCorpus, TokenId, Vocab};
use refrag_core::model::{assemble_input, GenerateOptions, QuestionOrder, RefragModel};
use refrag_core::training::expansion_count;
use refrag_core::{Result, Scalar};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleItem {
    pub context: Vec<TokenId>,
    pub cue: Vec<TokenId>,
    pub answer: Vec<TokenId>,
}

/// `n` items whose `s`-token context mentions the asked fact. With
/// `present = false` the asked key is fresh, so only chance recall is possible.
pub fn needle_items(
    vocab: &Vocab,
    synthetic: &SyntheticConfig,
    n: usize,
    s: usize,
    present: bool,
    seed: u64,
) -> Result<Vec<NeedleItem>> {
    let mut corpus =
        SyntheticCorpus::new(SyntheticConfig { seed: synthetic.seed ^ seed ^ 0x6e65_6564_6c65, ..synthetic.clone() });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let (doc, facts) = corpus.document(2 * s);
        let context: String = doc.chars().take(s).collect();
        if context.chars().count() < s {
            continue;
        }
        let Some(fact) = facts.iter().find(|f| context.contains(&f.mention())) else { continue };
        let fact = if present {
            fact.clone()
        } else {
            let fresh = Fact::random(&mut rng);
            if facts.iter().any(|f| f.key == fresh.key) || context.contains(&fresh.cue()) {
                continue;
            }
            fresh
        };
        out.push(NeedleItem {
            context: vocab.encode(&context)?,
            cue: vocab.encode(&fact.cue())?,
            answer: vocab.encode(&fact.value)?,
        });
    }
    Ok(out)
}

/// Exact-match accuracy of greedy answers with `round(pL)` randomly chosen
/// chunks expanded.
pub fn needle_eval<T: Scalar>(model: &RefragModel<T>, items: &[NeedleItem], k: usize, p: f64, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for item in items {
        let chunks = chunk_context(&item.context, k, model.config.pad_id)?;
        let l = chunks.len();
        let mut expansion = sample(&mut rng, l, expansion_count(p, l)?).into_vec();
        expansion.sort_unstable();
        let embeddings = model.encode_chunks(&chunks)?;
        let arrangement = assemble_input(&item.cue, &embeddings, &chunks, &expansion, QuestionOrder::AfterContext)?;
        let answer = model.generate(&arrangement, &GenerateOptions::greedy(item.answer.len()))?;
        hits += usize::from(answer == item.answer);
    }
    Ok(if items.is_empty() { 0.0 } else { hits as f64 / items.len() as f64 })
}
