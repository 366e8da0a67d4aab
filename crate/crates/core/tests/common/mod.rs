#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refrag_core::corpus::{chunk_context, TokenId};
use refrag_core::model::{assemble_input, InputArrangement, ModelConfig, RefragModel, Row};
use refrag_core::Scalar;

/// Replaces the zero-initialised output head with small pseudo-random values
/// so logits actually depend on the input.
pub fn randomize_head<T: Scalar>(model: &mut RefragModel<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in model.decoder.head.w.data.iter_mut() {
        *w = T::lit(rng.random_range(-0.5..0.5));
    }
}

/// Draws a small random model shape and input, then checks chunk
/// independence, cache equivalence, causality and length accounting with
/// exact equality.
pub fn check_model_invariants(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chars = rng.random_range(3..12usize);
    let vocab = chars + 2;
    let (pad, bos) = (chars as TokenId, chars as TokenId + 1);
    let mut cfg = ModelConfig::tiny(vocab, pad, bos);
    cfg.seed = seed;
    cfg.zero_init_projection = rng.random_bool(0.5);
    let heads = [1, 2, 4][rng.random_range(0..3)];
    cfg.decoder.heads = heads;
    cfg.decoder.dim = heads * rng.random_range(2..6);
    cfg.decoder.layers = rng.random_range(1..3);
    cfg.encoder.heads = [1, 2][rng.random_range(0..2)];
    cfg.encoder.dim = cfg.encoder.heads * rng.random_range(2..5);
    let mut model = RefragModel::<f64>::new(cfg).map_err(|e| e.to_string())?;
    randomize_head(&mut model, seed);

    let k = rng.random_range(1..6usize);
    let s = rng.random_range(1..24usize);
    let q = rng.random_range(0..4usize);
    let ctx: Vec<TokenId> = (0..s).map(|_| rng.random_range(0..chars) as TokenId).collect();
    let question: Vec<TokenId> = (0..q).map(|_| rng.random_range(0..chars) as TokenId).collect();
    let chunks = chunk_context(&ctx, k, pad).map_err(|e| e.to_string())?;
    let l = chunks.len();
    if l != s.div_ceil(k) {
        return Err(format!("chunk count {l} != ceil({s}/{k})"));
    }
    let expansion: Vec<usize> = (0..l).filter(|_| rng.random_bool(0.3)).collect();

    // Chunk independence: rewriting every other chunk leaves c_i unchanged.
    let emb = model.encode_chunks(&chunks).map_err(|e| e.to_string())?;
    let target = rng.random_range(0..l);
    let mut altered = chunks.clone();
    for (i, c) in altered.iter_mut().enumerate() {
        if i != target {
            for t in c.tokens.iter_mut() {
                *t = (*t + 1) % chars as TokenId;
            }
        }
    }
    let emb_alt = model.encode_chunks(&altered).map_err(|e| e.to_string())?;
    if emb[target].encoded != emb_alt[target].encoded || emb[target].projected != emb_alt[target].projected {
        return Err(format!("chunk {target} embedding changed when other chunks changed"));
    }
    let alone = model.encode_chunks(&chunks[target..=target]).map_err(|e| e.to_string())?;
    if alone[0].encoded != emb[target].encoded {
        return Err("chunk embedding depends on batch composition".into());
    }

    // Cache equivalence: precomputed embeddings give the same NLLs as a fresh pass.
    let targets: Vec<TokenId> = (0..rng.random_range(1..5)).map(|_| rng.random_range(0..chars) as TokenId).collect();
    let cached = assemble_input(&question, &emb, &chunks, &expansion, model.config.question_order).map_err(|e| e.to_string())?;
    let fresh = model.arrange(&question, &ctx, k, &expansion).map_err(|e| e.to_string())?;
    let nll_cached = model.decoder_forward(&cached, &targets).map_err(|e| e.to_string())?;
    let nll_fresh = model.decoder_forward(&fresh, &targets).map_err(|e| e.to_string())?;
    if nll_cached != nll_fresh {
        return Err("cached and recomputed chunk embeddings disagree".into());
    }

    // Length accounting.
    let expected = InputArrangement::<f64>::expected_len(q, l, k, expansion.len());
    if cached.len() != expected {
        return Err(format!("assembled length {} != {expected}", cached.len()));
    }
    let all: Vec<usize> = (0..l).collect();
    let full = assemble_input(&question, &emb, &chunks, &all, model.config.question_order).map_err(|e| e.to_string())?;
    let mut plain = question.clone();
    plain.extend(chunks.iter().flat_map(|c| c.tokens.iter().copied()));
    let plain = InputArrangement::<f64>::from_tokens(&plain);
    if full.rows != plain.rows {
        return Err("full expansion differs from the token-input path".into());
    }
    if model.logits(&full).map_err(|e| e.to_string())? != model.logits(&plain).map_err(|e| e.to_string())? {
        return Err("full expansion logits differ from token-input logits".into());
    }

    // Causality: changing position t leaves logits at positions < t untouched.
    let base = model.logits(&cached).map_err(|e| e.to_string())?;
    let v = vocab;
    let t = rng.random_range(0..cached.len());
    let mut changed = cached.clone();
    match changed.rows[t] {
        Row::Token(tok) => changed.rows[t] = Row::Token((tok + 1) % chars as TokenId),
        Row::Soft(i) => {
            let d = model.config.decoder.dim;
            for x in &mut changed.soft[i * d..(i + 1) * d] {
                *x += 0.5;
            }
        }
    }
    let after = model.logits(&changed).map_err(|e| e.to_string())?;
    // Row 0 of the logits is BOS, so arrangement position t is logits row t + 1.
    let prefix = (t + 1) * v;
    if base[..prefix] != after[..prefix] {
        return Err(format!("logits before position {t} changed"));
    }
    Ok(())
}
