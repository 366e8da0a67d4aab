mod common;

use refrag_core::corpus::{chunk_context, TokenId};
use refrag_core::model::{GenerateOptions, InputArrangement, ModelConfig, RefragModel};

fn tiny(zero_proj: bool) -> RefragModel<f64> {
    let mut cfg = ModelConfig::tiny(8, 6, 7);
    cfg.zero_init_projection = zero_proj;
    let mut m = RefragModel::new(cfg).unwrap();
    common::randomize_head(&mut m, 1);
    m
}

#[test]
fn invariants_hold_over_random_shapes() {
    for seed in 0..40 {
        common::check_model_invariants(seed).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn identical_chunks_get_identical_embeddings() {
    let m = tiny(false);
    let ctx: Vec<TokenId> = vec![1, 2, 3, 0, 4, 4, 1, 2, 3];
    let chunks = chunk_context(&ctx, 3, 6).unwrap();
    let emb = m.encode_chunks(&chunks).unwrap();
    assert_eq!(emb[0].encoded, emb[2].encoded);
    assert_eq!(emb[0].projected, emb[2].projected);
    assert_ne!(emb[0].encoded, emb[1].encoded);
}

#[test]
fn swapping_chunk_order_permutes_embeddings() {
    let m = tiny(false);
    let a = chunk_context(&[1, 2, 3, 4], 2, 6).unwrap();
    let b = chunk_context(&[3, 4, 1, 2], 2, 6).unwrap();
    let ea = m.encode_chunks(&a).unwrap();
    let eb = m.encode_chunks(&b).unwrap();
    assert_eq!(ea[0].encoded, eb[1].encoded);
    assert_eq!(ea[1].encoded, eb[0].encoded);
}

#[test]
fn chunk_length_mismatch_is_rejected() {
    let m = tiny(false);
    let mut chunks = chunk_context(&[1, 2, 3, 4], 2, 6).unwrap();
    chunks[1].tokens.push(1);
    assert!(m.encode_chunks(&chunks).is_err());
}

#[test]
fn projection_contract() {
    let m = tiny(true);
    assert_eq!(m.project(&[0.0; 8]).unwrap(), vec![0.0; 16]);
    let m = tiny(false);
    let c: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
    let y = m.project(&c).unwrap();
    assert_eq!(y.len(), 16);
    assert_eq!(y, m.project(&c).unwrap());
    assert!(m.project(&[0.0; 7]).is_err());
}

#[test]
fn toy_projection_maps_64_to_128() {
    let m = RefragModel::<f32>::new(ModelConfig::toy(30, 28, 29)).unwrap();
    assert_eq!(m.project(&[0.5; 64]).unwrap().len(), 128);
}

#[test]
fn untrained_model_is_uniform() {
    let m = RefragModel::<f64>::new(ModelConfig::tiny(8, 6, 7)).unwrap();
    let arr = m.arrange(&[1, 2], &[0, 1, 2, 3, 4, 5], 2, &[1]).unwrap();
    let targets = [0, 1, 2, 3, 4, 5, 0, 1];
    let nll = m.decoder_forward(&arr, &targets).unwrap();
    let mean = nll.iter().sum::<f64>() / nll.len() as f64;
    assert!((mean - 8f64.ln()).abs() < 1e-12, "{mean}");
}

#[test]
fn perturbing_a_target_leaves_earlier_nlls_unchanged() {
    let m = tiny(false);
    let arr = m.arrange(&[1], &[0, 1, 2, 3], 2, &[]).unwrap();
    let a = m.decoder_forward(&arr, &[1, 2, 3, 4, 5]).unwrap();
    let b = m.decoder_forward(&arr, &[1, 2, 0, 4, 5]).unwrap();
    assert_eq!(a[..2], b[..2]);
    assert_ne!(a[3], b[3]);
}

#[test]
fn overlength_is_an_error() {
    let m = tiny(false);
    let arr = InputArrangement::<f64>::from_tokens(&vec![1; 90]);
    assert!(m.decoder_forward(&arr, &[1; 10]).is_err());
    assert!(m.generate(&arr, &GenerateOptions::greedy(10)).is_err());
}

#[test]
fn generation_contract() {
    let m = tiny(false);
    let arr = m.arrange(&[1, 2], &[3, 4, 5, 0], 2, &[0]).unwrap();
    assert!(m.generate(&arr, &GenerateOptions::greedy(0)).unwrap().is_empty());
    let a = m.generate(&arr, &GenerateOptions::greedy(12)).unwrap();
    assert_eq!(a.len(), 12);
    assert_eq!(a, m.generate(&arr, &GenerateOptions::greedy(12)).unwrap());
    let sampled = GenerateOptions { max_new_tokens: 12, temperature: Some(1.0), seed: 9 };
    assert_eq!(m.generate(&arr, &sampled).unwrap(), m.generate(&arr, &sampled).unwrap());
}

#[test]
fn greedy_generation_matches_full_recompute() {
    let m = tiny(false);
    let arr = m.arrange(&[1, 2], &[3, 4, 5, 0, 1], 2, &[1]).unwrap();
    let out = m.generate(&arr, &GenerateOptions::greedy(6)).unwrap();
    let mut ext = arr.clone();
    let mut expect = Vec::new();
    for _ in 0..6 {
        let logits = m.logits(&ext).unwrap();
        let last = &logits[logits.len() - 8..];
        let next = (0..8).max_by(|&i, &j| last[i].partial_cmp(&last[j]).unwrap().then(j.cmp(&i))).unwrap() as TokenId;
        expect.push(next);
        ext.rows.push(refrag_core::model::Row::Token(next));
    }
    assert_eq!(out, expect);
}

#[test]
fn encoding_is_identical_across_thread_counts() {
    let m = tiny(false);
    let ctx: Vec<TokenId> = (0..40).map(|i| (i * 7 % 6) as TokenId).collect();
    let chunks = chunk_context(&ctx, 4, 6).unwrap();
    let refs: Vec<&[TokenId]> = chunks.iter().map(|c| c.tokens.as_slice()).collect();
    let one = m.encoder.encode_parallel(&refs, 1).unwrap();
    for threads in [2, 3, 7] {
        assert_eq!(one, m.encoder.encode_parallel(&refs, threads).unwrap());
    }
}
