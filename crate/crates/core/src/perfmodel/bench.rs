use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_context, TokenId};
use crate::error::{invalid, Error, Result};
use crate::model::{RefragModel, Row};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    /// Untimed iterations before measuring.
    pub warmup: usize,
    /// Timed iterations; medians are reported.
    pub trials: usize,
    /// Tokens decoded after prefill for the per-token figure.
    pub decode_tokens: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self { warmup: 2, trials: 20, decode_tokens: 8, seed: 0 }
    }
}

/// Median timings for one context length and compression rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub s: usize,
    pub k: usize,
    /// Chunk embeddings precomputed; otherwise encoder time is included.
    pub cached: bool,
    pub ttft_baseline: f64,
    pub ttft_compressed: f64,
    pub ttft_speedup: f64,
    pub per_token_baseline: f64,
    pub per_token_compressed: f64,
    pub per_token_speedup: f64,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Smallest nonzero step of the monotonic clock.
fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Runs `f` `warmup + trials` times and returns median seconds of the timed
/// runs for the two phases `f` reports (prefill, per decoded token).
fn measure(cfg: &BenchConfig, mut f: impl FnMut() -> Result<(Duration, Duration)>) -> Result<(f64, f64)> {
    for _ in 0..cfg.warmup {
        f()?;
    }
    let mut first = Vec::with_capacity(cfg.trials);
    let mut per = Vec::with_capacity(cfg.trials);
    for _ in 0..cfg.trials {
        let (a, b) = f()?;
        first.push(a.as_secs_f64());
        per.push(b.as_secs_f64() / cfg.decode_tokens.max(1) as f64);
    }
    Ok((median(first), median(per)))
}

fn decode<T: Scalar>(model: &RefragModel<T>, rows: &[Row], soft: &[T], n: usize, start: Instant) -> Result<(Duration, Duration)> {
    let (logits, mut kv) = model.decoder.prefill(rows, soft)?;
    let ttft = start.elapsed();
    std::hint::black_box(&logits);
    let t = Instant::now();
    let mut tok = model.config.bos_id;
    for _ in 0..n {
        let l = model.decoder.step(tok, &mut kv)?;
        tok = (std::hint::black_box(l.len()) % 2) as TokenId;
    }
    Ok((ttft, t.elapsed()))
}

/// Times prefill (first logits) and per-token decoding of the full-token
/// context against the compressed one, single threaded. Emits a cached and
/// an uncached row for every `(s, k)`.
pub fn microbench<T: Scalar>(
    model: &RefragModel<T>,
    contexts: &[usize],
    ks: &[usize],
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    if cfg.trials < 20 {
        return Err(invalid(format!("at least 20 trials are needed, got {}", cfg.trials)));
    }
    let resolution = timer_resolution().as_secs_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let specials = [model.config.pad_id, model.config.bos_id];
    let mut out = Vec::new();
    for &s in contexts {
        let context: Vec<TokenId> = (0..s)
            .map(|_| loop {
                let t = rng.random_range(0..model.config.vocab_size as TokenId);
                if !specials.contains(&t) {
                    break t;
                }
            })
            .collect();
        let mut rows = vec![Row::Token(model.config.bos_id)];
        rows.extend(context.iter().map(|&t| Row::Token(t)));
        let (base_first, base_tok) = measure(cfg, || decode(model, &rows, &[], cfg.decode_tokens, Instant::now()))?;
        if base_first < 100.0 * resolution {
            return Err(Error::TimerResolution(format!(
                "baseline prefill at s={s} takes {base_first:.3e}s, under 100x the clock resolution {resolution:.1e}s; use a longer context"
            )));
        }
        for &k in ks {
            let chunks = chunk_context(&context, k, model.config.pad_id)?;
            let refs: Vec<&[TokenId]> = chunks.iter().map(|c| c.tokens.as_slice()).collect();
            let mut crows = vec![Row::Token(model.config.bos_id)];
            crows.extend((0..chunks.len()).map(Row::Soft));
            let embed = || -> Result<Vec<T>> {
                let enc = model.encoder.encode_parallel(&refs, 1)?;
                Ok(model.projection.forward(&enc, refs.len()).0)
            };
            let soft = embed()?;
            for cached in [true, false] {
                let (first, tok) = measure(cfg, || {
                    let start = Instant::now();
                    if cached {
                        decode(model, &crows, &soft, cfg.decode_tokens, start)
                    } else {
                        let fresh = embed()?;
                        decode(model, &crows, &fresh, cfg.decode_tokens, start)
                    }
                })?;
                out.push(BenchRow {
                    s,
                    k,
                    cached,
                    ttft_baseline: base_first,
                    ttft_compressed: first,
                    ttft_speedup: base_first / first,
                    per_token_baseline: base_tok,
                    per_token_compressed: tok,
                    per_token_speedup: base_tok / tok,
                });
            }
        }
    }
    Ok(out)
}

/// Long-format series `s,k,cached,metric,value` for external plotting.
pub fn series(rows: &[BenchRow]) -> String {
    let mut out = String::from("s,k,cached,metric,value\n");
    for r in rows {
        for (m, v) in [
            ("ttft_baseline_s", r.ttft_baseline),
            ("ttft_compressed_s", r.ttft_compressed),
            ("ttft_speedup", r.ttft_speedup),
            ("per_token_baseline_s", r.per_token_baseline),
            ("per_token_compressed_s", r.per_token_compressed),
            ("per_token_speedup", r.per_token_speedup),
        ] {
            out.push_str(&format!("{},{},{},{},{:.6e}\n", r.s, r.k, r.cached, m, v));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 3.0, 2.0]), 2.5);
    }

    #[test]
    fn tiny_bench_produces_rows_and_series() {
        let model = RefragModel::<f32>::new(ModelConfig::tiny(10, 8, 9)).unwrap();
        let cfg = BenchConfig { warmup: 1, trials: 20, decode_tokens: 2, seed: 1 };
        let rows = match microbench(&model, &[64], &[1, 4], &cfg) {
            Ok(r) => r,
            Err(Error::TimerResolution(_)) => return,
            Err(e) => panic!("{e}"),
        };
        assert_eq!(rows.len(), 4);
        assert!(rows.iter().all(|r| r.ttft_speedup > 0.0 && r.ttft_compressed > 0.0));
        let csv = series(&rows);
        assert_eq!(csv.lines().count(), 1 + 4 * 6);
    }

    #[test]
    fn too_few_trials_rejected() {
        let model = RefragModel::<f32>::new(ModelConfig::tiny(10, 8, 9)).unwrap();
        let cfg = BenchConfig { trials: 5, ..BenchConfig::default() };
        assert!(microbench(&model, &[8], &[2], &cfg).is_err());
    }
}
