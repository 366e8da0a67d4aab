//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p refrag-core --test acceptance -- 1 4 12` runs a subset.

mod common;
#[path = "acceptance/directional.rs"]
mod directional;

use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use refrag_core::corpus::{SyntheticCorpus, Vocab};
use refrag_core::curriculum::CurriculumSchedule;
use refrag_core::model::{ModelConfig, RefragModel};
use refrag_core::nn::Module;
use refrag_core::perfmodel::{
    acceleration_report, kv_bytes, microbench, prefill_flops, ttft_ratio, BenchConfig, HardwareProfile, ShapeProfile,
};
use refrag_core::selector::{
    effective_rate, grpo_objective, log_prob, policy_probs, GroupRollout, PolicyConfig, PolicyInput, PolicyNet,
};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.2?}, limit {limit:?}"))
}

fn big(x: u64) -> BigInt {
    BigInt::from(x)
}

fn rat(x: u64) -> BigRational {
    BigRational::from_integer(big(x))
}

fn c1_ttft_ratio() -> Outcome {
    let t = Instant::now();
    let hw = HardwareProfile::new(989e12, 3.35e12).map_err(|e| e.to_string())?;
    let a = acceleration_report::<BigRational>(&hw, &ShapeProfile::llama2_7b(16384, 2048, 16)).map_err(|e| e.to_string())?;
    let expected = BigRational::new(big(128), big(5));
    ensure(a.ttft == expected, || format!("ttft ratio {} != 128/5", a.ttft))?;
    let mut worst: f64 = 0.0;
    for k in [2u64, 4, 8, 16, 32] {
        let short = ttft_ratio(k as f64, 1.0, 4096.0);
        let long = ttft_ratio(k as f64, 1e12, 4096.0);
        let e_short = (short - k as f64).abs() / k as f64;
        let e_long = (long - (k * k) as f64).abs() / (k * k) as f64;
        ensure(e_short < 0.01, || format!("k={k}: short-context ratio {short} not within 1% of {k}"))?;
        ensure(e_long < 0.01, || format!("k={k}: long-context ratio {long} not within 1% of {}", k * k))?;
        worst = worst.max(e_short).max(e_long);
    }
    within(t, Duration::from_secs(1))?;
    Ok(format!("ratio = {} exactly; limits k and k^2 within {:.2e}", a.ttft, worst))
}

fn c2_closed_forms() -> Outcome {
    let t = Instant::now();
    let kv = kv_bytes(4096, 32, 1, 2048, 2048).map_err(|e| e.to_string())?;
    ensure(kv == 2_147_483_648, || format!("kv_bytes = {kv}"))?;
    let unit = prefill_flops(1, 1, 1, 1).map_err(|e| e.to_string())?;
    ensure(unit == 28, || format!("prefill unit case = {unit}"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 2000;
    for _ in 0..n {
        let (b, s, d, l, o) = (
            rng.random_range(1..64u64),
            rng.random_range(1..200_000u64),
            rng.random_range(1..16_384u64),
            rng.random_range(1..128u64),
            rng.random_range(0..16_384u64),
        );
        let f = prefill_flops(b, s, d, l).map_err(|e| e.to_string())?;
        let of = (big(24) * big(d) * big(d) + big(4) * big(d) * big(s)) * big(l) * big(b) * big(s);
        ensure(BigInt::from(f) == of, || format!("prefill_flops({b},{s},{d},{l}) = {f}, oracle {of}"))?;
        let m = kv_bytes(d, l, b, s, o).map_err(|e| e.to_string())?;
        let om = big(4) * big(d) * big(l) * big(b) * (big(s) + big(o));
        ensure(BigInt::from(m) == om, || format!("kv_bytes({d},{l},{b},{s},{o}) = {m}, oracle {om}"))?;
        let k = rng.random_range(1..64u64);
        let r = ttft_ratio(rat(k), rat(s), rat(d));
        let or =
            rat(k * k) * (rat(6) * rat(d) * rat(s) + rat(s) * rat(s)) / (rat(6) * rat(d) * rat(s) * rat(k) + rat(s) * rat(s));
        ensure(r == or, || format!("ttft_ratio({k},{s},{d}) = {r}, oracle {or}"))?;
    }
    within(t, Duration::from_secs(1))?;
    Ok(format!("headline values exact; {n} random shapes match big-integer oracles"))
}

fn c3_effective_rate() -> Outcome {
    let t = Instant::now();
    let r = effective_rate(16.0_f64, 1.0 / 16.0).map_err(|e| e.to_string())?;
    ensure((r - 256.0 / 31.0).abs() < 1e-3, || format!("effective_rate(16, 1/16) = {r}"))?;
    let exact = effective_rate(rat(16), BigRational::new(big(1), big(16))).map_err(|e| e.to_string())?;
    ensure(exact == BigRational::new(big(256), big(31)), || format!("exact rate {exact}"))?;
    for k in [1u64, 2, 8, 16, 32] {
        let at0 = effective_rate(rat(k), rat(0)).map_err(|e| e.to_string())?;
        let at1 = effective_rate(rat(k), rat(1)).map_err(|e| e.to_string())?;
        ensure(at0 == rat(k) && at1 == rat(1), || format!("k={k}: boundaries {at0}, {at1}"))?;
    }
    within(t, Duration::from_secs(1))?;
    Ok(format!("rate = {r:.6} (256/31 exactly in rationals); p=0 gives k, p=1 gives 1"))
}

fn c4_curriculum_table() -> Outcome {
    let t = Instant::now();
    let table: [(usize, [u64; 9], u64); 9] = [
        (1, [1333, 445, 148, 49, 16, 6, 2, 1, 0], 2000),
        (2, [333, 298, 267, 238, 213, 191, 171, 153, 137], 2000),
        (4, [83, 102, 126, 156, 193, 238, 293, 362, 447], 2000),
        (8, [20, 35, 61, 106, 185, 324, 565, 985, 1719], 4000),
        (16, [5, 11, 23, 48, 103, 220, 468, 997, 2125], 4000),
        (32, [1, 3, 7, 19, 50, 133, 353, 939, 2496], 4000),
        (64, [1, 3, 9, 25, 73, 212, 618, 1802, 5259], 8000),
        (128, [1, 3, 9, 25, 73, 212, 618, 1802, 5259], 8000),
        (256, [1, 3, 9, 25, 73, 212, 618, 1802, 5259], 8000),
    ];
    let s = CurriculumSchedule::builtin();
    ensure(s.rows.len() == table.len(), || format!("{} rows", s.rows.len()))?;
    for ((m, counts, total), row) in table.iter().zip(&s.rows) {
        let label = format!("{m}×8");
        ensure(row.label() == label, || format!("row label {} != {label}", row.label()))?;
        ensure(&row.counts == counts, || format!("row {label}: {:?}", row.counts))?;
        ensure(row.total == *total, || format!("row {label}: total {}", row.total))?;
    }
    let first = s.row("1×8").ok_or("row 1×8 missing")?;
    ensure(first.count_sum() == 2000, || format!("row 1×8 sums to {}", first.count_sum()))?;
    within(t, Duration::from_secs(1))?;
    let totals: Vec<u64> = s.rows.iter().map(|r| r.total).collect();
    Ok(format!("9 rows verbatim; totals {totals:?}"))
}

fn c10_model_invariants() -> Outcome {
    let t = Instant::now();
    for seed in 0..100 {
        common::check_model_invariants(seed).map_err(|e| format!("seed {seed}: {e}"))?;
    }
    within(t, Duration::from_secs(60))?;
    Ok(format!("100 random shapes in {:.1?}", t.elapsed()))
}

fn random_policy(seed: u64, input_dim: usize, l: usize) -> PolicyNet<f64> {
    let mut cfg = PolicyConfig::new(input_dim, l);
    cfg.dim = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = PolicyNet::new(&cfg, &mut rng);
    for (_, t) in p.named_params_mut("") {
        for x in t.data.iter_mut() {
            *x = rng.random_range(-0.6..0.6);
        }
    }
    p
}

fn policy_logits(p: &PolicyNet<f64>, chunks: &[f64], selected: &[bool]) -> Vec<f64> {
    p.forward(&[PolicyInput { chunks, selected: selected.to_vec() }]).0
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Worst relative error between the analytic surrogate gradient and central
/// differences at L=4, T'=2, G=2.
fn grpo_fd(recompute: bool, seed: u64) -> Result<f64, String> {
    let (dim, l, t_prime, g) = (6, 4, 2, 2);
    let mut p = random_policy(seed, dim, l);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let c: Vec<f64> = (0..l * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut actions = Vec::new();
    let mut old = Vec::new();
    for _ in 0..g {
        let mut sel = vec![false; l];
        let fixed = policy_logits(&p, &c, &sel);
        let (mut seq, mut lp) = (Vec::new(), Vec::new());
        for _ in 0..t_prime {
            let logits = if recompute { policy_logits(&p, &c, &sel) } else { fixed.clone() };
            let a = draw(&policy_probs(&logits, &sel).map_err(|e| e.to_string())?, &mut rng);
            // Offset keeps the ratio away from one but inside the clip range.
            lp.push(log_prob(&logits, &sel, a).map_err(|e| e.to_string())? + 0.05);
            sel[a] = true;
            seq.push(a);
        }
        actions.push(seq);
        old.push(lp);
    }
    let r = GroupRollout { example: 0, actions, old_logprobs: old, rewards: vec![0.3, -0.2], advantages: vec![1.0, -1.0] };
    let objective = |p: &PolicyNet<f64>| {
        grpo_objective(p, &[&c], std::slice::from_ref(&r), 0.2, recompute).map(|(j, _)| j).map_err(|e| e.to_string())
    };
    let (_, grad) = grpo_objective(&p, &[&c], std::slice::from_ref(&r), 0.2, recompute).map_err(|e| e.to_string())?;
    let analytic: Vec<(String, Vec<f64>)> = grad.named_params("").into_iter().map(|(n, t)| (n, t.data.clone())).collect();
    let h = 1e-3;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (name, an) in &analytic {
        for idx in [0, an.len() / 2, an.len() - 1] {
            let shift = |p: &mut PolicyNet<f64>, delta: f64| {
                let (_, t) = p.named_params_mut("").into_iter().find(|(n, _)| n == name).unwrap();
                t.data[idx] += delta;
            };
            // Fourth-order central stencil: truncation O(h^4), roundoff O(eps / h).
            let mut at = |delta: f64| -> Result<f64, String> {
                shift(&mut p, delta);
                let j = objective(&p);
                shift(&mut p, -delta);
                j
            };
            let fd = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            let scale = fd.abs().max(an[idx].abs());
            if scale > 1e-7 {
                worst = worst.max((fd - an[idx]).abs() / scale);
                checked += 1;
            }
        }
    }
    ensure(checked > 10, || format!("only {checked} nonzero gradient entries"))?;
    Ok(worst)
}

fn c11_grpo_and_masking() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..3 {
        for recompute in [false, true] {
            let e = grpo_fd(recompute, seed)?;
            ensure(e < 1e-4, || format!("seed {seed} recompute={recompute}: relative error {e:.3e}"))?;
            worst = worst.max(e);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for state in 0..1000 {
        let l = rng.random_range(1..40usize);
        let logits: Vec<f64> = (0..l).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut sel: Vec<bool> = (0..l).map(|_| rng.random_bool(0.4)).collect();
        let free = rng.random_range(0..l);
        sel[free] = false;
        let p = policy_probs(&logits, &sel).map_err(|e| format!("state {state}: {e}"))?;
        let z: f64 = p.iter().sum();
        ensure((z - 1.0).abs() < 1e-12, || format!("state {state}: probabilities sum to {z}"))?;
        for i in 0..l {
            if sel[i] {
                ensure(p[i] == 0.0, || format!("state {state}: masked chunk {i} has p = {}", p[i]))?;
            } else {
                ensure(p[i] >= 0.0, || format!("state {state}: negative probability"))?;
                let lp = log_prob(&logits, &sel, i).map_err(|e| e.to_string())?;
                ensure((lp.exp() - p[i]).abs() < 1e-12, || format!("state {state}: log_prob disagrees with softmax"))?;
            }
        }
        let all = vec![true; l];
        ensure(policy_probs(&logits, &all).is_err(), || format!("state {state}: fully masked state accepted"))?;
    }
    Ok(format!("worst FD relative error {worst:.2e}; 1000 masked states valid ({:.1?})", t.elapsed()))
}

fn c12_microbench() -> Outcome {
    let vocab = Vocab::from_chars(SyntheticCorpus::alphabet()).map_err(|e| e.to_string())?;
    let mut cfg = ModelConfig::toy(vocab.size(), vocab.pad_id(), vocab.bos_id());
    cfg.decoder.max_positions = 2048 + 1 + 8;
    let model = RefragModel::<f32>::new(cfg).map_err(|e| e.to_string())?;
    let ks = [2, 4, 8];
    let rows = microbench(&model, &[2048], &ks, &BenchConfig::default()).map_err(|e| e.to_string())?;
    let cached = |k: usize| rows.iter().find(|r| r.k == k && r.cached).ok_or(format!("no cached row for k={k}"));
    let uncached = |k: usize| rows.iter().find(|r| r.k == k && !r.cached).ok_or(format!("no uncached row for k={k}"));
    let speedups: Vec<f64> = ks.iter().map(|&k| cached(k).map(|r| r.ttft_speedup)).collect::<Result<_, _>>()?;
    let detail = format!("cached TTFT speedup k=2,4,8: {:.2}x {:.2}x {:.2}x", speedups[0], speedups[1], speedups[2]);
    ensure(speedups[2] >= 2.0, || format!("{detail}; k=8 below 2x"))?;
    ensure(speedups.windows(2).all(|w| w[1] >= w[0]), || format!("{detail}; not monotone in k"))?;
    for &k in &ks {
        let (c, u) = (cached(k)?, uncached(k)?);
        ensure(c.ttft_speedup >= u.ttft_speedup, || {
            format!("{detail}; k={k}: cached {:.2}x < uncached {:.2}x", c.ttft_speedup, u.ttft_speedup)
        })?;
    }
    Ok(detail)
}

type Criterion = (u32, &'static str, fn() -> Outcome);

fn main() {
    let criteria: Vec<Criterion> = vec![
        (1, "TTFT acceleration ratio", c1_ttft_ratio),
        (2, "closed-form FLOPs and KV bytes", c2_closed_forms),
        (3, "effective compression rate", c3_effective_rate),
        (4, "builtin curriculum schedule", c4_curriculum_table),
        (5, "curriculum ablation", directional::c5_curriculum),
        (6, "reconstruction-init ablation", directional::c6_recon_init),
        (7, "value of compressed context", directional::c7_context_value),
        (8, "selection policies", directional::c8_selection),
        (9, "compression-rate ordering", directional::c9_rate_ordering),
        (10, "model invariants", c10_model_invariants),
        (11, "GRPO gradient and masked softmax", c11_grpo_and_masking),
        (12, "toy latency microbenchmark", c12_microbench),
    ];
    let only: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = run();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {id:>2} {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {id:>2} {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
