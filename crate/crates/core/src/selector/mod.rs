//! Selective compression: which chunks to hand the decoder as raw tokens.
//!
//! A policy emits one logit per chunk and picks `T'` distinct chunks one at a
//! time; already chosen chunks are masked out of the softmax. The policy is
//! trained with GRPO against the reward `-(mean NLL of the output)`.
//! Heuristic baselines rank chunks by their stand-alone perplexity.

pub mod compare;
pub mod grpo;
pub mod policy;
pub mod search;

use num_traits::Num;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use compare::{compare_selections, SelectionReport};
pub use grpo::{
    chunk_features, grpo_objective, grpo_step, policy_select, rollout, train_policy, GroupRollout, GrpoConfig, PolicyStepLog,
};
pub use policy::{PolicyConfig, PolicyInput, PolicyNet};
pub use search::{binomial, brute_force_best, chunk_scores, reward, rewards, BestSubset, SelectionProblem, SUBSET_LIMIT};

/// Probabilities `exp(s_i - n_i) / sum_j exp(s_j - n_j)` where `n_i = +inf`
/// for selected chunks. Masked entries are exactly zero.
pub fn policy_probs(logits: &[f64], selected: &[bool]) -> Result<Vec<f64>> {
    if logits.len() != selected.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} selection flags", logits.len()),
            got: selected.len().to_string(),
        });
    }
    let max = logits.iter().zip(selected).filter(|(_, &s)| !s).map(|(&x, _)| x).fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::AllMasked);
    }
    let mut p: Vec<f64> = logits.iter().zip(selected).map(|(&x, &s)| if s { 0.0 } else { (x - max).exp() }).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    Ok(p)
}

/// `log pi(action | selected)` under masked softmax.
pub fn log_prob(logits: &[f64], selected: &[bool], action: usize) -> Result<f64> {
    if selected[action] {
        return Err(invalid(format!("chunk {action} is already selected")));
    }
    let max = logits.iter().zip(selected).filter(|(_, &s)| !s).map(|(&x, _)| x).fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().zip(selected).filter(|(_, &s)| !s).map(|(&x, _)| (x - max).exp()).sum();
    Ok(logits[action] - max - z.ln())
}

/// Samples `t_prime` distinct chunks from fixed logits.
pub fn sample_sequence<R: Rng + ?Sized>(logits: &[f64], t_prime: usize, rng: &mut R) -> Result<Vec<usize>> {
    sample_with(logits.len(), t_prime, rng, |_| Ok(logits.to_vec()))
}

/// Sequential masked sampling; `logits_for(selected)` supplies the logits at
/// each step (constant when logits are not recomputed).
pub(crate) fn sample_with<R: Rng + ?Sized>(
    l: usize,
    t_prime: usize,
    rng: &mut R,
    mut logits_for: impl FnMut(&[bool]) -> Result<Vec<f64>>,
) -> Result<Vec<usize>> {
    if t_prime > l {
        return Err(invalid(format!("T' = {t_prime} exceeds L = {l}")));
    }
    let mut selected = vec![false; l];
    let mut out = Vec::with_capacity(t_prime);
    for _ in 0..t_prime {
        let p = policy_probs(&logits_for(&selected)?, &selected)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &pi) in p.iter().enumerate() {
            if pi > 0.0 {
                acc += pi;
                pick = Some(i);
                if u < acc {
                    break;
                }
            }
        }
        let i = pick.ok_or(Error::AllMasked)?;
        selected[i] = true;
        out.push(i);
    }
    Ok(out)
}

/// Greedy decoding of the policy: the `t_prime` best logits, ties to lower index.
pub fn top_indices(scores: &[f64], t_prime: usize) -> Result<Vec<usize>> {
    if t_prime > scores.len() {
        return Err(invalid(format!("T' = {t_prime} exceeds L = {}", scores.len())));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(t_prime);
    Ok(idx)
}

/// `(r_i - mean) / (std + 1e-8)` with the population standard deviation.
pub fn grpo_advantages(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(invalid(format!("group size {} must be at least 2", rewards.len())));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + 1e-8)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Heuristic {
    /// Expand the highest-perplexity chunks (compress the easy ones).
    PplDesc,
    /// Expand the lowest-perplexity chunks.
    PplAsc,
    Random,
}

/// Expansion set chosen by a heuristic from per-chunk scores (mean NLL of
/// each chunk on its own). Ties go to the lower index. Returned ascending.
pub fn heuristic_select<R: Rng + ?Sized>(method: Heuristic, scores: &[f64], t_prime: usize, rng: &mut R) -> Result<Vec<usize>> {
    let l = scores.len();
    if t_prime > l {
        return Err(invalid(format!("T' = {t_prime} exceeds L = {l}")));
    }
    let mut out = match method {
        Heuristic::PplDesc => top_indices(scores, t_prime)?,
        Heuristic::PplAsc => {
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            top_indices(&neg, t_prime)?
        }
        Heuristic::Random => rand::seq::index::sample(rng, l, t_prime).into_vec(),
    };
    out.sort_unstable();
    Ok(out)
}

/// Effective compression `k / (1 - p + k p)` when a fraction `p` of chunks is expanded.
pub fn effective_rate<N: Num + PartialOrd + Clone>(k: N, p: N) -> Result<N> {
    if k < N::one() {
        return Err(invalid("k must be at least 1"));
    }
    if p < N::zero() || p > N::one() {
        return Err(invalid("p must lie in [0, 1]"));
    }
    let denom = N::one() - p.clone() + k.clone() * p;
    Ok(k / denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn probs_examples() {
        assert_eq!(policy_probs(&[0.0; 3], &[false, true, false]).unwrap(), vec![0.5, 0.0, 0.5]);
        assert_eq!(policy_probs(&[0.3, -1.0, 2.0], &[true, true, false]).unwrap(), vec![0.0, 0.0, 1.0]);
        let p = policy_probs(&[2f64.ln(), 0.0, 0.0], &[false; 3]).unwrap();
        assert!(close(&p, &[0.5, 0.25, 0.25], 1e-15));
        assert!(matches!(policy_probs(&[1.0, 2.0], &[true, true]), Err(Error::AllMasked)));
    }

    #[test]
    fn sampling_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_sequence(&[0.0; 4], 0, &mut rng).unwrap().is_empty());
        let mut perm = sample_sequence(&[0.1, 0.5, -0.2, 0.0, 1.0], 5, &mut rng).unwrap();
        perm.sort_unstable();
        assert_eq!(perm, vec![0, 1, 2, 3, 4]);
        assert!(sample_sequence(&[0.0; 2], 3, &mut rng).is_err());
    }

    #[test]
    fn dominant_logit_is_almost_always_chosen() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = [-10.0, -10.0, 10.0, -10.0];
        let hits = (0..10_000).filter(|_| sample_sequence(&logits, 1, &mut rng).unwrap()[0] == 2).count();
        assert!(hits as f64 / 1e4 > 0.999);
    }

    #[test]
    fn advantage_examples() {
        let a = grpo_advantages(&[1.0, 2.0, 3.0]).unwrap();
        let s = (2.0f64 / 3.0).sqrt();
        assert!(close(&a, &[-1.0 / (s + 1e-8), 0.0, 1.0 / (s + 1e-8)], 1e-12));
        assert!(close(&a, &[-1.2247, 0.0, 1.2247], 1e-4));
        assert_eq!(grpo_advantages(&[4.0; 5]).unwrap(), vec![0.0; 5]);
        assert!(close(&grpo_advantages(&[0.0, 1.0]).unwrap(), &[-1.0, 1.0], 1e-7));
        assert!(grpo_advantages(&[1.0]).is_err());
    }

    #[test]
    fn heuristic_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = [3.0, 1.0, 2.0];
        assert_eq!(heuristic_select(Heuristic::PplDesc, &s, 1, &mut rng).unwrap(), vec![0]);
        assert_eq!(heuristic_select(Heuristic::PplAsc, &s, 1, &mut rng).unwrap(), vec![1]);
        assert_eq!(heuristic_select(Heuristic::PplDesc, &[2.0, 2.0], 1, &mut rng).unwrap(), vec![0]);
        assert_eq!(heuristic_select(Heuristic::PplAsc, &[2.0, 2.0], 1, &mut rng).unwrap(), vec![0]);
        assert!(heuristic_select(Heuristic::Random, &s, 4, &mut rng).is_err());
        assert_eq!(heuristic_select(Heuristic::Random, &s, 3, &mut rng).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn effective_rate_examples() {
        let r = |n: i64, d: i64| BigRational::new(BigInt::from(n), BigInt::from(d));
        assert_eq!(effective_rate(r(16, 1), r(1, 16)).unwrap(), r(256, 31));
        assert!((effective_rate(16.0_f64, 1.0 / 16.0).unwrap() - 8.258).abs() < 1e-3);
        assert_eq!(effective_rate(r(16, 1), r(0, 1)).unwrap(), r(16, 1));
        assert_eq!(effective_rate(r(16, 1), r(1, 1)).unwrap(), r(1, 1));
        assert!((effective_rate(8.0_f64, 0.1).unwrap() - 8.0 / 1.7).abs() < 1e-12);
        assert!(effective_rate(0.5, 0.1).is_err());
        assert!(effective_rate(8.0, 1.1).is_err());
    }

    proptest! {
        #[test]
        fn masked_probs_are_normalised(
            logits in proptest::collection::vec(-30.0f64..30.0, 1..16),
            mask_bits in any::<u16>(),
        ) {
            let l = logits.len();
            let mut sel: Vec<bool> = (0..l).map(|i| mask_bits >> i & 1 == 1).collect();
            if sel.iter().all(|&s| s) { sel[0] = false; }
            let p = policy_probs(&logits, &sel).unwrap();
            for (pi, s) in p.iter().zip(&sel) {
                if *s { prop_assert_eq!(*pi, 0.0); }
            }
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }

        #[test]
        fn sampled_sequences_are_distinct(seed in any::<u64>(), l in 1usize..12, frac in 0.0f64..=1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits: Vec<f64> = (0..l).map(|_| rng.random_range(-3.0..3.0)).collect();
            let t = (frac * l as f64).floor() as usize;
            let s = sample_sequence(&logits, t, &mut rng).unwrap();
            let mut d = s.clone();
            d.sort_unstable();
            d.dedup();
            prop_assert_eq!(d.len(), t);
        }

        #[test]
        fn advantages_are_standardised(r in proptest::collection::vec(-5.0f64..5.0, 2..20)) {
            let a = grpo_advantages(&r).unwrap();
            let g = a.len() as f64;
            prop_assert!(a.iter().sum::<f64>().abs() <= 1e-9 * g);
            let spread = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - r.iter().cloned().fold(f64::INFINITY, f64::min);
            if spread > 1e-3 {
                let sd = (a.iter().map(|x| x * x).sum::<f64>() / g).sqrt();
                prop_assert!((sd - 1.0).abs() < 1e-6);
            }
        }

        #[test]
        fn effective_rate_is_monotone(k in 1.0f64..64.0, p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0) {
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let a = effective_rate(k, lo).unwrap();
            let b = effective_rate(k, hi).unwrap();
            prop_assert!(b <= a + 1e-12);
            prop_assert!(a <= k + 1e-12 && b >= 1.0 - 1e-12);
        }
    }
}
