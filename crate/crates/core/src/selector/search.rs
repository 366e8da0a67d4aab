use crate::corpus::{chunk_context, DataPoint};
use crate::error::{Error, Result};
use crate::model::{Example, RefragModel};
use crate::scalar::Scalar;
use crate::training::cpt_example;

/// Default cap on enumerated subsets.
pub const SUBSET_LIMIT: u128 = 100_000;

/// `-(mean NLL of the output)` with the chunks in `selection` expanded.
pub fn reward<T: Scalar>(model: &RefragModel<T>, dp: &DataPoint, k: usize, selection: &[usize]) -> Result<f64> {
    Ok(rewards(model, dp, k, std::slice::from_ref(&selection.to_vec()))?[0])
}

/// Rewards for several selections of one data point, evaluated in batches.
pub fn rewards<T: Scalar>(model: &RefragModel<T>, dp: &DataPoint, k: usize, selections: &[Vec<usize>]) -> Result<Vec<f64>> {
    let (bos, pad) = (model.config.bos_id, model.config.pad_id);
    let mut out = Vec::with_capacity(selections.len());
    for group in selections.chunks(32) {
        let examples = group
            .iter()
            .map(|sel| {
                let mut sel = sel.clone();
                sel.sort_unstable();
                cpt_example(bos, pad, dp, k, &sel)
            })
            .collect::<Result<Vec<_>>>()?;
        for nll in model.batch_nll(&examples)? {
            out.push(-nll.iter().sum::<f64>() / nll.len().max(1) as f64);
        }
    }
    Ok(out)
}

/// Mean NLL of each chunk's own tokens under the decoder alone, with no
/// surrounding context.
pub fn chunk_scores<T: Scalar>(model: &RefragModel<T>, dp: &DataPoint, k: usize) -> Result<Vec<f64>> {
    let chunks = chunk_context(dp.context(), k, model.config.pad_id)?;
    let examples: Vec<Example> = chunks.iter().map(|c| Example::language_model(model.config.bos_id, c.real_tokens())).collect();
    Ok(model.batch_nll(&examples)?.into_iter().map(|v| v.iter().sum::<f64>() / v.len().max(1) as f64).collect())
}

/// `C(n, r)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, r: usize) -> u128 {
    if r > n {
        return 0;
    }
    let r = r.min(n - r);
    let mut acc: u128 = 1;
    for i in 0..r {
        // acc * (n - i) / (i + 1) stays integral at every step.
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// All `r`-subsets of `0..n` in lexicographic order.
pub fn subsets(n: usize, r: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if r > n {
        return out;
    }
    let mut cur: Vec<usize> = (0..r).collect();
    loop {
        out.push(cur.clone());
        let Some(i) = (0..r).rev().find(|&i| cur[i] < n - r + i) else { break };
        cur[i] += 1;
        for j in i + 1..r {
            cur[j] = cur[j - 1] + 1;
        }
    }
    out
}

/// The reward-maximising expansion set found by exhaustive search.
#[derive(Clone, Debug, PartialEq)]
pub struct BestSubset {
    pub selection: Vec<usize>,
    pub reward: f64,
    /// Every enumerated subset with its reward.
    pub all: Vec<(Vec<usize>, f64)>,
}

impl BestSubset {
    /// Mean reward of a uniformly random `T'`-subset.
    pub fn mean_reward(&self) -> f64 {
        self.all.iter().map(|(_, r)| r).sum::<f64>() / self.all.len() as f64
    }
}

/// Enumerates every `t_prime`-subset of the chunks and keeps the best one
/// (ties go to the lexicographically first subset).
pub fn brute_force_best<T: Scalar>(
    model: &RefragModel<T>,
    dp: &DataPoint,
    k: usize,
    t_prime: usize,
    limit: u128,
) -> Result<BestSubset> {
    let l = dp.s.div_ceil(k);
    if t_prime > l {
        return Err(Error::InvalidArgument(format!("T' = {t_prime} exceeds L = {l}")));
    }
    let count = binomial(l, t_prime);
    if count > limit {
        return Err(Error::CombinatorialBlowup { n: l, r: t_prime, count, limit });
    }
    let sets = subsets(l, t_prime);
    let rs = rewards(model, dp, k, &sets)?;
    let mut best = 0;
    for (i, &r) in rs.iter().enumerate() {
        if r > rs[best] {
            best = i;
        }
    }
    Ok(BestSubset { selection: sets[best].clone(), reward: rs[best], all: sets.into_iter().zip(rs).collect() })
}

/// A selection task: one held-out data point at chunk size `k`.
#[derive(Clone, Debug)]
pub struct SelectionProblem {
    pub datapoint: DataPoint,
    pub k: usize,
}

impl SelectionProblem {
    pub fn chunks(&self) -> usize {
        self.datapoint.s.div_ceil(self.k)
    }
}
