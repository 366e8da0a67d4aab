use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DataPoint;
use crate::error::{Error, Result};
use crate::model::RefragModel;
use crate::scalar::Scalar;
use crate::training::expansion_count;

use super::grpo::{chunk_features, policy_select};
use super::policy::PolicyNet;
use super::search::{binomial, brute_force_best, chunk_scores, reward, rewards};
use super::{heuristic_select, Heuristic};

/// Mean reward of each selection method over a set of data points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub p: f64,
    pub t_prime: usize,
    pub points: usize,
    /// Exhaustive optimum; `None` when there are too many subsets.
    pub best: Option<f64>,
    /// Uniformly random subset: exact expectation when enumerable, otherwise
    /// a seeded sample of 32 subsets per point.
    pub random: f64,
    pub ppl_desc: f64,
    pub ppl_asc: f64,
    pub policy: Option<f64>,
}

/// Scores random, perplexity-ranked and (optionally) policy selections of
/// `round(pL)` chunks against the exhaustive optimum.
pub fn compare_selections<T: Scalar>(
    model: &RefragModel<T>,
    points: &[DataPoint],
    k: usize,
    p: f64,
    policy: Option<(&PolicyNet<T>, bool)>,
    limit: u128,
    seed: u64,
) -> Result<SelectionReport> {
    let first = points.first().ok_or(Error::EmptyEvalSet)?;
    let l = first.s.div_ceil(k);
    let t_prime = expansion_count(p, l)?;
    let enumerable = binomial(l, t_prime) <= limit;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut best, mut random, mut desc, mut asc, mut pol) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dp in points {
        if dp.s.div_ceil(k) != l {
            return Err(Error::InvalidArgument("all data points must share one context length".into()));
        }
        if enumerable {
            let b = brute_force_best(model, dp, k, t_prime, limit)?;
            best += b.reward;
            random += b.mean_reward();
        } else {
            let draws = (0..32)
                .map(|_| heuristic_select(Heuristic::Random, &vec![0.0; l], t_prime, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            random += rewards(model, dp, k, &draws)?.iter().sum::<f64>() / draws.len() as f64;
        }
        let scores = chunk_scores(model, dp, k)?;
        desc += reward(model, dp, k, &heuristic_select(Heuristic::PplDesc, &scores, t_prime, &mut rng)?)?;
        asc += reward(model, dp, k, &heuristic_select(Heuristic::PplAsc, &scores, t_prime, &mut rng)?)?;
        if let Some((net, recompute)) = policy {
            let features = chunk_features(model, dp, k)?;
            pol += reward(model, dp, k, &policy_select(net, &features, t_prime, recompute)?)?;
        }
    }
    let n = points.len() as f64;
    Ok(SelectionReport {
        p,
        t_prime,
        points: points.len(),
        best: enumerable.then_some(best / n),
        random: random / n,
        ppl_desc: desc / n,
        ppl_asc: asc / n,
        policy: policy.map(|_| pol / n),
    })
}
