use std::io::Write;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{chunk_context, DataPoint};
use crate::error::{invalid, Error, Result};
use crate::model::RefragModel;
use crate::nn::Module;
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::training::expansion_count;

use super::policy::{PolicyInput, PolicyNet};
use super::search::rewards;
use super::{grpo_advantages, log_prob, policy_probs, sample_with, top_indices};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    /// Sequences sampled per data point (G).
    pub group_size: usize,
    /// PPO ratio clip.
    pub clip_eps: f64,
    pub lr: f64,
    pub steps: u64,
    /// Data points per step.
    pub batch: usize,
    /// Policy updates per batch of rollouts.
    pub inner_epochs: usize,
    /// Expanded fraction; `T' = round(pL)`.
    pub p: f64,
    pub k: usize,
    /// Recompute logits after every selection instead of once per example.
    pub recompute: bool,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            lr: 1e-4,
            steps: 100,
            batch: 4,
            inner_epochs: 2,
            p: 0.1,
            k: 8,
            recompute: false,
            seed: 0,
            adamw: AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() },
        }
    }
}

/// `G` action sequences for one data point with their rewards.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRollout {
    /// Index of the chunk-embedding matrix this rollout was drawn for.
    pub example: usize,
    pub actions: Vec<Vec<usize>>,
    /// `log pi_old` of each action, per sequence.
    pub old_logprobs: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
}

/// Policy logits for every state visited by `rollouts`. Without recompute a
/// single row of logits per example serves all steps.
fn policy_inputs<'a, T: Scalar>(
    chunks: &[&'a [T]],
    de: usize,
    rollouts: &[GroupRollout],
    recompute: bool,
) -> Vec<PolicyInput<'a, T>> {
    let mut out = Vec::new();
    for r in rollouts {
        let c = chunks[r.example];
        let l = c.len() / de;
        if recompute {
            for seq in &r.actions {
                let mut sel = vec![false; l];
                for &a in seq {
                    out.push(PolicyInput { chunks: c, selected: sel.clone() });
                    sel[a] = true;
                }
            }
        } else {
            out.push(PolicyInput { chunks: c, selected: vec![false; l] });
        }
    }
    out
}

/// Clipped surrogate
/// `J = mean over groups, sequences and steps of min(rho A, clip(rho, 1-eps, 1+eps) A)`
/// with `rho = pi / pi_old`, and its gradient with respect to the policy.
pub fn grpo_objective<T: Scalar>(
    policy: &PolicyNet<T>,
    chunks: &[&[T]],
    rollouts: &[GroupRollout],
    clip_eps: f64,
    recompute: bool,
) -> Result<(f64, PolicyNet<T>)> {
    let de = policy.input_dim();
    let inputs = policy_inputs(chunks, de, rollouts, recompute);
    let (logits, cache) = policy.forward(&inputs);
    let logits: Vec<f64> = logits.iter().map(|x| x.as_f64()).collect();
    let mut dlogits = vec![0.0; logits.len()];
    let terms: usize = rollouts.iter().map(|r| r.actions.iter().map(Vec::len).sum::<usize>()).sum();
    let mut grads = policy.zeroed();
    if terms == 0 {
        return Ok((0.0, grads));
    }
    let norm_groups = rollouts.len() as f64;
    let mut objective = 0.0;
    let mut row = 0;
    for r in rollouts {
        let l = chunks[r.example].len() / de;
        let g = r.actions.len() as f64;
        let base_row = row;
        for (seq, (acts, old)) in r.actions.iter().zip(&r.old_logprobs).enumerate() {
            let t_prime = acts.len() as f64;
            let mut sel = vec![false; l];
            for (t, &a) in acts.iter().enumerate() {
                let at = if recompute { row } else { base_row };
                let s = &logits[at * l..(at + 1) * l];
                let lp = log_prob(s, &sel, a)?;
                let ratio = (lp - old[t]).exp();
                let adv = r.advantages[seq];
                let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
                let w = 1.0 / (norm_groups * g * t_prime);
                let unclipped_term = ratio * adv;
                objective += w * unclipped_term.min(clipped * adv);
                if unclipped_term <= clipped * adv {
                    let probs = policy_probs(s, &sel)?;
                    let d = &mut dlogits[at * l..(at + 1) * l];
                    for (j, pj) in probs.iter().enumerate() {
                        let onehot = if j == a { 1.0 } else { 0.0 };
                        d[j] += w * adv * ratio * (onehot - pj);
                    }
                }
                sel[a] = true;
                if recompute {
                    row += 1;
                }
            }
        }
        if !recompute {
            row += 1;
        }
    }
    let dl: Vec<T> = dlogits.iter().map(|&x| T::lit(x)).collect();
    policy.backward(&cache, &dl, &mut grads);
    Ok((objective, grads))
}

/// One ascent step on the clipped surrogate.
pub fn grpo_step<T: Scalar>(
    policy: &mut PolicyNet<T>,
    optimizer: &mut AdamW<T>,
    chunks: &[&[T]],
    rollouts: &[GroupRollout],
    cfg: &GrpoConfig,
) -> Result<f64> {
    let (j, mut grads) = grpo_objective(policy, chunks, rollouts, cfg.clip_eps, cfg.recompute)?;
    for (_, t) in grads.named_params_mut("") {
        t.data.iter_mut().for_each(|x| *x = -*x);
    }
    optimizer.step(policy, &grads, cfg.lr, |_| true)?;
    Ok(j)
}

/// Chunk encoder outputs for the context of `dp`, `[L, encoder_dim]`.
pub fn chunk_features<T: Scalar>(model: &RefragModel<T>, dp: &DataPoint, k: usize) -> Result<Vec<T>> {
    let chunks = chunk_context(dp.context(), k, model.config.pad_id)?;
    Ok(model.encode_chunks(&chunks)?.into_iter().flat_map(|e| e.encoded).collect())
}

fn logits_for<T: Scalar>(policy: &PolicyNet<T>, chunks: &[T], selected: &[bool]) -> Vec<f64> {
    let (l, _) = policy.forward(&[PolicyInput { chunks, selected: selected.to_vec() }]);
    l.iter().map(|x| x.as_f64()).collect()
}

/// Samples `G` sequences for one data point and scores them.
pub fn rollout<T: Scalar>(
    policy: &PolicyNet<T>,
    model: &RefragModel<T>,
    dp: &DataPoint,
    features: &[T],
    example: usize,
    cfg: &GrpoConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GroupRollout> {
    let l = features.len() / policy.input_dim();
    let t_prime = expansion_count(cfg.p, l)?;
    let fixed = logits_for(policy, features, &vec![false; l]);
    let mut actions = Vec::with_capacity(cfg.group_size);
    let mut old_logprobs = Vec::with_capacity(cfg.group_size);
    for _ in 0..cfg.group_size {
        let mut visited = Vec::new();
        let seq = sample_with(l, t_prime, rng, |sel| {
            let s = if cfg.recompute { logits_for(policy, features, sel) } else { fixed.clone() };
            visited.push((s.clone(), sel.to_vec()));
            Ok(s)
        })?;
        let lps = seq.iter().zip(&visited).map(|(&a, (s, sel))| log_prob(s, sel, a)).collect::<Result<Vec<f64>>>()?;
        actions.push(seq);
        old_logprobs.push(lps);
    }
    let rs = rewards(model, dp, cfg.k, &actions)?;
    let advantages = grpo_advantages(&rs)?;
    Ok(GroupRollout { example, actions, old_logprobs, rewards: rs, advantages })
}

/// Deterministic selection: the policy's `T'` most likely chunks.
pub fn policy_select<T: Scalar>(policy: &PolicyNet<T>, features: &[T], t_prime: usize, recompute: bool) -> Result<Vec<usize>> {
    let l = features.len() / policy.input_dim();
    if t_prime > l {
        return Err(invalid(format!("T' = {t_prime} exceeds L = {l}")));
    }
    let mut out = if recompute {
        let mut sel = vec![false; l];
        let mut out = Vec::with_capacity(t_prime);
        for _ in 0..t_prime {
            let s = logits_for(policy, features, &sel);
            let p = policy_probs(&s, &sel)?;
            let best = top_indices(&p, 1)?[0];
            sel[best] = true;
            out.push(best);
        }
        out
    } else {
        top_indices(&logits_for(policy, features, &vec![false; l]), t_prime)?
    };
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyStepLog {
    pub step: u64,
    pub mean_reward: f64,
    pub objective: f64,
}

/// GRPO training of `policy` against the frozen `model` on `points`.
pub fn train_policy<T: Scalar>(
    model: &RefragModel<T>,
    policy: &mut PolicyNet<T>,
    points: &[DataPoint],
    cfg: &GrpoConfig,
    mut metrics: Option<&mut dyn Write>,
) -> Result<Vec<PolicyStepLog>> {
    if points.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    if cfg.group_size < 2 {
        return Err(invalid("group size must be at least 2"));
    }
    let features = points.iter().map(|dp| chunk_features(model, dp, cfg.k)).collect::<Result<Vec<_>>>()?;
    let mut optimizer = AdamW::new(cfg.adamw.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let idx: Vec<usize> = (0..points.len()).collect();
    let mut log = Vec::with_capacity(cfg.steps as usize);
    for step in 0..cfg.steps {
        let picked: Vec<usize> = idx.choose_multiple(&mut rng, cfg.batch.min(points.len())).copied().collect();
        let rollouts = picked
            .iter()
            .enumerate()
            .map(|(slot, &i)| rollout(policy, model, &points[i], &features[i], slot, cfg, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let chunks: Vec<&[T]> = picked.iter().map(|&i| features[i].as_slice()).collect();
        let mut objective = 0.0;
        for _ in 0..cfg.inner_epochs.max(1) {
            objective = grpo_step(policy, &mut optimizer, &chunks, &rollouts, cfg)?;
        }
        let n: usize = rollouts.iter().map(|r| r.rewards.len()).sum();
        let mean_reward = rollouts.iter().flat_map(|r| &r.rewards).sum::<f64>() / n as f64;
        let rec = PolicyStepLog { step: step + 1, mean_reward, objective };
        if let Some(w) = metrics.as_mut() {
            serde_json::to_writer(&mut **w, &rec)?;
            w.write_all(b"\n")?;
        }
        log.push(rec);
    }
    Ok(log)
}
