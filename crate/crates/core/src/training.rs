//! Training stages: decoder pretraining, frozen-decoder reconstruction,
//! continual pretraining (next-paragraph prediction) and the mixed-input
//! fine-tune, plus held-out evaluation under several context policies.
//!
//! A run is fully determined by its config seed: the example plan (which
//! difficulty each example has, in curriculum order) is fixed up front and
//! each step draws its windows from an RNG derived from `(seed, step)`, so a
//! run resumed from a checkpoint replays the same batches.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::ModelCheckpoint;
use crate::corpus::{chunk_context, DataPoint, TokenId};
use crate::curriculum::{sample_stage, CurriculumSchedule, STAGES};
use crate::error::{invalid, Error, Result};
use crate::model::{Example, RefragModel, Row, Trainable};
use crate::nn::Module;
use crate::optim::{AdamW, AdamWConfig, LrSchedule};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Plain next-token prediction for the decoder alone.
    Pretrain,
    Reconstruction,
    Cpt,
    MixedFinetune,
    Policy,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Reconstruction => "reconstruction",
            Stage::Cpt => "cpt",
            Stage::MixedFinetune => "mixed_finetune",
            Stage::Policy => "policy",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub batch_size: usize,
    /// Passes over each curriculum stage before the next stage starts.
    pub epochs: usize,
    /// Fixed optimizer step count; `None` derives it from the plan and batch size.
    pub steps: Option<u64>,
    pub freeze_decoder: bool,
    pub k: usize,
    /// Context tokens (for reconstruction: longest reconstructed span; for
    /// pretraining: sequence length).
    pub s: usize,
    /// Output tokens predicted after the context.
    pub o: usize,
    /// Fraction of chunks left uncompressed in the mixed fine-tune.
    pub p: f64,
    /// Examples per run when no curriculum is used and `steps` is unset.
    pub examples: usize,
    pub seed: u64,
    pub adamw: AdamWConfig,
}

impl TrainConfig {
    fn base(stage: Stage, peak_lr: f64, k: usize, s: usize, o: usize) -> Self {
        Self {
            stage,
            peak_lr,
            warmup_fraction: 0.04,
            batch_size: 32,
            epochs: 4,
            steps: None,
            freeze_decoder: stage == Stage::Reconstruction,
            k,
            s,
            o,
            p: 0.0,
            examples: 0,
            seed: 0,
            adamw: AdamWConfig::default(),
        }
    }

    pub fn pretrain(seq_len: usize, steps: u64) -> Self {
        Self { steps: Some(steps), ..Self::base(Stage::Pretrain, 1e-3, 1, seq_len, 0) }
    }

    /// Reconstruction at peak lr 2e-4.
    pub fn reconstruction(k: usize, s: usize) -> Self {
        Self::base(Stage::Reconstruction, 2e-4, k, s, 0)
    }

    /// Next-paragraph prediction at peak lr 5e-5.
    pub fn cpt(k: usize, s: usize, o: usize) -> Self {
        Self::base(Stage::Cpt, 5e-5, k, s, o)
    }

    /// Mixed-input fine-tune, default `p = 0.1`.
    pub fn mixed(k: usize, s: usize, o: usize, p: f64) -> Self {
        Self { p, ..Self::base(Stage::MixedFinetune, 5e-5, k, s, o) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage == Stage::Reconstruction && !self.freeze_decoder {
            return Err(invalid("reconstruction requires freeze_decoder = true"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(invalid(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction)));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(invalid(format!("p = {} outside [0, 1]", self.p)));
        }
        if self.batch_size == 0 || self.k == 0 || self.s == 0 {
            return Err(invalid("batch_size, k and s must be positive"));
        }
        if matches!(self.stage, Stage::Cpt | Stage::MixedFinetune) && self.o == 0 {
            return Err(invalid("o must be positive for next-paragraph prediction"));
        }
        if self.stage == Stage::Policy {
            return Err(invalid("policy training lives in the selector module"));
        }
        Ok(())
    }

    pub fn trainable(&self) -> Trainable {
        match self.stage {
            Stage::Pretrain => Trainable::DECODER_ONLY,
            _ if self.freeze_decoder => Trainable::ENCODER_SIDE,
            _ => Trainable::ALL,
        }
    }

    /// Chunks covering the full context.
    pub fn max_chunks(&self) -> usize {
        self.s.div_ceil(self.k)
    }
}

/// `round(p * l)` chunks to expand.
pub fn expansion_count(p: f64, l: usize) -> Result<usize> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("p = {p} outside [0, 1]")));
    }
    let n = (p * l as f64).round() as usize;
    if n > l {
        return Err(invalid(format!("round(pL) = {n} exceeds L = {l}")));
    }
    Ok(n)
}

/// Decoder rows for a chunked context: `Soft(j)` for the j-th compressed
/// chunk, raw tokens for expanded ones. Returns the rows and the compressed
/// chunks' tokens in order.
pub fn context_rows(
    context: &[TokenId],
    k: usize,
    pad_id: TokenId,
    expansion: &[usize],
) -> Result<(Vec<Row>, Vec<Vec<TokenId>>)> {
    let chunks = chunk_context(context, k, pad_id)?;
    let mut seen = vec![false; chunks.len()];
    for &i in expansion {
        if i >= chunks.len() {
            return Err(Error::IndexOutOfRange { index: i, len: chunks.len() });
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(Error::DuplicateIndex(i));
        }
    }
    let mut rows = Vec::new();
    let mut compressed = Vec::new();
    for (c, expanded) in chunks.into_iter().zip(seen) {
        if expanded {
            rows.extend(c.tokens.iter().map(|&t| Row::Token(t)));
        } else {
            rows.push(Row::Soft(compressed.len()));
            compressed.push(c.tokens);
        }
    }
    Ok((rows, compressed))
}

/// Reconstruct `window` from its chunk embeddings alone. Pad positions of a
/// short tail chunk are not targets.
pub fn reconstruction_example(bos: TokenId, pad: TokenId, window: &[TokenId], k: usize) -> Result<Example> {
    let (rows, chunks) = context_rows(window, k, pad, &[])?;
    Ok(Example::continuation(bos, chunks, &rows, window))
}

/// Predict the output of `dp` from its (partly) compressed context.
pub fn cpt_example(bos: TokenId, pad: TokenId, dp: &DataPoint, k: usize, expansion: &[usize]) -> Result<Example> {
    let (rows, chunks) = context_rows(dp.context(), k, pad, expansion)?;
    Ok(Example::continuation(bos, chunks, &rows, dp.output()))
}

/// How the context of a held-out data point is shown to the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextPolicy {
    NoContext,
    FullTokens,
    /// Only the last `n` context tokens, as raw tokens.
    TruncatedLast(usize),
    /// Every chunk compressed.
    Compressed {
        k: usize,
    },
    /// `round(pL)` chunks expanded uniformly at random (seeded per data point).
    Mixed {
        k: usize,
        p: f64,
        seed: u64,
    },
}

impl ContextPolicy {
    pub fn example(&self, bos: TokenId, pad: TokenId, dp: &DataPoint, index: usize) -> Result<Example> {
        let ctx = dp.context();
        let plain = |c: &[TokenId]| {
            let rows: Vec<Row> = c.iter().map(|&t| Row::Token(t)).collect();
            Example::continuation(bos, Vec::new(), &rows, dp.output())
        };
        Ok(match *self {
            ContextPolicy::NoContext => plain(&[]),
            ContextPolicy::FullTokens => plain(ctx),
            ContextPolicy::TruncatedLast(n) => plain(&ctx[ctx.len().saturating_sub(n)..]),
            ContextPolicy::Compressed { k } => cpt_example(bos, pad, dp, k, &[])?,
            ContextPolicy::Mixed { k, p, seed } => {
                let l = dp.s.div_ceil(k);
                let n = expansion_count(p, l)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let mut picked = sample(&mut rng, l, n).into_vec();
                picked.sort_unstable();
                cpt_example(bos, pad, dp, k, &picked)?
            }
        })
    }
}

/// Mean per-token NLL (nats) of the outputs of `points` under `policy`.
pub fn evaluate_nll<T: Scalar>(
    model: &RefragModel<T>,
    points: &[DataPoint],
    policy: &ContextPolicy,
    batch: usize,
) -> Result<f64> {
    let examples = points
        .iter()
        .enumerate()
        .map(|(i, dp)| policy.example(model.config.bos_id, model.config.pad_id, dp, i))
        .collect::<Result<Vec<_>>>()?;
    mean_example_nll(model, &examples, batch)
}

/// Mean NLL over every target of `examples`, evaluated in batches.
pub fn mean_example_nll<T: Scalar>(model: &RefragModel<T>, examples: &[Example], batch: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for group in examples.chunks(batch.max(1)) {
        for v in model.batch_nll(group)? {
            n += v.len();
            sum += v.iter().sum::<f64>();
        }
    }
    if n == 0 {
        return Err(Error::EmptyEvalSet);
    }
    Ok(sum / n as f64)
}

/// Held-out reconstruction loss over consecutive `chunks * k` windows of `tokens`.
pub fn evaluate_reconstruction<T: Scalar>(
    model: &RefragModel<T>,
    tokens: &[TokenId],
    k: usize,
    chunks: usize,
    max_examples: usize,
    batch: usize,
) -> Result<f64> {
    let span = chunks * k;
    if span == 0 {
        return Err(invalid("reconstruction span must be positive"));
    }
    let examples = tokens
        .chunks_exact(span)
        .take(max_examples)
        .map(|w| reconstruction_example(model.config.bos_id, model.config.pad_id, w, k))
        .collect::<Result<Vec<_>>>()?;
    mean_example_nll(model, &examples, batch)
}

/// One logged optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub stage: Stage,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
    pub tokens: usize,
    /// Examples per chunk count in this batch.
    pub mix: BTreeMap<usize, usize>,
}

/// Per-example chunk counts for a whole run, in training order.
fn build_plan(cfg: &TrainConfig, curriculum: Option<&CurriculumSchedule>) -> Result<Vec<usize>> {
    let full = match cfg.stage {
        Stage::Pretrain => 0,
        _ => cfg.max_chunks(),
    };
    match curriculum {
        Some(sched) if cfg.stage != Stage::Pretrain => {
            if let Some(r) = sched.rows.iter().find(|r| r.chunks > full) {
                return Err(invalid(format!("curriculum row {} needs more than {full} chunks", r.label())));
            }
            let mut plan = Vec::new();
            // Epochs repeat each stage before moving on, so difficulty only rises.
            for stage in 1..=STAGES {
                for epoch in 0..cfg.epochs.max(1) {
                    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (((epoch * STAGES + stage) as u64) << 32));
                    plan.extend(sample_stage(sched, stage, &mut rng)?.into_iter().map(|e| e.chunks));
                }
            }
            if plan.is_empty() {
                return Err(invalid("curriculum schedule emits no examples"));
            }
            Ok(plan)
        }
        _ => {
            let n = match (cfg.steps, cfg.examples) {
                (_, n) if n > 0 => n,
                (Some(steps), _) => steps as usize * cfg.batch_size,
                _ => return Err(invalid("set steps or examples when training without a curriculum")),
            };
            Ok(vec![full; n])
        }
    }
}

/// A resumable training run for one stage.
pub struct TrainRun<'a, T> {
    pub model: RefragModel<T>,
    pub optimizer: AdamW<T>,
    pub step: u64,
    pub cfg: TrainConfig,
    pub log: Vec<StepLog>,
    data: &'a [TokenId],
    plan: Vec<usize>,
    schedule: LrSchedule,
    total_steps: u64,
    decoder_hash: Option<String>,
}

impl<'a, T: Scalar> TrainRun<'a, T> {
    pub fn new(
        model: RefragModel<T>,
        cfg: TrainConfig,
        data: &'a [TokenId],
        curriculum: Option<&CurriculumSchedule>,
    ) -> Result<Self> {
        let optimizer = AdamW::new(cfg.adamw.clone());
        Self::resume(model, optimizer, 0, cfg, data, curriculum)
    }

    /// Continues from a checkpoint of the same stage and config.
    pub fn from_checkpoint(
        ck: ModelCheckpoint<T>,
        cfg: TrainConfig,
        data: &'a [TokenId],
        curriculum: Option<&CurriculumSchedule>,
    ) -> Result<Self> {
        if ck.stage != cfg.stage {
            return Err(invalid(format!("checkpoint is from stage {}, not {}", ck.stage.name(), cfg.stage.name())));
        }
        let optimizer = ck.optimizer.unwrap_or_else(|| AdamW::new(cfg.adamw.clone()));
        Self::resume(ck.model, optimizer, ck.step, cfg, data, curriculum)
    }

    fn resume(
        model: RefragModel<T>,
        optimizer: AdamW<T>,
        step: u64,
        cfg: TrainConfig,
        data: &'a [TokenId],
        curriculum: Option<&CurriculumSchedule>,
    ) -> Result<Self> {
        cfg.validate()?;
        let plan = build_plan(&cfg, curriculum)?;
        let total_steps = cfg.steps.unwrap_or_else(|| plan.len().div_ceil(cfg.batch_size) as u64);
        let need = match cfg.stage {
            Stage::Pretrain => cfg.s,
            Stage::Reconstruction => plan.iter().max().copied().unwrap_or(0) * cfg.k,
            _ => cfg.s + cfg.o,
        };
        if data.len() < need.max(1) {
            return Err(Error::EmptyCorpus);
        }
        let schedule = LrSchedule::new(cfg.peak_lr, cfg.warmup_fraction, total_steps)?;
        let decoder_hash = (!cfg.trainable().decoder).then(|| model.decoder_fingerprint());
        Ok(Self { model, optimizer, step, cfg, log: Vec::new(), data, plan, schedule, total_steps, decoder_hash })
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn lr_schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    /// Chunk counts of the examples in step `step`. With an explicit step
    /// count the plan is stretched or compressed to fit, keeping its order.
    fn batch_plan(&self, step: u64) -> Vec<usize> {
        let b = self.cfg.batch_size;
        let slots = self.total_steps as usize * b;
        (0..b)
            .map(|j| {
                let slot = step as usize * b + j;
                if self.cfg.steps.is_none() {
                    self.plan.get(slot).copied()
                } else {
                    Some(self.plan[(slot * self.plan.len() / slots.max(1)).min(self.plan.len() - 1)])
                }
            })
            .take_while(Option::is_some)
            .flatten()
            .collect()
    }

    fn window<'d, R: Rng>(data: &'d [TokenId], len: usize, rng: &mut R) -> &'d [TokenId] {
        let start = rng.random_range(0..=data.len() - len);
        &data[start..start + len]
    }

    fn batch(&self, step: u64) -> Result<(Vec<Example>, BTreeMap<usize, usize>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x2545_F491_4F6C_DD1D) ^ step);
        let (bos, pad) = (self.model.config.bos_id, self.model.config.pad_id);
        let cfg = &self.cfg;
        let mut mix = BTreeMap::new();
        let mut out = Vec::with_capacity(cfg.batch_size);
        for m in self.batch_plan(step) {
            *mix.entry(m).or_insert(0) += 1;
            let ex = match cfg.stage {
                Stage::Pretrain => Example::language_model(bos, Self::window(self.data, cfg.s, &mut rng)),
                Stage::Reconstruction => reconstruction_example(bos, pad, Self::window(self.data, m * cfg.k, &mut rng), cfg.k)?,
                Stage::Cpt | Stage::MixedFinetune => {
                    // Curriculum rows shorten the context to the last m chunks.
                    let ctx_len = (m * cfg.k).min(cfg.s);
                    let w = Self::window(self.data, ctx_len + cfg.o, &mut rng);
                    let dp = DataPoint::new(w.to_vec(), ctx_len, cfg.o)?;
                    let l = ctx_len.div_ceil(cfg.k);
                    let mut expansion = if cfg.stage == Stage::MixedFinetune {
                        sample(&mut rng, l, expansion_count(cfg.p, l)?).into_vec()
                    } else {
                        Vec::new()
                    };
                    expansion.sort_unstable();
                    cpt_example(bos, pad, &dp, cfg.k, &expansion)?
                }
                Stage::Policy => unreachable!("rejected by validate"),
            };
            out.push(ex);
        }
        Ok((out, mix))
    }

    /// Runs one optimizer step and returns its log record.
    pub fn step_once(&mut self) -> Result<StepLog> {
        let (examples, mix) = self.batch(self.step)?;
        if examples.is_empty() {
            return Err(invalid("training plan exhausted"));
        }
        let trainable = self.cfg.trainable();
        let mut grads = self.model.zeroed();
        let loss = self.model.loss_and_grads(&examples, trainable, &mut grads)?;
        if !loss.loss.is_finite() {
            return Err(Error::NonFiniteLoss { step: self.step, loss: loss.loss });
        }
        self.step += 1;
        let lr = self.schedule.at(self.step);
        let stats = self.optimizer.step(&mut self.model, &grads, lr, |n| trainable.allows(n))?;
        let rec = StepLog {
            step: self.step,
            stage: self.cfg.stage,
            loss: loss.loss,
            lr,
            grad_norm: stats.grad_norm,
            tokens: loss.tokens,
            mix,
        };
        self.log.push(rec.clone());
        Ok(rec)
    }

    /// Steps until `until` (or the end of the run), writing one JSON line per
    /// step to `metrics` when given. Fails hard if a frozen decoder moved.
    pub fn run(&mut self, until: Option<u64>, mut metrics: Option<&mut dyn Write>) -> Result<()> {
        let end = until.unwrap_or(self.total_steps).min(self.total_steps);
        while self.step < end {
            let rec = self.step_once()?;
            if let Some(w) = metrics.as_mut() {
                serde_json::to_writer(&mut **w, &rec)?;
                w.write_all(b"\n")?;
            }
        }
        self.check_decoder()
    }

    pub fn check_decoder(&self) -> Result<()> {
        match &self.decoder_hash {
            Some(h) if *h != self.model.decoder_fingerprint() => Err(Error::DecoderDrift),
            _ => Ok(()),
        }
    }

    /// Mean training loss over the last `n` logged steps.
    pub fn recent_loss(&self, n: usize) -> Option<f64> {
        let tail = &self.log[self.log.len().saturating_sub(n)..];
        (!tail.is_empty()).then(|| tail.iter().map(|r| r.loss).sum::<f64>() / tail.len() as f64)
    }

    pub fn checkpoint(&self, vocab: Option<String>) -> Result<ModelCheckpoint<T>> {
        Ok(ModelCheckpoint {
            model: self.model.clone(),
            optimizer: Some(self.optimizer.clone()),
            stage: self.cfg.stage,
            step: self.step,
            vocab,
            train_config: serde_json::to_value(&self.cfg)?,
        })
    }
}

/// Result of running a stage to completion.
pub struct TrainOutcome<T> {
    pub checkpoint: ModelCheckpoint<T>,
    pub log: Vec<StepLog>,
}

fn run_stage<T: Scalar>(
    model: RefragModel<T>,
    cfg: TrainConfig,
    data: &[TokenId],
    curriculum: Option<&CurriculumSchedule>,
    metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    let mut run = TrainRun::new(model, cfg, data, curriculum)?;
    run.run(None, metrics)?;
    let checkpoint = run.checkpoint(None)?;
    Ok(TrainOutcome { checkpoint, log: run.log })
}

/// Next-token pretraining of the decoder on raw text.
pub fn train_lm<T: Scalar>(
    model: RefragModel<T>,
    data: &[TokenId],
    cfg: TrainConfig,
    metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    if cfg.stage != Stage::Pretrain {
        return Err(invalid("train_lm expects a pretrain config"));
    }
    run_stage(model, cfg, data, None, metrics)
}

/// Encoder and projection learn to let the frozen decoder reproduce the
/// chunked context. `curriculum = None` trains on full-length spans only.
pub fn train_reconstruction<T: Scalar>(
    model: RefragModel<T>,
    data: &[TokenId],
    curriculum: Option<&CurriculumSchedule>,
    cfg: TrainConfig,
    metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    if cfg.stage != Stage::Reconstruction {
        return Err(invalid("train_reconstruction expects a reconstruction config"));
    }
    run_stage(model, cfg, data, curriculum, metrics)
}

/// Next-paragraph prediction with every parameter trainable.
pub fn train_cpt<T: Scalar>(
    model: RefragModel<T>,
    data: &[TokenId],
    curriculum: Option<&CurriculumSchedule>,
    cfg: TrainConfig,
    metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    if cfg.stage != Stage::Cpt {
        return Err(invalid("train_cpt expects a cpt config"));
    }
    run_stage(model, cfg, data, curriculum, metrics)
}

/// Next-paragraph prediction with `round(pL)` random chunks left uncompressed.
pub fn train_mixed<T: Scalar>(
    model: RefragModel<T>,
    data: &[TokenId],
    cfg: TrainConfig,
    metrics: Option<&mut dyn Write>,
) -> Result<TrainOutcome<T>> {
    if cfg.stage != Stage::MixedFinetune {
        return Err(invalid("train_mixed expects a mixed_finetune config"));
    }
    expansion_count(cfg.p, cfg.max_chunks())?;
    run_stage(model, cfg, data, None, metrics)
}
