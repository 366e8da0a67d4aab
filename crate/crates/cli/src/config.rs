//! Run configuration, read from TOML. Every key is optional; missing keys take
//! the defaults below. Paths are resolved against the output directory.

use std::path::Path;

use refrag_core::corpus::SyntheticConfig;
use refrag_core::model::{DecoderConfig, EncoderConfig, ModelConfig, QuestionOrder};
use serde::{Deserialize, Serialize};

use crate::UsageError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory for artifacts, metrics and the manifest.
    pub out: String,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub data: DataSection,
    pub pretrain: PretrainSection,
    pub recon: ReconSection,
    pub cpt: CptSection,
    pub mixed: MixedSection,
    pub policy: PolicySection,
    pub eval: EvalSection,
    pub perf: PerfSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: "runs/default".into(),
            corpus: CorpusSection::default(),
            model: ModelSection::default(),
            data: DataSection::default(),
            pretrain: PretrainSection::default(),
            recon: ReconSection::default(),
            cpt: CptSection::default(),
            mixed: MixedSection::default(),
            policy: PolicySection::default(),
            eval: EvalSection::default(),
            perf: PerfSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub path: String,
    /// Trailing fraction of the token stream kept for evaluation.
    pub holdout_fraction: f64,
    pub synthetic: SyntheticConfig,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self { path: "corpus.txt".into(), holdout_fraction: 0.05, synthetic: SyntheticConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub decoder_dim: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub max_positions: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub zero_init_projection: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            decoder_dim: 128,
            decoder_layers: 4,
            decoder_heads: 4,
            max_positions: 256,
            encoder_dim: 64,
            encoder_layers: 2,
            encoder_heads: 4,
            zero_init_projection: true,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize, pad_id: u32, bos_id: u32, max_chunk_len: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            pad_id,
            bos_id,
            decoder: DecoderConfig {
                dim: self.decoder_dim,
                layers: self.decoder_layers,
                heads: self.decoder_heads,
                max_positions: self.max_positions,
            },
            encoder: EncoderConfig {
                dim: self.encoder_dim,
                layers: self.encoder_layers,
                heads: self.encoder_heads,
                max_chunk_len,
            },
            zero_init_projection: self.zero_init_projection,
            question_order: QuestionOrder::BeforeContext,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Compression rate: tokens per chunk.
    pub k: usize,
    /// Context tokens.
    pub s: usize,
    /// Output tokens.
    pub o: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { k: 8, s: 64, o: 32 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    /// Language-model steps for the decoder before reconstruction.
    pub steps: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    /// Start from this checkpoint's decoder and skip pretraining.
    pub init: Option<String>,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 16, seq_len: 128, peak_lr: 3e-3, warmup_fraction: 0.04, init: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    /// Optimizer steps; unset derives them from the curriculum plan.
    pub steps: Option<u64>,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub curriculum: bool,
    /// Schedule file; unset uses the builtin table.
    pub curriculum_file: Option<String>,
    /// Multiplier on the schedule's example counts.
    pub curriculum_scale: f64,
}

impl Default for ReconSection {
    fn default() -> Self {
        Self {
            steps: Some(600),
            batch_size: 16,
            peak_lr: 2e-4,
            warmup_fraction: 0.04,
            epochs: 4,
            curriculum: true,
            curriculum_file: None,
            curriculum_scale: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CptSection {
    pub steps: Option<u64>,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub epochs: usize,
    pub curriculum: bool,
    pub curriculum_scale: f64,
    /// Checkpoint to continue from; empty starts from scratch.
    pub init: String,
}

impl Default for CptSection {
    fn default() -> Self {
        Self {
            steps: Some(1000),
            batch_size: 16,
            peak_lr: 5e-5,
            warmup_fraction: 0.04,
            epochs: 4,
            curriculum: false,
            curriculum_scale: 0.05,
            init: "recon.ckpt".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixedSection {
    pub steps: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    /// Fraction of chunks fed as raw tokens.
    pub p: f64,
    pub init: String,
}

impl Default for MixedSection {
    fn default() -> Self {
        Self { steps: 500, batch_size: 16, peak_lr: 5e-5, warmup_fraction: 0.04, p: 0.1, init: "cpt.ckpt".into() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub steps: u64,
    /// Data points per step.
    pub batch: usize,
    /// Sampled selections per data point.
    pub group_size: usize,
    pub clip_eps: f64,
    pub lr: f64,
    pub inner_epochs: usize,
    pub p: f64,
    pub recompute: bool,
    /// Training data points drawn from the training split.
    pub train_points: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub init: String,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            steps: 200,
            batch: 4,
            group_size: 8,
            clip_eps: 0.2,
            lr: 1e-4,
            inner_epochs: 2,
            p: 0.25,
            recompute: false,
            train_points: 512,
            dim: 32,
            heads: 2,
            layers: 2,
            init: "mixed.ckpt".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: String,
    /// Selection policy for the RL row; empty skips it.
    pub policy: String,
    /// Held-out data points evaluated.
    pub points: usize,
    pub batch: usize,
    /// Expansion fractions for the selection comparison.
    pub p: Vec<f64>,
    pub needle_facts: usize,
    pub needle_p: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: "mixed.ckpt".into(),
            policy: "policy.ckpt".into(),
            points: 256,
            batch: 32,
            p: vec![0.1, 0.25],
            needle_facts: 200,
            needle_p: vec![0.0, 0.25, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerfSection {
    /// Accelerator flop rate (flop/s).
    pub flops: f64,
    /// Accelerator memory bandwidth (bytes/s).
    pub bandwidth: f64,
    pub d: u64,
    pub l: u64,
    pub n: u64,
    pub b: u64,
    pub s: u64,
    pub o: u64,
    pub ks: Vec<u64>,
    /// Also time the toy model on this machine.
    pub bench: bool,
    pub bench_contexts: Vec<usize>,
    pub bench_ks: Vec<usize>,
    pub bench_trials: usize,
    pub bench_warmup: usize,
}

impl Default for PerfSection {
    fn default() -> Self {
        Self {
            flops: 989e12,
            bandwidth: 3.35e12,
            d: 4096,
            l: 32,
            n: 6_738_415_616,
            b: 1,
            s: 16384,
            o: 2048,
            ks: vec![1, 2, 4, 8, 16, 32],
            bench: false,
            bench_contexts: vec![512, 2048],
            bench_ks: vec![2, 4, 8],
            bench_trials: 20,
            bench_warmup: 2,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, UsageError> {
        let cfg: Self = toml::from_str(text).map_err(|e| UsageError(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, UsageError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), UsageError> {
        let bad = |m: String| Err(UsageError(format!("invalid config: {m}")));
        let d = &self.data;
        if d.k == 0 || d.s == 0 || d.o == 0 {
            return bad("data.k, data.s and data.o must be positive".into());
        }
        if d.k > d.s {
            return bad(format!("data.k = {} exceeds data.s = {}", d.k, d.s));
        }
        if !(0.0..1.0).contains(&self.corpus.holdout_fraction) {
            return bad(format!("corpus.holdout_fraction {} outside [0, 1)", self.corpus.holdout_fraction));
        }
        let m = &self.model;
        if m.decoder_heads == 0
            || !m.decoder_dim.is_multiple_of(m.decoder_heads)
            || m.encoder_heads == 0
            || !m.encoder_dim.is_multiple_of(m.encoder_heads)
        {
            return bad("model dims must be divisible by their head counts".into());
        }
        if m.max_positions < 1 + d.s + d.o {
            return bad(format!("model.max_positions {} < 1 + s + o = {}", m.max_positions, 1 + d.s + d.o));
        }
        if self.pretrain.seq_len + 1 > m.max_positions {
            return bad("pretrain.seq_len + 1 exceeds model.max_positions".into());
        }
        for (name, p) in [("mixed.p", self.mixed.p), ("policy.p", self.policy.p)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.eval.p.iter().chain(&self.eval.needle_p).any(|p| !(0.0..=1.0).contains(p)) {
            return bad("eval fractions must lie in [0, 1]".into());
        }
        if self.policy.group_size < 2 {
            return bad("policy.group_size must be at least 2".into());
        }
        if self.perf.ks.contains(&0) || self.perf.bench_ks.contains(&0) {
            return bad("compression rates must be positive".into());
        }
        Ok(())
    }
}
