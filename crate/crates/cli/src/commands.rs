use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Subcommand;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refrag_core::checkpoint::{ModelCheckpoint, PolicyCheckpoint};
use refrag_core::corpus::{make_datapoints, SyntheticConfig, SyntheticCorpus, TokenId, Vocab};
use refrag_core::curriculum::CurriculumSchedule;
use refrag_core::model::RefragModel;
use refrag_core::perfmodel::{
    acceleration_report, microbench, series, BenchConfig, HardwareProfile, LatencyReport, ShapeProfile,
};
use refrag_core::selector::{
    compare_selections, train_policy, GrpoConfig, PolicyConfig, PolicyNet, SelectionReport, SUBSET_LIMIT,
};
use refrag_core::training::{
    evaluate_nll, evaluate_reconstruction, train_cpt, train_lm, train_mixed, train_reconstruction, ContextPolicy, TrainConfig,
};
use refrag_core::Model32;
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::manifest::{EntryKind, Manifest};
use crate::needle::{needle_eval, needle_items};
use crate::UsageError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Write the synthetic corpus to corpus.txt.
    GenCorpus,
    /// Pretrain the decoder (unless given one) and train encoder + projection to reconstruct chunks.
    TrainRecon,
    /// Continual pretraining on next-paragraph prediction.
    TrainCpt,
    /// Fine-tune on mixed compressed / raw chunk inputs.
    TrainMixed,
    /// Train the selective-expansion policy with GRPO.
    TrainPolicy,
    /// Perplexity, selection and fact-recall evaluation.
    Eval,
    /// Analytical latency/memory report and optional toy benchmark.
    PerfReport,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::TrainRecon => "train-recon",
            Command::TrainCpt => "train-cpt",
            Command::TrainMixed => "train-mixed",
            Command::TrainPolicy => "train-policy",
            Command::Eval => "eval",
            Command::PerfReport => "perf-report",
        }
    }
}

/// One command invocation against an output directory.
///
/// Outputs that already exist are refused unless `force` is set; with
/// `force` they are rewritten, and a rerun with the same config and seed
/// reproduces them.
pub struct Session {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub force: bool,
    command: Command,
    manifest: Manifest,
}

struct Corpus {
    vocab: Vocab,
    train: Vec<TokenId>,
    held: Vec<TokenId>,
}

impl Session {
    pub fn new(cfg: RunConfig, command: Command, force: bool) -> Result<Self> {
        let out = PathBuf::from(&cfg.out);
        fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
        let manifest = Manifest::load(&out)?;
        Ok(Self { cfg, out, force, command, manifest })
    }

    fn path(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out.join(p)
        }
    }

    fn claim(&self, name: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        if p.exists() && !self.force {
            return Err(UsageError(format!("{} exists; pass --force to overwrite", p.display())).into());
        }
        Ok(p)
    }

    fn record(&mut self, name: &str, kind: EntryKind) -> Result<()> {
        self.manifest.record(&self.out, name, kind, self.command.name())
    }

    fn metrics(&self, name: &str) -> Result<BufWriter<File>> {
        Ok(BufWriter::new(File::create(self.claim(name)?)?))
    }

    fn write_log(&mut self, name: &str, body: &str) -> Result<()> {
        fs::write(self.claim(name)?, body)?;
        self.record(name, EntryKind::Log)
    }

    fn finish(mut self) -> Result<()> {
        let name = format!("{}.config.toml", self.command.name());
        let body = self.cfg.to_toml();
        self.write_log(&name, &body)?;
        self.manifest.save(&self.out)
    }

    fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig { seed: self.cfg.corpus.synthetic.seed ^ self.cfg.seed, ..self.cfg.corpus.synthetic.clone() }
    }

    fn corpus(&self) -> Result<Corpus> {
        let path = self.path(&self.cfg.corpus.path);
        let text =
            fs::read_to_string(&path).with_context(|| format!("corpus not found: {} (run gen-corpus first)", path.display()))?;
        let vocab = Vocab::from_chars(text.chars().chain(SyntheticCorpus::alphabet()))?;
        let tokens = vocab.encode(&text)?;
        let split = ((tokens.len() as f64) * (1.0 - self.cfg.corpus.holdout_fraction)).round() as usize;
        Ok(Corpus { train: tokens[..split].to_vec(), held: tokens[split..].to_vec(), vocab })
    }

    fn load_model(&self, rel: &str, vocab: &Vocab) -> Result<ModelCheckpoint<f32>> {
        let ck = ModelCheckpoint::<f32>::load(self.path(rel))?;
        if let Some(v) = &ck.vocab {
            if v.chars().collect::<Vec<_>>() != vocab.chars() {
                bail!("{rel} was trained with a different vocabulary");
            }
        }
        Ok(ck)
    }

    fn fresh_model(&self, vocab: &Vocab) -> Result<Model32> {
        let d = &self.cfg.data;
        let mc = self.cfg.model.model_config(vocab.size(), vocab.pad_id(), vocab.bos_id(), d.k, self.cfg.seed);
        Ok(RefragModel::new(mc)?)
    }

    fn curriculum(&self, enabled: bool, file: Option<&str>, scale: f64) -> Result<Option<CurriculumSchedule>> {
        if !enabled {
            return Ok(None);
        }
        let base = match file {
            Some(f) => CurriculumSchedule::load(self.path(f))?,
            None => CurriculumSchedule::builtin(),
        };
        let max_chunks = self.cfg.data.s.div_ceil(self.cfg.data.k);
        Ok(Some(base.scaled(scale)?.truncated(max_chunks)?))
    }

    fn save_model(&mut self, name: &str, mut ck: ModelCheckpoint<f32>, vocab: &Vocab) -> Result<()> {
        let path = self.claim(name)?;
        ck.vocab = Some(vocab.chars().iter().collect());
        ck.save(&path)?;
        self.record(name, EntryKind::Artifact)
    }

    fn eval_points(&self, held: &[TokenId]) -> Result<Vec<refrag_core::corpus::DataPoint>> {
        let d = &self.cfg.data;
        let mut pts = make_datapoints(held, d.s, d.o)?;
        pts.truncate(self.cfg.eval.points);
        if pts.is_empty() {
            bail!("held-out split too short for one data point of {} tokens", d.s + d.o);
        }
        Ok(pts)
    }

    fn print_nll(&self, model: &Model32, held: &[TokenId], policy: ContextPolicy) -> Result<f64> {
        let pts = self.eval_points(held)?;
        let nll = evaluate_nll(model, &pts, &policy, self.cfg.eval.batch)?;
        println!("held-out NLL ({policy:?}): {nll:.4}");
        Ok(nll)
    }
}

fn stage_config(mut cfg: TrainConfig, steps: Option<u64>, batch: usize, lr: f64, warmup: f64, seed: u64) -> TrainConfig {
    cfg.steps = steps;
    cfg.batch_size = batch;
    cfg.peak_lr = lr;
    cfg.warmup_fraction = warmup;
    cfg.seed = seed;
    cfg
}

fn gen_corpus(mut s: Session) -> Result<()> {
    let name = s.cfg.corpus.path.clone();
    let path = s.claim(&name)?;
    let text = SyntheticCorpus::new(s.synthetic()).generate();
    fs::write(&path, &text)?;
    println!("wrote {} ({} chars)", path.display(), text.chars().count());
    s.record(&name, EntryKind::Artifact)?;
    s.finish()
}

fn train_recon(mut s: Session) -> Result<()> {
    let c = s.corpus()?;
    let mut model = s.fresh_model(&c.vocab)?;
    let pre = s.cfg.pretrain.clone();
    if let Some(init) = &pre.init {
        let ck = s.load_model(init, &c.vocab)?;
        if ck.model.config.decoder != model.config.decoder {
            bail!("{init} has decoder shape {:?}, config asks for {:?}", ck.model.config.decoder, model.config.decoder);
        }
        model.decoder = ck.model.decoder;
    } else if pre.steps > 0 {
        let mut cfg = TrainConfig::pretrain(pre.seq_len, pre.steps);
        cfg.batch_size = pre.batch_size;
        cfg.peak_lr = pre.peak_lr;
        cfg.warmup_fraction = pre.warmup_fraction;
        cfg.seed = s.cfg.seed;
        let mut w = s.metrics("pretrain.metrics.jsonl")?;
        model = train_lm(model, &c.train, cfg, Some(&mut w))?.checkpoint.model;
        w.flush()?;
        s.record("pretrain.metrics.jsonl", EntryKind::Log)?;
    }
    let r = s.cfg.recon.clone();
    let d = s.cfg.data.clone();
    let mut cfg =
        stage_config(TrainConfig::reconstruction(d.k, d.s), r.steps, r.batch_size, r.peak_lr, r.warmup_fraction, s.cfg.seed);
    cfg.epochs = r.epochs;
    if !r.curriculum && r.steps.is_none() {
        bail!(UsageError("recon.steps is required without a curriculum".into()));
    }
    let curriculum = s.curriculum(r.curriculum, r.curriculum_file.as_deref(), r.curriculum_scale)?;
    let mut w = s.metrics("recon.metrics.jsonl")?;
    let outcome = train_reconstruction(model, &c.train, curriculum.as_ref(), cfg, Some(&mut w))?;
    w.flush()?;
    s.record("recon.metrics.jsonl", EntryKind::Log)?;
    let loss =
        evaluate_reconstruction(&outcome.checkpoint.model, &c.held, d.k, d.s.div_ceil(d.k), s.cfg.eval.points, s.cfg.eval.batch)?;
    println!("held-out reconstruction NLL at {} chunks: {loss:.4}", d.s.div_ceil(d.k));
    s.save_model("recon.ckpt", outcome.checkpoint, &c.vocab)?;
    s.finish()
}

fn train_cpt_cmd(mut s: Session) -> Result<()> {
    let c = s.corpus()?;
    let p = s.cfg.cpt.clone();
    let d = s.cfg.data.clone();
    let model = if p.init.is_empty() { s.fresh_model(&c.vocab)? } else { s.load_model(&p.init, &c.vocab)?.model };
    let mut cfg = stage_config(TrainConfig::cpt(d.k, d.s, d.o), p.steps, p.batch_size, p.peak_lr, p.warmup_fraction, s.cfg.seed);
    cfg.epochs = p.epochs;
    if !p.curriculum && p.steps.is_none() {
        bail!(UsageError("cpt.steps is required without a curriculum".into()));
    }
    let curriculum = s.curriculum(p.curriculum, None, p.curriculum_scale)?;
    let mut w = s.metrics("cpt.metrics.jsonl")?;
    let outcome = train_cpt(model, &c.train, curriculum.as_ref(), cfg, Some(&mut w))?;
    w.flush()?;
    s.record("cpt.metrics.jsonl", EntryKind::Log)?;
    s.print_nll(&outcome.checkpoint.model, &c.held, ContextPolicy::Compressed { k: d.k })?;
    s.save_model("cpt.ckpt", outcome.checkpoint, &c.vocab)?;
    s.finish()
}

fn train_mixed_cmd(mut s: Session) -> Result<()> {
    let c = s.corpus()?;
    let m = s.cfg.mixed.clone();
    let d = s.cfg.data.clone();
    let model = s.load_model(&m.init, &c.vocab)?.model;
    let cfg = stage_config(
        TrainConfig::mixed(d.k, d.s, d.o, m.p),
        Some(m.steps),
        m.batch_size,
        m.peak_lr,
        m.warmup_fraction,
        s.cfg.seed,
    );
    let mut w = s.metrics("mixed.metrics.jsonl")?;
    let outcome = train_mixed(model, &c.train, cfg, Some(&mut w))?;
    w.flush()?;
    s.record("mixed.metrics.jsonl", EntryKind::Log)?;
    s.print_nll(&outcome.checkpoint.model, &c.held, ContextPolicy::Mixed { k: d.k, p: m.p, seed: s.cfg.seed })?;
    s.save_model("mixed.ckpt", outcome.checkpoint, &c.vocab)?;
    s.finish()
}

fn train_policy_cmd(mut s: Session) -> Result<()> {
    let c = s.corpus()?;
    let p = s.cfg.policy.clone();
    let d = s.cfg.data.clone();
    let model = s.load_model(&p.init, &c.vocab)?.model;
    let mut points = make_datapoints(&c.train, d.s, d.o)?;
    points.truncate(p.train_points);
    let mut pc = PolicyConfig::new(model.encoder.dim(), d.s.div_ceil(d.k));
    pc.dim = p.dim;
    pc.heads = p.heads;
    pc.layers = p.layers;
    pc.seed = s.cfg.seed;
    let mut policy = PolicyNet::new(&pc, &mut ChaCha8Rng::seed_from_u64(pc.seed));
    let gcfg = GrpoConfig {
        group_size: p.group_size,
        clip_eps: p.clip_eps,
        lr: p.lr,
        steps: p.steps,
        batch: p.batch,
        inner_epochs: p.inner_epochs,
        p: p.p,
        k: d.k,
        recompute: p.recompute,
        seed: s.cfg.seed,
        ..GrpoConfig::default()
    };
    let mut w = s.metrics("policy.metrics.jsonl")?;
    let log = train_policy(&model, &mut policy, &points, &gcfg, Some(&mut w))?;
    w.flush()?;
    s.record("policy.metrics.jsonl", EntryKind::Log)?;
    if let Some(last) = log.last() {
        println!("policy step {}: mean reward {:.4}", last.step, last.mean_reward);
    }
    let path = s.claim("policy.ckpt")?;
    PolicyCheckpoint { policy, config: pc, step: p.steps, train_config: serde_json::to_value(&gcfg)? }.save(&path)?;
    s.record("policy.ckpt", EntryKind::Artifact)?;
    s.finish()
}

#[derive(Serialize)]
struct NeedleRow {
    p: f64,
    accuracy: f64,
}

#[derive(Serialize)]
struct EvalReport {
    checkpoint: String,
    nll: Vec<(String, f64)>,
    reconstruction_nll: f64,
    selection: Vec<SelectionReport>,
    needle: Vec<NeedleRow>,
    needle_absent_accuracy: f64,
}

fn eval(mut s: Session) -> Result<()> {
    let c = s.corpus()?;
    let e = s.cfg.eval.clone();
    let d = s.cfg.data.clone();
    let ck = s.load_model(&e.checkpoint, &c.vocab)?;
    let policy = if e.policy.is_empty() { None } else { Some(PolicyCheckpoint::<f32>::load(s.path(&e.policy))?) };
    let model = &ck.model;
    let pts = s.eval_points(&c.held)?;
    let l = d.s.div_ceil(d.k);
    let mut nll = Vec::new();
    for (name, pol) in [
        ("no_context", ContextPolicy::NoContext),
        ("full_tokens", ContextPolicy::FullTokens),
        ("truncated_last_l", ContextPolicy::TruncatedLast(l)),
        ("compressed", ContextPolicy::Compressed { k: d.k }),
    ] {
        nll.push((name.to_string(), evaluate_nll(model, &pts, &pol, e.batch)?));
    }
    let reconstruction_nll = evaluate_reconstruction(model, &c.held, d.k, l, e.points, e.batch)?;
    let selection =
        e.p.iter()
            .map(|&p| {
                compare_selections(
                    model,
                    &pts,
                    d.k,
                    p,
                    policy.as_ref().map(|pc| (&pc.policy, s.cfg.policy.recompute)),
                    SUBSET_LIMIT,
                    s.cfg.seed,
                )
            })
            .collect::<refrag_core::Result<Vec<_>>>()?;
    let present = needle_items(&c.vocab, &s.synthetic(), e.needle_facts, d.s, true, s.cfg.seed)?;
    let needle = e
        .needle_p
        .iter()
        .map(|&p| Ok(NeedleRow { p, accuracy: needle_eval(model, &present, d.k, p, s.cfg.seed)? }))
        .collect::<Result<Vec<_>>>()?;
    let absent = needle_items(&c.vocab, &s.synthetic(), e.needle_facts, d.s, false, s.cfg.seed)?;
    let needle_absent_accuracy = needle_eval(model, &absent, d.k, 0.0, s.cfg.seed)?;
    let report =
        EvalReport { checkpoint: e.checkpoint.clone(), nll, reconstruction_nll, selection, needle, needle_absent_accuracy };

    println!("held-out NLL over {} data points (s={}, o={}, k={}):", pts.len(), d.s, d.o, d.k);
    for (name, v) in &report.nll {
        println!("  {name:<18}{v:.4}");
    }
    println!("  {:<18}{:.4}", "reconstruction", report.reconstruction_nll);
    println!("selection rewards (-NLL):");
    println!("  {:>5} {:>3} {:>9} {:>9} {:>9} {:>9} {:>9}", "p", "T'", "best", "random", "ppl_desc", "ppl_asc", "policy");
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.4}"));
    for r in &report.selection {
        println!(
            "  {:>5.2} {:>3} {:>9} {:>9.4} {:>9.4} {:>9.4} {:>9}",
            r.p,
            r.t_prime,
            fmt(r.best),
            r.random,
            r.ppl_desc,
            r.ppl_asc,
            fmt(r.policy)
        );
    }
    println!("fact recall over {} facts:", present.len());
    for r in &report.needle {
        println!("  p={:.2}  accuracy {:.3}", r.p, r.accuracy);
    }
    println!("  absent fact  accuracy {:.3}", report.needle_absent_accuracy);
    let body = serde_json::to_string_pretty(&report)?;
    s.write_log("eval.json", &body)?;
    s.finish()
}

fn perf_report(mut s: Session) -> Result<()> {
    let p = s.cfg.perf.clone();
    let hw = HardwareProfile::new(p.flops, p.bandwidth)?;
    let mut text = String::new();
    let mut csv = String::from("d,l,n,b,s,o,k,metric,value\n");
    for &k in &p.ks {
        let shape = ShapeProfile { d: p.d, l: p.l, n: p.n, b: p.b, s: p.s, o: p.o, k };
        let r = LatencyReport::new(&hw, &shape)?;
        let a = acceleration_report::<f64>(&hw, &shape)?;
        text.push_str(&format!("{r}\n"));
        text.push_str(&format!(
            "closed-form acceleration: kv {:.3}  ttft {:.3}  ttit {:.3}  throughput {:.3}\n\n",
            a.kv, a.ttft, a.ttit, a.throughput
        ));
        let prefix = format!("{},{},{},{},{},{},{}", p.d, p.l, p.n, p.b, p.s, p.o, k);
        for (m, v) in [
            ("ttft_baseline_s", r.ttft_baseline),
            ("ttft_compressed_s", r.ttft_compressed),
            ("ttit_baseline_s", r.ttit_baseline),
            ("ttit_compressed_s", r.ttit_compressed),
            ("kv_baseline_bytes", r.kv_baseline as f64),
            ("kv_compressed_bytes", r.kv_compressed as f64),
            ("throughput_baseline", r.throughput_baseline),
            ("throughput_compressed", r.throughput_compressed),
            ("ttft_ratio", r.ttft_ratio),
            ("ttit_ratio", r.ttit_ratio),
            ("kv_ratio", r.kv_ratio),
            ("throughput_ratio", r.throughput_ratio),
        ] {
            csv.push_str(&format!("{prefix},{m},{v:.6e}\n"));
        }
    }
    print!("{text}");
    s.write_log("perf.txt", &text)?;
    s.write_log("perf_series.csv", &csv)?;
    if p.bench {
        let vocab = Vocab::from_chars(SyntheticCorpus::alphabet())?;
        let longest = p.bench_contexts.iter().copied().max().unwrap_or(0);
        let max_k = p.bench_ks.iter().copied().max().unwrap_or(1);
        let mut mc = s.cfg.model.model_config(vocab.size(), vocab.pad_id(), vocab.bos_id(), max_k, s.cfg.seed);
        mc.decoder.max_positions = mc.decoder.max_positions.max(longest + 1 + 8);
        let model = RefragModel::<f32>::new(mc)?;
        let bc = BenchConfig { warmup: p.bench_warmup, trials: p.bench_trials, decode_tokens: 8, seed: s.cfg.seed };
        let rows = microbench(&model, &p.bench_contexts, &p.bench_ks, &bc)?;
        println!(
            "{:>6} {:>3} {:>7} {:>12} {:>12} {:>9} {:>9}",
            "s", "k", "cached", "ttft_base", "ttft_comp", "speedup", "tok_speed"
        );
        for r in &rows {
            println!(
                "{:>6} {:>3} {:>7} {:>12.4e} {:>12.4e} {:>9.2} {:>9.2}",
                r.s, r.k, r.cached, r.ttft_baseline, r.ttft_compressed, r.ttft_speedup, r.per_token_speedup
            );
        }
        s.write_log("bench_series.csv", &series(&rows))?;
        s.write_log("bench.json", &serde_json::to_string_pretty(&json!({ "rows": rows }))?)?;
    }
    s.finish()
}

/// Runs `command` with the given config.
pub fn run(command: Command, cfg: RunConfig, force: bool) -> Result<()> {
    let s = Session::new(cfg, command, force)?;
    match command {
        Command::GenCorpus => gen_corpus(s),
        Command::TrainRecon => train_recon(s),
        Command::TrainCpt => train_cpt_cmd(s),
        Command::TrainMixed => train_mixed_cmd(s),
        Command::TrainPolicy => train_policy_cmd(s),
        Command::Eval => eval(s),
        Command::PerfReport => perf_report(s),
    }
}
