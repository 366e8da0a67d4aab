//! Directional reproductions at toy scale. All runs share one corpus and one
//! pretrained decoder (cached on disk between invocations); later criteria
//! reuse the reconstruction and continued-pretraining runs of earlier ones.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refrag_core::checkpoint::ModelCheckpoint;
use refrag_core::corpus::{make_datapoints, DataPoint, SyntheticConfig, SyntheticCorpus, TokenId, Vocab};
use refrag_core::curriculum::CurriculumSchedule;
use refrag_core::model::{ModelConfig, RefragModel};
use refrag_core::selector::{compare_selections, train_policy, GrpoConfig, PolicyConfig, PolicyNet, SUBSET_LIMIT};
use refrag_core::training::{
    evaluate_nll, evaluate_reconstruction, train_cpt, train_lm, train_mixed, train_reconstruction, ContextPolicy, TrainConfig,
};

type Model = RefragModel<f32>;
type Outcome = Result<String, String>;

const S: usize = 64;
const O: usize = 32;
const PRETRAIN_STEPS: u64 = 2000;
const PRETRAIN_LR: f64 = 3e-3;
const RECON_STEPS: u64 = 1000;
const RECON_LR: f64 = 3e-3;
const CURRICULUM_SCALE: f64 = 0.05;
const CPT_STEPS: u64 = 1500;
const CPT_LR: f64 = 3e-4;
const MIXED_STEPS: u64 = 500;
const MIXED_P: f64 = 0.25;
const POLICY_STEPS: u64 = 150;
const BATCH: usize = 16;
const EVAL_POINTS: usize = 256;
const SELECTION_POINTS: usize = 64;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

struct Setup {
    train: Vec<TokenId>,
    held: Vec<TokenId>,
    points: Vec<DataPoint>,
    decoder: Model,
}

fn cache_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn log(msg: &str) {
    eprintln!("  [directional] {msg}");
}

fn build_setup() -> Result<Setup, String> {
    let mut corpus = SyntheticCorpus::new(SyntheticConfig::default());
    let vocab = Vocab::from_chars(SyntheticCorpus::alphabet()).map_err(err)?;
    let tokens = vocab.encode(&corpus.generate()).map_err(err)?;
    let split = tokens.len() * 95 / 100;
    let (train, held) = (tokens[..split].to_vec(), tokens[split..].to_vec());
    let points: Vec<DataPoint> = make_datapoints(&held, S, O).map_err(err)?.into_iter().take(EVAL_POINTS).collect();

    let path = cache_dir().join(format!("decoder-{PRETRAIN_STEPS}-{PRETRAIN_LR:e}-{}.ckpt", tokens.len()));
    let decoder = match ModelCheckpoint::<f32>::load(&path) {
        Ok(ck) => ck.model,
        Err(_) => {
            let t = Instant::now();
            let model = Model::new(ModelConfig::toy(vocab.size(), vocab.pad_id(), vocab.bos_id())).map_err(err)?;
            let mut cfg = TrainConfig::pretrain(128, PRETRAIN_STEPS);
            cfg.batch_size = BATCH;
            cfg.peak_lr = PRETRAIN_LR;
            let out = train_lm(model, &train, cfg, None).map_err(err)?;
            std::fs::create_dir_all(cache_dir()).map_err(err)?;
            out.checkpoint.save(&path).map_err(err)?;
            log(&format!("pretrained decoder in {:.0?}", t.elapsed()));
            out.checkpoint.model
        }
    };
    Ok(Setup { train, held, points, decoder })
}

fn setup() -> Result<&'static Setup, String> {
    static SETUP: OnceLock<Result<Setup, String>> = OnceLock::new();
    SETUP.get_or_init(build_setup).as_ref().map_err(Clone::clone)
}

/// Trained models keyed by run name, shared across criteria.
fn memo(key: &str, build: impl FnOnce() -> Result<Model, String>) -> Result<Model, String> {
    static RUNS: OnceLock<Mutex<HashMap<String, Model>>> = OnceLock::new();
    let runs = RUNS.get_or_init(Default::default);
    if let Some(m) = runs.lock().unwrap().get(key) {
        return Ok(m.clone());
    }
    let t = Instant::now();
    let m = build()?;
    log(&format!("{key} trained in {:.0?}", t.elapsed()));
    runs.lock().unwrap().insert(key.to_string(), m.clone());
    Ok(m)
}

fn reconstruction(k: usize, curriculum: bool) -> Result<Model, String> {
    memo(&format!("recon-k{k}-{}", if curriculum { "curriculum" } else { "flat" }), || {
        let su = setup()?;
        let mut cfg = TrainConfig::reconstruction(k, S);
        cfg.steps = Some(RECON_STEPS);
        cfg.batch_size = BATCH;
        cfg.peak_lr = RECON_LR;
        let sched = CurriculumSchedule::builtin().scaled(CURRICULUM_SCALE).and_then(|s| s.truncated(S / k)).map_err(err)?;
        let out = train_reconstruction(su.decoder.clone(), &su.train, curriculum.then_some(&sched), cfg, None).map_err(err)?;
        Ok(out.checkpoint.model)
    })
}

/// Continued pretraining at rate `k`, from the curriculum reconstruction run
/// or from the pretrained decoder with a fresh encoder and projection.
fn cpt(k: usize, from_reconstruction: bool) -> Result<Model, String> {
    memo(&format!("cpt-k{k}-{}", if from_reconstruction { "recon" } else { "scratch" }), || {
        let su = setup()?;
        let init = if from_reconstruction { reconstruction(k, true)? } else { su.decoder.clone() };
        let mut cfg = TrainConfig::cpt(k, S, O);
        cfg.steps = Some(CPT_STEPS);
        cfg.batch_size = BATCH;
        cfg.peak_lr = CPT_LR;
        Ok(train_cpt(init, &su.train, None, cfg, None).map_err(err)?.checkpoint.model)
    })
}

fn mixed(k: usize) -> Result<Model, String> {
    memo(&format!("mixed-k{k}"), || {
        let su = setup()?;
        let mut cfg = TrainConfig::mixed(k, S, O, MIXED_P);
        cfg.steps = Some(MIXED_STEPS);
        cfg.batch_size = BATCH;
        cfg.peak_lr = CPT_LR;
        Ok(train_mixed(cpt(k, true)?, &su.train, cfg, None).map_err(err)?.checkpoint.model)
    })
}

fn compressed_nll(model: &Model, k: usize) -> Result<f64, String> {
    evaluate_nll(model, &setup()?.points, &ContextPolicy::Compressed { k }, 32).map_err(err)
}

pub fn c5_curriculum() -> Outcome {
    let su = setup()?;
    let k = 8;
    let with = evaluate_reconstruction(&reconstruction(k, true)?, &su.held, k, S / k, EVAL_POINTS, 32).map_err(err)?;
    let without = evaluate_reconstruction(&reconstruction(k, false)?, &su.held, k, S / k, EVAL_POINTS, 32).map_err(err)?;
    let untrained = evaluate_reconstruction(&su.decoder, &su.held, k, S / k, EVAL_POINTS, 32).map_err(err)?;
    let reduction = 1.0 - with / without;
    let detail = format!(
        "held-out reconstruction NLL with curriculum {with:.3}, without {without:.3} (untrained {untrained:.3}); reduction {:.1}%",
        100.0 * reduction
    );
    if reduction >= 0.25 {
        Ok(detail)
    } else {
        Err(format!("{detail}, need >= 25%"))
    }
}

pub fn c6_recon_init() -> Outcome {
    let k = 8;
    let recon = compressed_nll(&cpt(k, true)?, k)?;
    let scratch = compressed_nll(&cpt(k, false)?, k)?;
    let detail = format!("final held-out CPT NLL from reconstruction {recon:.4}, from scratch {scratch:.4}");
    if recon < scratch {
        Ok(detail)
    } else {
        Err(format!("{detail}; reconstruction init is not lower"))
    }
}

pub fn c7_context_value() -> Outcome {
    let su = setup()?;
    let k = 8;
    let l = S / k;
    let model = cpt(k, true)?;
    let compressed = compressed_nll(&model, k)?;
    // Baselines use the decoder as it was before any compression training.
    let none = evaluate_nll(&su.decoder, &su.points, &ContextPolicy::NoContext, 32).map_err(err)?;
    let truncated = evaluate_nll(&su.decoder, &su.points, &ContextPolicy::TruncatedLast(l), 32).map_err(err)?;
    let full = evaluate_nll(&su.decoder, &su.points, &ContextPolicy::FullTokens, 32).map_err(err)?;
    let detail =
        format!("compressed {compressed:.3}; no context {none:.3}; last {l} tokens {truncated:.3}; full context {full:.3}");
    if compressed < none && compressed < truncated {
        Ok(detail)
    } else {
        Err(format!("{detail}; compressed must beat no-context and truncated"))
    }
}

fn policy_for(model: &Model, k: usize, p: f64) -> Result<PolicyNet<f32>, String> {
    let su = setup()?;
    let l = S / k;
    let mut pc = PolicyConfig::new(model.encoder.dim(), l);
    pc.seed = 7;
    let mut policy = PolicyNet::new(&pc, &mut ChaCha8Rng::seed_from_u64(pc.seed));
    let train_points: Vec<DataPoint> = make_datapoints(&su.train, S, O).map_err(err)?.into_iter().take(512).collect();
    let cfg = GrpoConfig { steps: POLICY_STEPS, p, k, lr: 1e-3, seed: 3, ..GrpoConfig::default() };
    train_policy(model, &mut policy, &train_points, &cfg, None).map_err(err)?;
    Ok(policy)
}

pub fn c8_selection() -> Outcome {
    let su = setup()?;
    let k = 8;
    let model = mixed(k)?;
    let points = &su.points[..SELECTION_POINTS];
    let mut lines = Vec::new();
    let mut failures = Vec::new();
    for p in [0.1, 0.25] {
        let policy = policy_for(&model, k, p)?;
        let r = compare_selections(&model, points, k, p, Some((&policy, false)), SUBSET_LIMIT, 5).map_err(err)?;
        let rl = r.policy.ok_or("policy row missing")?;
        let best = r.best.ok_or("brute-force optimum missing at L=8")?;
        lines.push(format!(
            "p={p} T'={}: best {best:.4} policy {rl:.4} random {:.4} ppl_desc {:.4} ppl_asc {:.4}",
            r.t_prime, r.random, r.ppl_desc, r.ppl_asc
        ));
        if rl < r.random {
            failures.push(format!("p={p}: policy below random"));
        }
        if r.ppl_desc < r.random {
            failures.push(format!("p={p}: ppl_desc below random"));
        }
        if best - rl > best - r.random {
            failures.push(format!("p={p}: policy gap to best exceeds random's"));
        }
    }
    let detail = format!("rewards (-NLL) {}", lines.join("; "));
    if failures.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{detail}; {}", failures.join(", ")))
    }
}

pub fn c9_rate_ordering() -> Outcome {
    let mut losses = Vec::new();
    for k in [4, 8, 16] {
        losses.push((k, compressed_nll(&cpt(k, true)?, k)?));
    }
    let detail = losses.iter().map(|(k, l)| format!("k={k}: {l:.4}")).collect::<Vec<_>>().join(", ");
    if losses.windows(2).all(|w| w[1].1 >= w[0].1) {
        Ok(format!("final held-out CPT NLL {detail}"))
    } else {
        Err(format!("final held-out CPT NLL {detail}; not non-decreasing in k"))
    }
}
