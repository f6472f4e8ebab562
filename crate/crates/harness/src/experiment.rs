//! End-to-end experiment pipeline.
//!
//! Shared inputs (prompt sets, text corpora, base and reference models) are
//! derived from the dataset seed alone, so every run seed and every arm sees
//! the same reference model and test prompts. Run seeds only drive the RL
//! rollouts and evaluation sampling.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rarlhf_core::env::{
    generate_corpus, generate_dataset, load_prompts_csv, MixtureSpec, PromptDataset, Split, ValenceEnv,
};
use rarlhf_core::eval::{
    corpus_perplexity, sample_completions, uniform_edges, write_report, EvalReport, EvalSamples,
};
use rarlhf_core::mdp::{TokenId, Vocab};
use rarlhf_core::policy::{sft_fit, PolicyParams, ReferencePolicy};
use rarlhf_core::rng;
use rarlhf_core::schedule::RiskSchedule;
use rarlhf_core::trainer::{
    checkpoint, read_stats_csv, train, IterationStats, Objective, RunOutputs, TrainContext, TrainerState,
};
use serde::{Deserialize, Serialize};

use crate::config::{Arm, ExperimentConfig};

pub const CODE_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

const DATASET_STREAM: u64 = 0xDA7A;
const CORPUS_STREAM: u64 = 0xC0;

/// Everything a run needs that does not depend on the run seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub vocab: Vocab,
    pub env: ValenceEnv,
    pub train: PromptDataset,
    pub test: PromptDataset,
    /// Model fitted on the mixed-class corpus.
    pub base: PolicyParams,
    /// Reference model: the base model fine-tuned on positive-class text.
    pub sft: PolicyParams,
    /// Held-out positive-class sequences for perplexity.
    pub heldout: Vec<Vec<TokenId>>,
    /// Histogram edges shared by every model evaluated on this environment.
    pub edges: Vec<f64>,
}

pub fn histogram_edges(cfg: &ExperimentConfig) -> Result<Vec<f64>> {
    let bound = cfg.env.scale + cfg.env.repetition_penalty;
    Ok(uniform_edges(-bound, bound, cfg.eval.histogram_bins)?)
}

fn prompt_set(
    cfg: &ExperimentConfig,
    env: &ValenceEnv,
    vocab: &Vocab,
    csv: Option<&Path>,
    n: usize,
    split: Split,
) -> Result<PromptDataset> {
    if let Some(path) = csv {
        let data = load_prompts_csv(path, vocab, Some(env), split)
            .with_context(|| format!("loading prompts from {}", path.display()))?;
        if data.is_empty() {
            bail!("prompt file {} has no rows", path.display());
        }
        return Ok(data);
    }
    let key = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    let mut r = rng::stream(cfg.dataset.seed, &[DATASET_STREAM, key]);
    Ok(generate_dataset(env, &cfg.dataset.mixture, n, split, &mut r)?)
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    let vocab = Vocab::new(cfg.env.vocab_size)?;
    let env = ValenceEnv::linear(cfg.env.vocab_size, cfg.env.repetition_penalty, cfg.env.scale)?;
    let train = prompt_set(
        cfg,
        &env,
        &vocab,
        cfg.dataset.train_csv.as_deref(),
        cfg.dataset.train_prompts,
        Split::Train,
    )?;
    let test = prompt_set(
        cfg,
        &env,
        &vocab,
        cfg.dataset.test_csv.as_deref(),
        cfg.dataset.test_prompts,
        Split::Test,
    )?;

    let sup = &cfg.supervised;
    let mixture = &cfg.dataset.mixture;
    let positive_only = MixtureSpec {
        positive_fraction: 1.0,
        ..mixture.clone()
    };
    let corpus = |spec, n, key| -> Result<Vec<Vec<TokenId>>> {
        let mut r = rng::stream(cfg.dataset.seed, &[CORPUS_STREAM, key]);
        Ok(
            generate_corpus(&env, spec, n, sup.continuation_len, sup.fidelity, &mut r)?
                .into_iter()
                .map(|s| s.tokens)
                .collect(),
        )
    };
    let base_corpus = corpus(mixture, sup.base_corpus, 0)?;
    let sft_corpus = corpus(&positive_only, sup.sft_corpus, 1)?;
    let heldout = corpus(&positive_only, sup.heldout, 2)?;

    let zeros = PolicyParams::zeros(cfg.env.vocab_size, cfg.policy.window)?;
    let base = sft_fit(&zeros, &base_corpus, &sup.base)?;
    log::info!(
        "base model cross-entropy {:.4} -> {:.4}",
        base.history[0],
        base.history.last().copied().unwrap_or(f64::NAN)
    );
    let sft = sft_fit(&base.params, &sft_corpus, &sup.sft)?;
    log::info!(
        "reference model cross-entropy {:.4} -> {:.4}",
        sft.history[0],
        sft.history.last().copied().unwrap_or(f64::NAN)
    );

    Ok(Prepared {
        vocab,
        env,
        train,
        test,
        base: base.params,
        sft: sft.params,
        heldout,
        edges: histogram_edges(cfg)?,
    })
}

/// What to train for one run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ArmSpec {
    Sft,
    Rlhf,
    RaRlhf(RiskSchedule),
}

impl ArmSpec {
    pub fn from_config(cfg: &ExperimentConfig, arm: Arm) -> Result<Self> {
        Ok(match arm {
            Arm::Sft => ArmSpec::Sft,
            Arm::Rlhf => ArmSpec::Rlhf,
            Arm::RaRlhf => ArmSpec::RaRlhf(cfg.risk_schedule()?),
        })
    }

    pub fn arm(&self) -> Arm {
        match self {
            ArmSpec::Sft => Arm::Sft,
            ArmSpec::Rlhf => Arm::Rlhf,
            ArmSpec::RaRlhf(_) => Arm::RaRlhf,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleMeta {
    pub alpha: f64,
    pub warm_start: usize,
    pub rho: f64,
}

/// Identity of the scoring environment; reports refuse to merge runs whose
/// fingerprints differ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvFingerprint {
    pub vocab_size: usize,
    pub scale: f64,
    pub repetition_penalty: f64,
    pub horizon: usize,
    pub histogram_edges: Vec<f64>,
}

/// `run.json`: enough, with the config snapshot beside it, to reproduce the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub label: String,
    pub arm: Arm,
    pub seed: u64,
    pub code_version: String,
    pub experiment: String,
    pub iterations: usize,
    pub schedule: Option<ScheduleMeta>,
    pub env: EnvFingerprint,
}

pub fn fingerprint(cfg: &ExperimentConfig, prepared: &Prepared) -> EnvFingerprint {
    EnvFingerprint {
        vocab_size: cfg.env.vocab_size,
        scale: cfg.env.scale,
        repetition_penalty: cfg.env.repetition_penalty,
        horizon: cfg.env.horizon,
        histogram_edges: prepared.edges.clone(),
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub meta: RunMeta,
    pub stats: Vec<IterationStats>,
    pub policy: PolicyParams,
    pub samples: EvalSamples,
    pub report: EvalReport,
}

/// Samples completions on the test prompts and assembles the report.
pub fn evaluate(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    policy: &PolicyParams,
    label: &str,
    seed: u64,
) -> Result<(EvalSamples, EvalReport)> {
    let samples = sample_completions(
        policy,
        &prepared.vocab,
        &prepared.env,
        &prepared.test.prompts,
        &cfg.rollout(),
        cfg.eval.seed.wrapping_add(seed),
    )?;
    let ppl = corpus_perplexity(policy, &prepared.heldout)?;
    let report = EvalReport::build(label, &samples, &prepared.edges, &cfg.eval, ppl)?;
    Ok((samples, report))
}

/// Where one run writes; `None` keeps everything in memory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub path: PathBuf,
    pub resume: bool,
}

impl RunDir {
    pub fn stats_csv(&self) -> PathBuf {
        self.path.join("stats.csv")
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.path.join("checkpoints")
    }

    pub fn eval(&self) -> PathBuf {
        self.path.join("eval")
    }
}

pub fn run_dir_for(root: &Path, seed: u64, label: &str) -> PathBuf {
    root.join(format!("seed-{seed}")).join(label)
}

/// Trains (unless the arm is SFT) and evaluates one arm under one seed.
pub fn run_arm(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    seed: u64,
    spec: ArmSpec,
    label: &str,
    dir: Option<&RunDir>,
) -> Result<RunOutcome> {
    let objective = match spec {
        ArmSpec::Sft => None,
        ArmSpec::Rlhf => Some(Objective::RiskNeutral),
        ArmSpec::RaRlhf(s) => Some(Objective::RiskAverse(s)),
    };
    let meta = RunMeta {
        label: label.to_string(),
        arm: spec.arm(),
        seed,
        code_version: CODE_VERSION.to_string(),
        experiment: cfg.experiment.name.clone(),
        iterations: if objective.is_some() {
            cfg.train.iterations
        } else {
            0
        },
        schedule: match spec {
            ArmSpec::RaRlhf(s) => Some(ScheduleMeta {
                alpha: s.alpha,
                warm_start: s.warm_start,
                rho: s.rho,
            }),
            _ => None,
        },
        env: fingerprint(cfg, prepared),
    };
    if let Some(d) = dir {
        fs::create_dir_all(&d.path).with_context(|| format!("creating {}", d.path.display()))?;
        write_text(&d.path.join("config.toml"), &cfg.to_toml())?;
    }

    let (policy, stats) = match objective {
        None => (prepared.sft.clone(), Vec::new()),
        Some(objective) => {
            let train_cfg = cfg.train_config(objective);
            let ctx = TrainContext {
                vocab: &prepared.vocab,
                env: &prepared.env,
                prompts: &prepared.train.prompts,
                config: &train_cfg,
            };
            let mut state = TrainerState::new(
                prepared.sft.clone(),
                ReferencePolicy::new(prepared.sft.clone()),
                cfg.controller,
                cfg.ppo.learning_rate,
                seed,
            );
            let mut prior = Vec::new();
            if let Some(d) = dir.filter(|d| d.resume) {
                if let Some(path) = checkpoint::latest(&d.checkpoints())? {
                    let loaded = checkpoint::load(&path)?;
                    if loaded.seed != seed {
                        bail!(
                            "checkpoint {} belongs to seed {}, not {seed}",
                            path.display(),
                            loaded.seed
                        );
                    }
                    log::info!("resuming {label} seed {seed} from iteration {}", loaded.iteration);
                    state = loaded;
                    if d.stats_csv().exists() {
                        prior = read_stats_csv(&d.stats_csv())?;
                    }
                }
            }
            let outputs = match dir {
                Some(d) => RunOutputs {
                    stats_csv: Some(d.stats_csv()),
                    checkpoint_dir: Some(d.checkpoints()),
                },
                None => RunOutputs::default(),
            };
            let out = train(state, &ctx, prior, &outputs, |_| {})?;
            (out.state.policy, out.stats)
        }
    };

    let (samples, report) = evaluate(cfg, prepared, &policy, label, seed)?;
    if let Some(d) = dir {
        write_report(&report, &samples, &d.eval())?;
        let json = serde_json::to_string_pretty(&meta)?;
        write_text(&d.path.join("run.json"), &json)?;
    }
    Ok(RunOutcome {
        meta,
        stats,
        policy,
        samples,
        report,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Creates `dir`, refusing to reuse a nonempty one unless `force` (wipe
/// first) or `resume` (keep contents) is set.
pub fn prepare_output_dir(dir: &Path, force: bool, resume: bool) -> Result<()> {
    let nonempty = dir.exists()
        && fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
    if nonempty && !resume {
        if !force {
            bail!(
                "output directory {} already exists; pass --force to overwrite or --resume to continue",
                dir.display()
            );
        }
        fs::remove_dir_all(dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Runs every configured arm for one seed, in config order.
pub fn run_seed(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    seed: u64,
    root: Option<&Path>,
    resume: bool,
) -> Result<Vec<RunOutcome>> {
    cfg.experiment
        .arms
        .iter()
        .map(|&arm| {
            let spec = ArmSpec::from_config(cfg, arm)?;
            let dir = root.map(|r| RunDir {
                path: run_dir_for(r, seed, arm.label()),
                resume,
            });
            let out = run_arm(cfg, prepared, seed, spec, arm.label(), dir.as_ref())?;
            log::info!(
                "seed {seed} {arm}: mean {:.4} bottom-decile {:.4} tail {:?}",
                out.report.mean_score,
                out.report.bottom_quantile_mean(),
                out.report.headline_tail_average()
            );
            Ok(out)
        })
        .collect()
}

/// One row of a risk-schedule sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub warm_start: usize,
    pub alpha: f64,
    pub rho: f64,
    pub seed: u64,
    pub mean_score: f64,
    pub tail_average: Option<f64>,
    pub bottom_quantile_mean: f64,
    pub perplexity: Option<f64>,
    pub dist_2: f64,
}

/// Trains and evaluates RA-RLHF at every `(warm_start, alpha, rho)` point
/// for every seed.
pub fn sweep(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    points: &[(usize, f64, f64)],
    seeds: &[u64],
    root: Option<&Path>,
) -> Result<Vec<SweepRow>> {
    if points.is_empty() {
        bail!("sweep grid is empty");
    }
    let mut rows = Vec::new();
    for &(warm_start, alpha, rho) in points {
        let schedule = cfg
            .risk_schedule_with(alpha, warm_start, rho)
            .with_context(|| format!("grid point i0={warm_start} alpha={alpha} rho={rho}"))?;
        for &seed in seeds {
            let label = format!("ra-rlhf_i0-{warm_start}_a-{alpha}_rho-{rho}");
            let dir = root.map(|r| RunDir {
                path: run_dir_for(r, seed, &label),
                resume: false,
            });
            let out = run_arm(
                cfg,
                prepared,
                seed,
                ArmSpec::RaRlhf(schedule),
                &label,
                dir.as_ref(),
            )?;
            rows.push(SweepRow {
                warm_start,
                alpha,
                rho,
                seed,
                mean_score: out.report.mean_score,
                tail_average: out.report.headline_tail_average(),
                bottom_quantile_mean: out.report.bottom_quantile_mean(),
                perplexity: out.report.perplexity,
                dist_2: out.report.dist_2,
            });
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
