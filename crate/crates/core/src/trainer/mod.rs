//! Risk-averse PPO training loop.
//!
//! Each iteration samples `B` prompts, rolls out the current policy, shapes
//! rewards with the KL penalty, keeps the `B0` lowest-return episodes given
//! by the risk schedule, and runs clipped PPO epochs on that subset. The KL
//! coefficient is updated after the epochs from the subset's KL estimate.
//!
//! Every random draw comes from a stream keyed by `(seed, iteration, ...)`,
//! so an iteration's outcome depends only on the state entering it. This is
//! what makes resumed runs match uninterrupted ones and lets rollouts run in
//! parallel without changing results.

pub mod checkpoint;
pub mod gae;
pub mod loss;

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{csv_error, ValenceEnv};
use crate::error::{Error, Result};
use crate::eval::mean_dist_n;
use crate::mdp::{pad_batch, rollout, PaddedBatch, Prompt, RolloutConfig, Trajectory, Vocab};
use crate::optim::Adam;
use crate::policy::{batched_forward_pass, PolicyParams, ReferencePolicy};
use crate::rng;
use crate::schedule::RiskSchedule;
use crate::shaping::{kl_estimate_batch, shape_batch, BetaController};

pub use gae::{compute_gae, compute_gae_rows, whiten};
pub use loss::{loss_derivatives, ppo_loss_and_grad, ppo_losses, LossRows, PpoLosses};

const PROMPT_STREAM: u64 = 1;
const ROLLOUT_STREAM: u64 = 2;
const MINIBATCH_STREAM: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PpoConfig {
    pub gamma: f64,
    pub lam: f64,
    pub cliprange: f64,
    pub cliprange_value: f64,
    pub vf_coef: f64,
    pub ppo_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Rows per optimizer step; `None` uses the whole selected subset.
    #[serde(default)]
    pub minibatch_size: Option<usize>,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 1.0,
            lam: 0.95,
            cliprange: 0.2,
            cliprange_value: 0.2,
            vf_coef: 0.1,
            ppo_epochs: 4,
            learning_rate: 1.41e-5,
            batch_size: 128,
            minibatch_size: None,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidArgument(msg.to_string()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.lam) {
            return bad("lam must lie in [0, 1]");
        }
        if !(self.cliprange > 0.0) || !(self.cliprange_value > 0.0) {
            return bad("clip ranges must be > 0");
        }
        if !(self.vf_coef >= 0.0) {
            return bad("vf_coef must be >= 0");
        }
        if self.ppo_epochs == 0 {
            return bad("ppo_epochs must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.minibatch_size == Some(0) {
            return bad("minibatch_size must be at least 1");
        }
        Ok(())
    }
}

/// Risk-neutral PPO uses every episode; risk-averse PPO keeps the schedule's
/// lowest-return subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    RiskNeutral,
    RiskAverse(RiskSchedule),
}

/// Which return ranks episodes for tail selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectOn {
    /// Sum of the KL-shaped per-token rewards.
    #[default]
    Shaped,
    /// Terminal environment score only.
    Env,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub ppo: PpoConfig,
    pub objective: Objective,
    pub select_on: SelectOn,
    pub rollout: RolloutConfig,
    /// Total iterations `M`.
    pub iterations: usize,
    /// Checkpoint every this many iterations; the last iteration is always
    /// checkpointed. Zero keeps only the final one.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.ppo.validate()?;
        if self.iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if let Objective::RiskAverse(s) = &self.objective {
            s.validate()?;
            if s.batch_size != self.ppo.batch_size || s.total_iterations != self.iterations {
                return Err(Error::InvalidArgument(
                    "risk schedule batch size and iteration count must match the trainer".into(),
                ));
            }
        }
        if self.rollout.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be at least 1".into()));
        }
        Ok(())
    }

    /// `B0` for iteration `i`.
    pub fn quota(&self, iteration: usize) -> Result<usize> {
        match &self.objective {
            Objective::RiskNeutral => Ok(self.ppo.batch_size),
            Objective::RiskAverse(s) => s.batch_quota(iteration),
        }
    }
}

/// Everything that changes across iterations.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState {
    /// Iterations completed so far.
    pub iteration: usize,
    pub seed: u64,
    pub policy: PolicyParams,
    pub reference: ReferencePolicy,
    pub controller: BetaController,
    pub optimizer: Adam,
}

impl TrainerState {
    pub fn new(
        policy: PolicyParams,
        reference: ReferencePolicy,
        controller: BetaController,
        learning_rate: f64,
        seed: u64,
    ) -> Self {
        let optimizer = Adam::new(policy.num_params(), learning_rate);
        Self {
            iteration: 0,
            seed,
            policy,
            reference,
            controller,
            optimizer,
        }
    }
}

/// Fixed inputs shared by every iteration.
#[derive(Debug, Clone, Copy)]
pub struct TrainContext<'a> {
    pub vocab: &'a Vocab,
    pub env: &'a ValenceEnv,
    pub prompts: &'a [Prompt],
    pub config: &'a TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: usize,
    /// Mean terminal score over all `B` episodes.
    pub env_reward_mean: f64,
    /// Mean over all `B` episodes of the summed shaped rewards.
    pub shaped_return_mean: f64,
    /// KL estimate on the selected subset, fed to the controller.
    pub kl_hat: f64,
    /// Coefficient used to shape this iteration's rewards.
    pub beta: f64,
    #[serde(rename = "B0")]
    pub b0: usize,
    /// Losses averaged over every optimizer step of the iteration.
    pub pg_loss: f64,
    pub vf_loss: f64,
    pub total_loss: f64,
    pub gen_len_mean: f64,
    pub dist2_mean: f64,
}

/// A sampled, scored, shaped and padded batch, before any update.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollouts {
    pub trajectories: Vec<Trajectory>,
    pub batch: PaddedBatch,
}

/// Samples `B` prompts, generates and scores completions, and fills in
/// reference log-probabilities, old log-probabilities, values and shaped
/// rewards for iteration `i`.
pub fn collect_rollouts(state: &TrainerState, ctx: &TrainContext<'_>, iteration: usize) -> Result<Rollouts> {
    if ctx.prompts.is_empty() {
        return Err(Error::InvalidArgument("prompt dataset is empty".into()));
    }
    let b = ctx.config.ppo.batch_size;
    let mut prompt_rng = rng::stream(state.seed, &[iteration as u64, PROMPT_STREAM]);
    let picks: Vec<usize> = (0..b)
        .map(|_| prompt_rng.random_range(0..ctx.prompts.len()))
        .collect();

    let trajectories = picks
        .par_iter()
        .enumerate()
        .map(|(j, &p)| {
            let mut ep_rng = rng::stream(state.seed, &[iteration as u64, ROLLOUT_STREAM, j as u64]);
            let mut traj = rollout(
                &state.policy,
                ctx.vocab,
                &ctx.prompts[p],
                &ctx.config.rollout,
                &mut ep_rng,
            )?;
            traj.env_score = ctx.env.score(&traj.tokens, traj.prompt_len)?;
            Ok(traj)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut batch = pad_batch(&trajectories)?;
    let actor = batched_forward_pass(&state.policy, &batch)?;
    let reference = batched_forward_pass(state.reference.params(), &batch)?;
    batch.logprobs_actor = actor.logprobs;
    batch.values = actor.values;
    batch.logprobs_ref = reference.logprobs;
    shape_batch(&mut batch, state.controller.beta)?;
    Ok(Rollouts { trajectories, batch })
}

fn row_sums(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().map(|r| r.iter().sum()).collect()
}

/// Runs iteration `i` (1-based) and advances `state` past it.
pub fn train_iteration(
    state: &mut TrainerState,
    ctx: &TrainContext<'_>,
    iteration: usize,
) -> Result<IterationStats> {
    let cfg = ctx.config;
    if iteration == 0 || iteration > cfg.iterations {
        return Err(Error::InvalidArgument(format!(
            "iteration {iteration} outside 1..={}",
            cfg.iterations
        )));
    }
    let Rollouts { trajectories, batch } = collect_rollouts(state, ctx, iteration)?;
    let b = batch.rows();

    let shaped_returns = row_sums(&batch.rewards);
    let b0 = cfg.quota(iteration)?;
    let selected = match cfg.objective {
        Objective::RiskNeutral => batch,
        Objective::RiskAverse(_) => {
            let ranking = match cfg.select_on {
                SelectOn::Shaped => &shaped_returns,
                SelectOn::Env => &batch.env_scores,
            };
            let rows = crate::cvar::select_tail(ranking, b0)?;
            batch.select(&rows)
        }
    };

    let (advantages, returns) = compute_gae_rows(
        &selected.rewards,
        &selected.values,
        &selected.masks,
        cfg.ppo.gamma,
        cfg.ppo.lam,
    )?;
    let advantages = whiten(&advantages, &selected.masks);

    let mut loss_sum = PpoLosses::default();
    let mut steps = 0usize;
    let n_sel = selected.rows();
    let mb = cfg.ppo.minibatch_size.unwrap_or(n_sel).min(n_sel);
    for epoch in 0..cfg.ppo.ppo_epochs {
        let mut order: Vec<usize> = (0..n_sel).collect();
        if mb < n_sel {
            let mut shuffle_rng =
                rng::stream(state.seed, &[iteration as u64, MINIBATCH_STREAM, epoch as u64]);
            order.shuffle(&mut shuffle_rng);
        }
        for chunk in order.chunks(mb) {
            let (losses, grad) = if chunk.len() == n_sel && mb == n_sel {
                ppo_loss_and_grad(&state.policy, &selected, &advantages, &returns, &cfg.ppo)?
            } else {
                let sub = selected.select(chunk);
                let pick = |v: &[Vec<f64>]| chunk.iter().map(|&r| v[r].clone()).collect::<Vec<_>>();
                ppo_loss_and_grad(&state.policy, &sub, &pick(&advantages), &pick(&returns), &cfg.ppo)?
            };
            state.optimizer.update(state.policy.as_mut_slice(), &grad);
            loss_sum.pg_loss += losses.pg_loss;
            loss_sum.vf_loss += losses.vf_loss;
            loss_sum.total += losses.total;
            steps += 1;
        }
    }
    if !state.policy.is_finite() {
        return Err(Error::Contract(format!(
            "non-finite parameters after iteration {iteration}"
        )));
    }

    let kl_hat = kl_estimate_batch(&selected)?;
    let beta = state.controller.beta;
    state.controller = state.controller.update(kl_hat);
    state.iteration = iteration;

    let generations: Vec<&[u32]> = trajectories.iter().map(|t| t.generated()).collect();
    let steps_f = steps as f64;
    Ok(IterationStats {
        iteration,
        env_reward_mean: mean(&trajectories.iter().map(|t| t.env_score).collect::<Vec<_>>()),
        shaped_return_mean: shaped_returns.iter().sum::<f64>() / b as f64,
        kl_hat,
        beta,
        b0: n_sel,
        pg_loss: loss_sum.pg_loss / steps_f,
        vf_loss: loss_sum.vf_loss / steps_f,
        total_loss: loss_sum.total / steps_f,
        gen_len_mean: generations.iter().map(|g| g.len()).sum::<usize>() as f64 / b as f64,
        dist2_mean: mean_dist_n(&generations, 2).unwrap_or(f64::NAN),
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Where a run writes its stats and checkpoints. `None` disables the output.
#[derive(Debug, Clone, Default)]
pub struct RunOutputs {
    pub stats_csv: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainerState,
    pub stats: Vec<IterationStats>,
}

/// Stats CSV that is rewritten up to the resume point once and appended to
/// after every iteration.
struct StatsWriter {
    path: PathBuf,
    writer: csv::Writer<fs::File>,
}

impl StatsWriter {
    fn create(path: &Path, prior: &[IterationStats]) -> Result<Self> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        writer
            .write_record(STATS_HEADER)
            .map_err(|e| csv_error(path, e))?;
        let mut out = Self {
            path: path.to_path_buf(),
            writer,
        };
        for s in prior {
            out.append(s)?;
        }
        Ok(out)
    }

    fn append(&mut self, stats: &IterationStats) -> Result<()> {
        self.writer
            .serialize(stats)
            .map_err(|e| csv_error(&self.path, e))?;
        self.writer.flush().map_err(|e| Error::io(&self.path, e))
    }
}

pub const STATS_HEADER: [&str; 11] = [
    "iteration",
    "env_reward_mean",
    "shaped_return_mean",
    "kl_hat",
    "beta",
    "B0",
    "pg_loss",
    "vf_loss",
    "total_loss",
    "gen_len_mean",
    "dist2_mean",
];

pub fn read_stats_csv(path: &Path) -> Result<Vec<IterationStats>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

/// Runs iterations `state.iteration + 1 ..= M`. `prior_stats` holds the rows
/// of already-completed iterations when resuming; `on_iteration` sees each
/// new row.
pub fn train(
    mut state: TrainerState,
    ctx: &TrainContext<'_>,
    prior_stats: Vec<IterationStats>,
    outputs: &RunOutputs,
    mut on_iteration: impl FnMut(&IterationStats),
) -> Result<TrainOutcome> {
    ctx.config.validate()?;
    if state.iteration > ctx.config.iterations {
        return Err(Error::InvalidArgument(format!(
            "state is at iteration {} beyond M = {}",
            state.iteration, ctx.config.iterations
        )));
    }
    let mut stats: Vec<IterationStats> = prior_stats
        .into_iter()
        .filter(|s| s.iteration <= state.iteration)
        .collect();
    let mut writer = match &outputs.stats_csv {
        Some(path) => Some(StatsWriter::create(path, &stats)?),
        None => None,
    };
    for i in state.iteration + 1..=ctx.config.iterations {
        let row = train_iteration(&mut state, ctx, i)?;
        log::info!(
            "iter {i}: env {:.4} kl {:.4} beta {:.5} B0 {}",
            row.env_reward_mean,
            row.kl_hat,
            row.beta,
            row.b0
        );
        if let Some(w) = writer.as_mut() {
            w.append(&row)?;
        }
        on_iteration(&row);
        stats.push(row);
        if let Some(dir) = &outputs.checkpoint_dir {
            let every = ctx.config.checkpoint_every;
            if i == ctx.config.iterations || (every > 0 && i % every == 0) {
                checkpoint::save(&state, &checkpoint::checkpoint_path(dir, i))?;
            }
        }
    }
    Ok(TrainOutcome { state, stats })
}
