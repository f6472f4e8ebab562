//! KL-shaped per-token rewards and the adaptive KL coefficient.
//!
//! Each generated position earns `-beta * (log pi_theta - log pi_ref)` for the
//! token it emitted; the last generated position also receives the terminal
//! environment score. The coefficient `beta` is tracked by a log-space
//! proportional controller that steers the measured per-token log-ratio
//! toward a target.
//!
//! The KL estimate is the signed mean of sampled log-ratios, so it can be
//! negative. It is passed to the controller unclamped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{PaddedBatch, Trajectory};

/// Bound on the normalized controller error.
pub const CONTROLLER_CLIP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaController {
    pub beta: f64,
    pub kl_target: f64,
    pub k_beta: f64,
}

impl Default for BetaController {
    fn default() -> Self {
        Self {
            beta: 0.2,
            kl_target: 6.0,
            k_beta: 0.0128,
        }
    }
}

impl BetaController {
    pub fn new(beta: f64, kl_target: f64, k_beta: f64) -> Result<Self> {
        let ctrl = Self {
            beta,
            kl_target,
            k_beta,
        };
        ctrl.validate()?;
        Ok(ctrl)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) || !self.beta.is_finite() {
            return Err(Error::InvalidArgument("beta must be > 0".into()));
        }
        if !(self.kl_target > 0.0) || !self.kl_target.is_finite() {
            return Err(Error::InvalidArgument("kl_target must be > 0".into()));
        }
        // k_beta * clip < 1 keeps beta positive under every update
        if !(self.k_beta > 0.0 && self.k_beta * CONTROLLER_CLIP < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "k_beta must lie in (0, {})",
                1.0 / CONTROLLER_CLIP
            )));
        }
        Ok(())
    }

    /// Clipped normalized error for a measured KL.
    pub fn error(&self, kl_hat: f64) -> f64 {
        ((kl_hat - self.kl_target) / self.kl_target).clamp(-CONTROLLER_CLIP, CONTROLLER_CLIP)
    }

    /// `beta <- beta * (1 + k_beta * e)`.
    pub fn update(&self, kl_hat: f64) -> Self {
        Self {
            beta: self.beta * (1.0 + self.k_beta * self.error(kl_hat)),
            ..*self
        }
    }
}

/// Shaped reward row for one set of aligned per-position arrays.
pub fn shaped_rewards(
    logprobs_actor: &[f64],
    logprobs_ref: &[f64],
    masks: &[bool],
    env_score: f64,
    beta: f64,
) -> Result<Vec<f64>> {
    let last = masks
        .iter()
        .rposition(|&m| m)
        .ok_or_else(|| Error::Contract("mask row has no generated position".into()))?;
    let mut rewards: Vec<f64> = masks
        .iter()
        .zip(logprobs_actor.iter().zip(logprobs_ref))
        .map(|(&m, (a, r))| if m { -beta * (a - r) } else { 0.0 })
        .collect();
    rewards[last] += env_score;
    Ok(rewards)
}

/// Shaped rewards for a single episode.
pub fn per_token_rewards(traj: &Trajectory, beta: f64) -> Result<Vec<f64>> {
    shaped_rewards(
        &traj.logprobs_actor,
        &traj.logprobs_ref,
        &traj.masks,
        traj.env_score,
        beta,
    )
}

/// Fills `batch.rewards` in place from its logprob rows and env scores.
pub fn shape_batch(batch: &mut PaddedBatch, beta: f64) -> Result<()> {
    for row in 0..batch.rows() {
        batch.rewards[row] = shaped_rewards(
            &batch.logprobs_actor[row],
            &batch.logprobs_ref[row],
            &batch.masks[row],
            batch.env_scores[row],
            beta,
        )?;
    }
    Ok(())
}

/// Mean over masked-in positions of the sampled log-ratio.
pub fn kl_estimate_rows(
    logprobs_actor: &[Vec<f64>],
    logprobs_ref: &[Vec<f64>],
    masks: &[Vec<bool>],
) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((a_row, r_row), m_row) in logprobs_actor.iter().zip(logprobs_ref).zip(masks) {
        for ((a, r), &m) in a_row.iter().zip(r_row).zip(m_row) {
            if m {
                sum += a - r;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(
            "KL estimate needs at least one generated position".into(),
        ));
    }
    Ok(sum / count as f64)
}

pub fn kl_estimate(trajectories: &[Trajectory]) -> Result<f64> {
    let actor: Vec<_> = trajectories.iter().map(|t| t.logprobs_actor.clone()).collect();
    let reference: Vec<_> = trajectories.iter().map(|t| t.logprobs_ref.clone()).collect();
    let masks: Vec<_> = trajectories.iter().map(|t| t.masks.clone()).collect();
    kl_estimate_rows(&actor, &reference, &masks)
}

pub fn kl_estimate_batch(batch: &PaddedBatch) -> Result<f64> {
    kl_estimate_rows(&batch.logprobs_actor, &batch.logprobs_ref, &batch.masks)
}
