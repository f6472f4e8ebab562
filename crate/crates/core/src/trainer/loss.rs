//! Clipped surrogate and clipped value losses with analytic derivatives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::PaddedBatch;
use crate::policy::PolicyParams;

use super::PpoConfig;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoLosses {
    pub pg_loss: f64,
    pub vf_loss: f64,
    pub total: f64,
}

/// Aligned per-position rows feeding the loss.
#[derive(Debug, Clone, Copy)]
pub struct LossRows<'a> {
    pub logprobs_new: &'a [Vec<f64>],
    pub logprobs_old: &'a [Vec<f64>],
    pub advantages: &'a [Vec<f64>],
    pub vpreds: &'a [Vec<f64>],
    pub values_old: &'a [Vec<f64>],
    pub returns: &'a [Vec<f64>],
    pub masks: &'a [Vec<bool>],
}

/// Losses plus their derivatives with respect to each new log-probability and
/// each value prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDerivatives {
    pub losses: PpoLosses,
    pub d_logprob: Vec<Vec<f64>>,
    pub d_vpred: Vec<Vec<f64>>,
}

impl LossRows<'_> {
    fn check(&self) -> Result<usize> {
        let rows = self.masks.len();
        let all = [
            self.logprobs_new,
            self.logprobs_old,
            self.advantages,
            self.vpreds,
            self.values_old,
            self.returns,
        ];
        if all.iter().any(|a| a.len() != rows) {
            return Err(Error::Contract("loss inputs have different row counts".into()));
        }
        for r in 0..rows {
            let w = self.masks[r].len();
            if all.iter().any(|a| a[r].len() != w) {
                return Err(Error::Contract(format!("loss inputs differ in width at row {r}")));
            }
        }
        let count = self.masks.iter().flatten().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Contract(
                "loss needs at least one generated position".into(),
            ));
        }
        Ok(count)
    }
}

pub fn ppo_losses(rows: &LossRows<'_>, cfg: &PpoConfig) -> Result<PpoLosses> {
    Ok(loss_derivatives(rows, cfg)?.losses)
}

/// At a tie between the clipped and unclipped terms the unclipped branch is
/// differentiated; the two agree in value there.
pub fn loss_derivatives(rows: &LossRows<'_>, cfg: &PpoConfig) -> Result<LossDerivatives> {
    let count = rows.check()?;
    let inv = 1.0 / count as f64;
    let lo = 1.0 - cfg.cliprange;
    let hi = 1.0 + cfg.cliprange;
    let mut pg = 0.0;
    let mut vf = 0.0;
    let mut d_logprob = Vec::with_capacity(rows.masks.len());
    let mut d_vpred = Vec::with_capacity(rows.masks.len());

    for r in 0..rows.masks.len() {
        let w = rows.masks[r].len();
        let mut dl = vec![0.0; w];
        let mut dv = vec![0.0; w];
        for t in 0..w {
            if !rows.masks[r][t] {
                continue;
            }
            let adv = rows.advantages[r][t];
            let ratio = (rows.logprobs_new[r][t] - rows.logprobs_old[r][t]).exp();
            let unclipped = -adv * ratio;
            let clipped = -adv * ratio.clamp(lo, hi);
            if unclipped >= clipped {
                pg += unclipped;
                dl[t] = -adv * ratio * inv;
            } else {
                pg += clipped;
            }

            let vpred = rows.vpreds[r][t];
            let old = rows.values_old[r][t];
            let ret = rows.returns[r][t];
            let vclipped = vpred.clamp(old - cfg.cliprange_value, old + cfg.cliprange_value);
            let e1 = (vpred - ret).powi(2);
            let e2 = (vclipped - ret).powi(2);
            if e1 >= e2 {
                vf += e1;
                dv[t] = 2.0 * (vpred - ret) * inv * cfg.vf_coef;
            } else {
                vf += e2;
            }
        }
        d_logprob.push(dl);
        d_vpred.push(dv);
    }
    let pg_loss = pg * inv;
    let vf_loss = vf * inv;
    Ok(LossDerivatives {
        losses: PpoLosses {
            pg_loss,
            vf_loss,
            total: pg_loss + cfg.vf_coef * vf_loss,
        },
        d_logprob,
        d_vpred,
    })
}

/// Total loss of `params` on `batch` and its gradient over every parameter.
///
/// Old log-probabilities and values are read from `batch.logprobs_actor` and
/// `batch.values`; only generated positions are evaluated.
pub fn ppo_loss_and_grad(
    params: &PolicyParams,
    batch: &PaddedBatch,
    advantages: &[Vec<f64>],
    returns: &[Vec<f64>],
    cfg: &PpoConfig,
) -> Result<(PpoLosses, Vec<f64>)> {
    let positions = batch.positions();
    let mut feats_cache = Vec::with_capacity(batch.rows());
    let mut new_lp = Vec::with_capacity(batch.rows());
    let mut vpreds = Vec::with_capacity(batch.rows());
    for row in 0..batch.rows() {
        let mut row_feats = vec![None; positions];
        let mut lp_row = vec![0.0; positions];
        let mut v_row = vec![0.0; positions];
        for t in 0..positions {
            if !batch.masks[row][t] {
                continue;
            }
            let (Some(context), Some(target)) = (batch.context(row, t), batch.target(row, t)) else {
                return Err(Error::Contract(format!(
                    "masked position {t} of row {row} is padding"
                )));
            };
            let feats = params.features(context);
            let lp = params.log_probs_from_features(&feats);
            lp_row[t] = lp[target as usize];
            v_row[t] = params.value_from_features(&feats);
            row_feats[t] = Some((feats, lp, target));
        }
        feats_cache.push(row_feats);
        new_lp.push(lp_row);
        vpreds.push(v_row);
    }

    let derivs = loss_derivatives(
        &LossRows {
            logprobs_new: &new_lp,
            logprobs_old: &batch.logprobs_actor,
            advantages,
            vpreds: &vpreds,
            values_old: &batch.values,
            returns,
            masks: &batch.masks,
        },
        cfg,
    )?;

    let mut grad = vec![0.0; params.num_params()];
    for (row, row_feats) in feats_cache.iter().enumerate() {
        for (t, entry) in row_feats.iter().enumerate() {
            if let Some((feats, lp, target)) = entry {
                params.accumulate_logprob_grad(feats, lp, *target, derivs.d_logprob[row][t], &mut grad);
                params.accumulate_value_grad(feats, derivs.d_vpred[row][t], &mut grad);
            }
        }
    }
    Ok((derivs.losses, grad))
}
