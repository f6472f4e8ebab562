//! Generalized advantage estimation and masked whitening.

use crate::error::{Error, Result};

/// Variance guard used when whitening.
pub const WHITEN_EPS: f64 = 1e-8;

/// Advantages and return targets for one row.
///
/// `delta_t = r_t + gamma V_{t+1} - V_t` with the value beyond the last
/// generated position taken as zero, `A_t = delta_t + gamma lam A_{t+1}`,
/// and targets `A + V`. Positions outside the mask are left at zero.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    masks: &[bool],
    gamma: f64,
    lam: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if rewards.len() != values.len() || rewards.len() != masks.len() {
        return Err(Error::Contract(format!(
            "row lengths differ: rewards {}, values {}, masks {}",
            rewards.len(),
            values.len(),
            masks.len()
        )));
    }
    let n = rewards.len();
    let mut advantages = vec![0.0; n];
    let mut returns = vec![0.0; n];
    let mut next_value = 0.0;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        if !masks[t] {
            next_value = 0.0;
            next_adv = 0.0;
            continue;
        }
        let delta = rewards[t] + gamma * next_value - values[t];
        let adv = delta + gamma * lam * next_adv;
        advantages[t] = adv;
        returns[t] = adv + values[t];
        next_value = values[t];
        next_adv = adv;
    }
    Ok((advantages, returns))
}

/// Row-wise [`compute_gae`] over a batch.
/// Per-row advantages and returns.
pub type GaeRows = (Vec<Vec<f64>>, Vec<Vec<f64>>);

pub fn compute_gae_rows(
    rewards: &[Vec<f64>],
    values: &[Vec<f64>],
    masks: &[Vec<bool>],
    gamma: f64,
    lam: f64,
) -> Result<GaeRows> {
    if rewards.len() != values.len() || rewards.len() != masks.len() {
        return Err(Error::Contract("batch row counts differ".into()));
    }
    let mut advs = Vec::with_capacity(rewards.len());
    let mut rets = Vec::with_capacity(rewards.len());
    for ((r, v), m) in rewards.iter().zip(values).zip(masks) {
        let (a, ret) = compute_gae(r, v, m, gamma, lam)?;
        advs.push(a);
        rets.push(ret);
    }
    Ok((advs, rets))
}

/// Shifts and scales the masked-in entries to zero mean and unit (population)
/// standard deviation. Masked-out entries are copied through unchanged. With
/// fewer than two masked entries the input is returned as is.
pub fn whiten(values: &[Vec<f64>], masks: &[Vec<bool>]) -> Vec<Vec<f64>> {
    let picked = || {
        values
            .iter()
            .zip(masks)
            .flat_map(|(v, m)| v.iter().zip(m).filter(|(_, &m)| m).map(|(x, _)| *x))
    };
    let count = picked().count();
    if count < 2 {
        log::warn!("skipping whitening: only {count} masked entries");
        return values.to_vec();
    }
    let mean = picked().sum::<f64>() / count as f64;
    let var = picked().map(|x| (x - mean) * (x - mean)).sum::<f64>() / count as f64;
    let scale = 1.0 / (var + WHITEN_EPS).sqrt();
    values
        .iter()
        .zip(masks)
        .map(|(row, m)| {
            row.iter()
                .zip(m)
                .map(|(&x, &keep)| if keep { (x - mean) * scale } else { x })
                .collect()
        })
        .collect()
}
