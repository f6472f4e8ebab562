//! Empirical quantiles, CVaR, tail selection and the sample-based CVaR
//! policy gradient.
//!
//! The quantile is the lower (inf-CDF) one: the smallest sample whose
//! empirical CDF reaches `alpha`. `cvar` averages every sample at or below
//! that quantile, while [`select_tail`] returns exactly `B0` episodes with
//! ties broken by batch index, so the two can disagree when ties straddle the
//! cut.

use crate::error::{Error, Result};
use crate::schedule::ceil_count;

fn check(returns: &[f64], alpha: f64) -> Result<()> {
    if returns.is_empty() {
        return Err(Error::InvalidArgument("returns must be nonempty".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "alpha must lie in (0, 1], got {alpha}"
        )));
    }
    if returns.iter().any(|r| r.is_nan()) {
        return Err(Error::InvalidArgument("returns contain NaN".into()));
    }
    Ok(())
}

fn sorted(returns: &[f64]) -> Vec<f64> {
    let mut v = returns.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// The `ceil(alpha * N)`-th smallest return.
pub fn empirical_quantile(returns: &[f64], alpha: f64) -> Result<f64> {
    check(returns, alpha)?;
    let k = ceil_count(alpha, returns.len()).max(1);
    Ok(sorted(returns)[k - 1])
}

/// Mean of all returns at or below the empirical `alpha`-quantile.
pub fn cvar(returns: &[f64], alpha: f64) -> Result<f64> {
    let q = empirical_quantile(returns, alpha)?;
    let (sum, count) = returns
        .iter()
        .filter(|&&r| r <= q)
        .fold((0.0, 0usize), |(s, c), &r| (s + r, c + 1));
    Ok(sum / count as f64)
}

/// Indices of the `b0` lowest returns, in ascending batch order. Equal
/// returns are taken lowest index first.
pub fn select_tail(returns: &[f64], b0: usize) -> Result<Vec<usize>> {
    if b0 == 0 || b0 > returns.len() {
        return Err(Error::InvalidArgument(format!(
            "tail size {b0} outside 1..={}",
            returns.len()
        )));
    }
    let mut order: Vec<usize> = (0..returns.len()).collect();
    // stable sort keeps index order among ties
    order.sort_by(|&a, &b| returns[a].total_cmp(&returns[b]));
    let mut picked = order[..b0].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Softmax policy over a small table of discrete states.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularSoftmax {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major `n_states x n_actions` logits.
    pub logits: Vec<f64>,
}

impl TabularSoftmax {
    pub fn new(n_states: usize, n_actions: usize, logits: Vec<f64>) -> Result<Self> {
        if logits.len() != n_states * n_actions || n_actions < 2 {
            return Err(Error::InvalidArgument("logit table has the wrong shape".into()));
        }
        Ok(Self {
            n_states,
            n_actions,
            logits,
        })
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        let row = &self.logits[state * self.n_actions..(state + 1) * self.n_actions];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    /// Adds `coef * d log pi(action | state) / d logits` into `grad`.
    fn accumulate_score(&self, state: usize, action: usize, coef: f64, grad: &mut [f64]) {
        let probs = self.probs(state);
        let row = &mut grad[state * self.n_actions..(state + 1) * self.n_actions];
        for (j, (g, p)) in row.iter_mut().zip(probs).enumerate() {
            let indicator = if j == action { 1.0 } else { 0.0 };
            *g += coef * (indicator - p);
        }
    }
}

/// One episode of a tabular policy: visited `(state, action)` pairs and the
/// episode return.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularEpisode {
    pub steps: Vec<(usize, usize)>,
    pub ret: f64,
}

/// Sample-based CVaR policy gradient with unit importance weights:
/// `1/(alpha B) * sum_i 1{R_i <= q} (R_i - q) * sum_t grad log pi(a_it | s_it)`.
pub fn cvar_pg_gradient(
    policy: &TabularSoftmax,
    episodes: &[TabularEpisode],
    alpha: f64,
) -> Result<Vec<f64>> {
    if episodes.len() < 2 {
        return Err(Error::InvalidArgument(
            "CVaR gradient needs at least two episodes".into(),
        ));
    }
    let returns: Vec<f64> = episodes.iter().map(|e| e.ret).collect();
    let q = empirical_quantile(&returns, alpha)?;
    let scale = 1.0 / (alpha * episodes.len() as f64);
    let mut grad = vec![0.0; policy.logits.len()];
    for ep in episodes.iter().filter(|e| e.ret <= q) {
        let coef = scale * (ep.ret - q);
        for &(s, a) in &ep.steps {
            policy.accumulate_score(s, a, coef, &mut grad);
        }
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Brute force: scan sorted values for the first whose CDF reaches alpha.
    fn quantile_scan(returns: &[f64], alpha: f64) -> f64 {
        let v = sorted(returns);
        let n = v.len() as f64;
        for (i, &x) in v.iter().enumerate() {
            let cdf = v.iter().filter(|&&y| y <= x).count() as f64 / n;
            if cdf >= alpha - 1e-12 || i + 1 == v.len() {
                return x;
            }
        }
        unreachable!()
    }

    #[test]
    fn quantile_examples() {
        let r: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(empirical_quantile(&r, 0.3).unwrap(), 3.0);
        assert_eq!(quantile_scan(&r, 0.3), 3.0);
        assert_eq!(empirical_quantile(&r, 1.0).unwrap(), 10.0);
        assert_eq!(empirical_quantile(&[2.5; 7], 0.35).unwrap(), 2.5);
        assert!(empirical_quantile(&[], 0.5).is_err());
        assert!(empirical_quantile(&[1.0], 0.0).is_err());
    }

    #[test]
    fn cvar_examples() {
        let r: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(cvar(&r, 0.3).unwrap(), 2.0);
        assert_eq!(cvar(&r, 1.0).unwrap(), 5.5);
        assert_eq!(cvar(&[-4.0], 0.2).unwrap(), -4.0);
    }

    #[test]
    fn tail_selection() {
        assert_eq!(select_tail(&[5.0, 1.0, 3.0], 2).unwrap(), vec![1, 2]);
        assert_eq!(select_tail(&[5.0, 1.0, 3.0], 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_tail(&[2.0; 4], 2).unwrap(), vec![0, 1]);
        assert!(select_tail(&[1.0, 2.0], 0).is_err());
        assert!(select_tail(&[1.0, 2.0], 3).is_err());
    }

    #[test]
    fn equal_returns_give_zero_gradient() {
        let policy = TabularSoftmax::new(1, 2, vec![0.3, -0.1]).unwrap();
        let eps: Vec<_> = (0..6)
            .map(|i| TabularEpisode {
                steps: vec![(0, i % 2)],
                ret: 1.5,
            })
            .collect();
        let g = cvar_pg_gradient(&policy, &eps, 0.4).unwrap();
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn alpha_one_is_max_shifted_reinforce() {
        let policy = TabularSoftmax::new(1, 2, vec![0.2, -0.4]).unwrap();
        let eps = vec![
            TabularEpisode {
                steps: vec![(0, 0)],
                ret: 0.0,
            },
            TabularEpisode {
                steps: vec![(0, 1)],
                ret: 1.0,
            },
            TabularEpisode {
                steps: vec![(0, 0)],
                ret: 0.0,
            },
            TabularEpisode {
                steps: vec![(0, 1)],
                ret: 1.0,
            },
        ];
        let g = cvar_pg_gradient(&policy, &eps, 1.0).unwrap();
        // by hand: (1/B) sum (R - max) (e_a - p)
        let p = policy.probs(0);
        let mut expected = [0.0; 2];
        for ep in &eps {
            let a = ep.steps[0].1;
            for j in 0..2 {
                let ind = if j == a { 1.0 } else { 0.0 };
                expected[j] += (ep.ret - 1.0) * (ind - p[j]) / 4.0;
            }
        }
        for (a, b) in g.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    fn brute_cvar(returns: &[f64], alpha: f64) -> f64 {
        let v = sorted(returns);
        let q = quantile_scan(&v, alpha);
        let tail: Vec<f64> = v.into_iter().filter(|&x| x <= q).collect();
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    proptest! {
        #[test]
        fn cvar_matches_enumeration(r in proptest::collection::vec(-5i32..5, 1..12),
                                    a in 1u32..=10) {
            let returns: Vec<f64> = r.iter().map(|&x| f64::from(x) * 0.5).collect();
            let alpha = f64::from(a) / 10.0;
            prop_assert!((cvar(&returns, alpha).unwrap() - brute_cvar(&returns, alpha)).abs() < 1e-12);
        }

        #[test]
        fn cvar_bounded_by_mean_and_monotone(r in proptest::collection::vec(-100.0f64..100.0, 1..30)) {
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let mut prev = f64::NEG_INFINITY;
            for a in 1..=10 {
                let c = cvar(&r, f64::from(a) / 10.0).unwrap();
                prop_assert!(c <= mean + 1e-9);
                prop_assert!(c >= prev - 1e-9);
                prev = c;
            }
            prop_assert!((cvar(&r, 1.0).unwrap() - mean).abs() < 1e-9);
        }

        #[test]
        fn tail_separates_from_complement(r in proptest::collection::vec(-10i32..10, 1..40),
                                          frac in 0.01f64..=1.0) {
            let returns: Vec<f64> = r.iter().map(|&x| f64::from(x)).collect();
            let b0 = ceil_count(frac, returns.len()).max(1);
            let picked = select_tail(&returns, b0).unwrap();
            prop_assert_eq!(picked.len(), b0);
            let max_in = picked.iter().map(|&i| returns[i]).fold(f64::NEG_INFINITY, f64::max);
            let min_out = (0..returns.len())
                .filter(|i| !picked.contains(i))
                .map(|i| returns[i])
                .fold(f64::INFINITY, f64::min);
            prop_assert!(max_in <= min_out);
        }
    }
}
