//! Soft-risk batch-quota schedule.
//!
//! For iteration `i` (1-based) out of `M`, the number `B0` of lowest-return
//! episodes kept for the update is:
//!
//! * `B` while `i <= i0` (warm start on the full batch),
//! * `ceil(alpha * B)` once `i >= ceil(rho * M)`,
//! * `ceil(B * max(alpha, 1 - K (i - i0)))` in between, with
//!   `K = (1 - alpha) / (ceil(rho * M) - i0)`.
//!
//! `alpha = 1` yields the constant full-batch schedule of risk-neutral
//! training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative slack when rounding a fraction of a count up, so that products
/// such as `0.3 * 10` that should be integral do not round past the integer.
const CEIL_SLACK: f64 = 1e-12;

/// Smallest `k` with `k / n >= fraction`, i.e. `ceil(fraction * n)`.
pub fn ceil_count(fraction: f64, n: usize) -> usize {
    let raw = fraction * n as f64;
    let mut k = raw.ceil().max(0.0) as usize;
    while k > 0 && (k - 1) as f64 >= raw - CEIL_SLACK * n.max(1) as f64 {
        k -= 1;
    }
    k
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RiskSchedule {
    pub batch_size: usize,
    pub alpha: f64,
    /// Warm-start iterations on the full batch.
    pub warm_start: usize,
    pub rho: f64,
    pub total_iterations: usize,
}

impl RiskSchedule {
    pub fn new(
        batch_size: usize,
        alpha: f64,
        warm_start: usize,
        rho: f64,
        total_iterations: usize,
    ) -> Result<Self> {
        let s = Self {
            batch_size,
            alpha,
            warm_start,
            rho,
            total_iterations,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            return bad(format!("rho must lie in (0, 1], got {}", self.rho));
        }
        let end = self.ramp_end();
        if !(1 <= self.warm_start && self.warm_start < end && end <= self.total_iterations) {
            return bad(format!(
                "need 1 <= warm_start ({}) < ceil(rho * M) ({end}) <= M ({})",
                self.warm_start, self.total_iterations
            ));
        }
        if self.tail_quota() < 1 {
            return bad("ceil(alpha * B) must be at least 1".into());
        }
        Ok(())
    }

    /// First iteration of the final constant phase, `ceil(rho * M)`.
    pub fn ramp_end(&self) -> usize {
        ceil_count(self.rho, self.total_iterations)
    }

    /// Drop rate `K`; zero when `alpha = 1`.
    pub fn drop_rate(&self) -> f64 {
        (1.0 - self.alpha) / (self.ramp_end() - self.warm_start) as f64
    }

    /// `ceil(alpha * B)`.
    pub fn tail_quota(&self) -> usize {
        ceil_count(self.alpha, self.batch_size)
    }

    pub fn batch_quota(&self, iteration: usize) -> Result<usize> {
        if iteration == 0 || iteration > self.total_iterations {
            return Err(Error::InvalidArgument(format!(
                "iteration {iteration} outside 1..={}",
                self.total_iterations
            )));
        }
        let quota = if iteration <= self.warm_start {
            self.batch_size
        } else if iteration >= self.ramp_end() {
            self.tail_quota()
        } else {
            let fraction = 1.0 - self.drop_rate() * (iteration - self.warm_start) as f64;
            ceil_count(self.alpha.max(fraction), self.batch_size)
        };
        Ok(quota)
    }

    /// `(i, B0)` for every iteration `1..=M`.
    pub fn table(&self) -> Vec<(usize, usize)> {
        (1..=self.total_iterations)
            .map(|i| (i, self.batch_quota(i).expect("iteration in range")))
            .collect()
    }
}
