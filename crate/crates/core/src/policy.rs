//! Featurized softmax actor with a linear value head.
//!
//! The state feature vector is the concatenated one-hot encoding of the last
//! `window` tokens (most recent first) plus a constant bias feature. With
//! vocabulary size `V` this gives `d = window * V + 1` features, and the
//! parameters are a `d x V` logit matrix (row-major) followed by a `d`-vector
//! of value weights, stored flat so optimizers and gradient checks can walk
//! them uniformly.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{PaddedBatch, TokenId, TokenPolicy};
use crate::optim::Adam;

const CHECKPOINT_MAGIC: &[u8; 4] = b"RAPL";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    vocab_size: usize,
    window: usize,
    weights: Vec<f64>,
}

impl PolicyParams {
    /// All-zero parameters: uniform policy, zero values.
    pub fn zeros(vocab_size: usize, window: usize) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidArgument(
                "vocabulary size must be at least 2".into(),
            ));
        }
        if window == 0 {
            return Err(Error::InvalidArgument("feature window must be at least 1".into()));
        }
        let d = window * vocab_size + 1;
        Ok(Self {
            vocab_size,
            window,
            weights: vec![0.0; d * vocab_size + d],
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn feature_dim(&self) -> usize {
        self.window * self.vocab_size + 1
    }

    fn actor_len(&self) -> usize {
        self.feature_dim() * self.vocab_size
    }

    pub fn bias_feature(&self) -> usize {
        self.window * self.vocab_size
    }

    pub fn num_params(&self) -> usize {
        self.weights.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Flat index of the logit weight from `feature` to `token`.
    pub fn actor_index(&self, feature: usize, token: usize) -> usize {
        feature * self.vocab_size + token
    }

    /// Flat index of the value weight of `feature`.
    pub fn value_index(&self, feature: usize) -> usize {
        self.actor_len() + feature
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.is_finite())
    }

    /// Active feature indices for `context`, bias last.
    pub fn features(&self, context: &[TokenId]) -> Vec<usize> {
        let mut feats = Vec::with_capacity(self.window + 1);
        for (k, &tok) in context.iter().rev().take(self.window).enumerate() {
            feats.push(k * self.vocab_size + tok as usize);
        }
        feats.push(self.bias_feature());
        feats
    }

    pub fn logits(&self, feats: &[usize]) -> Vec<f64> {
        let v = self.vocab_size;
        let mut logits = vec![0.0; v];
        for &f in feats {
            let row = &self.weights[f * v..(f + 1) * v];
            for (l, w) in logits.iter_mut().zip(row) {
                *l += w;
            }
        }
        logits
    }

    pub fn log_probs_from_features(&self, feats: &[usize]) -> Vec<f64> {
        log_softmax(&self.logits(feats))
    }

    pub fn value_from_features(&self, feats: &[usize]) -> f64 {
        let base = self.actor_len();
        feats.iter().map(|&f| self.weights[base + f]).sum()
    }

    pub fn value(&self, context: &[TokenId]) -> f64 {
        self.value_from_features(&self.features(context))
    }

    /// Adds `coef * d log pi(action | s) / d theta` into `grad`.
    pub fn accumulate_logprob_grad(
        &self,
        feats: &[usize],
        log_probs: &[f64],
        action: TokenId,
        coef: f64,
        grad: &mut [f64],
    ) {
        if coef == 0.0 {
            return;
        }
        let v = self.vocab_size;
        for &f in feats {
            let row = &mut grad[f * v..(f + 1) * v];
            for (j, (g, lp)) in row.iter_mut().zip(log_probs).enumerate() {
                let indicator = if j == action as usize { 1.0 } else { 0.0 };
                *g += coef * (indicator - lp.exp());
            }
        }
    }

    /// Adds `coef * d V(s) / d psi` into `grad`.
    pub fn accumulate_value_grad(&self, feats: &[usize], coef: f64, grad: &mut [f64]) {
        let base = self.actor_len();
        for &f in feats {
            grad[base + f] += coef;
        }
    }

    pub fn save<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        for field in [
            CHECKPOINT_VERSION,
            self.vocab_size as u32,
            self.window as u32,
            self.feature_dim() as u32,
        ] {
            w.write_all(&field.to_le_bytes())?;
        }
        for x in &self.weights {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad policy magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported policy format version {version}"
            )));
        }
        let vocab_size = read_u32(&mut r)? as usize;
        let window = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let mut params = Self::zeros(vocab_size, window).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if d != params.feature_dim() {
            return Err(Error::Checkpoint(format!(
                "feature dimension {d} does not match vocab {vocab_size} and window {window}"
            )));
        }
        for x in params.weights.iter_mut() {
            *x = read_f64(&mut r)?;
        }
        Ok(params)
    }
}

impl TokenPolicy for PolicyParams {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn log_probs(&self, context: &[TokenId]) -> Vec<f64> {
        self.log_probs_from_features(&self.features(context))
    }
}

/// Frozen copy of the supervised policy that anchors the KL penalty.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy(PolicyParams);

impl ReferencePolicy {
    pub fn new(params: PolicyParams) -> Self {
        Self(params)
    }

    pub fn params(&self) -> &PolicyParams {
        &self.0
    }
}

impl TokenPolicy for ReferencePolicy {
    fn vocab_size(&self) -> usize {
        self.0.vocab_size
    }

    fn log_probs(&self, context: &[TokenId]) -> Vec<f64> {
        self.0.log_probs(context)
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Per-position outputs of a forward pass over a padded batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardPass {
    /// `log pi(x_{t+1} | s_t)`; zero where the target is padding.
    pub logprobs: Vec<Vec<f64>>,
    /// `V(s_t)`; zero inside the left padding.
    pub values: Vec<Vec<f64>>,
    pub masks: Vec<Vec<bool>>,
}

pub fn batched_forward_pass(params: &PolicyParams, batch: &PaddedBatch) -> Result<ForwardPass> {
    let positions = batch.positions();
    let mut logprobs = Vec::with_capacity(batch.rows());
    let mut values = Vec::with_capacity(batch.rows());
    for row in 0..batch.rows() {
        if batch.tokens[row].len() != positions + 1 || batch.masks[row].len() != positions {
            return Err(Error::Contract(format!("row {row} has inconsistent width")));
        }
        let mut lp_row = vec![0.0; positions];
        let mut v_row = vec![0.0; positions];
        for t in 0..positions {
            let Some(context) = batch.context(row, t) else {
                continue;
            };
            if let Some(&bad) = context.iter().find(|&&tok| tok as usize >= params.vocab_size) {
                return Err(Error::Contract(format!(
                    "token {bad} in row {row} exceeds policy vocabulary {}",
                    params.vocab_size
                )));
            }
            let feats = params.features(context);
            v_row[t] = params.value_from_features(&feats);
            if let Some(target) = batch.target(row, t) {
                if target as usize >= params.vocab_size {
                    return Err(Error::Contract(format!("target token {target} out of range")));
                }
                lp_row[t] = params.log_probs_from_features(&feats)[target as usize];
            }
        }
        logprobs.push(lp_row);
        values.push(v_row);
    }
    Ok(ForwardPass {
        logprobs,
        values,
        masks: batch.masks.clone(),
    })
}

/// Mean next-token cross-entropy over every position of every sequence,
/// with its gradient.
pub fn cross_entropy(params: &PolicyParams, sequences: &[Vec<TokenId>]) -> (f64, Vec<f64>) {
    let count: usize = sequences.iter().map(|s| s.len().saturating_sub(1)).sum();
    let mut grad = vec![0.0; params.num_params()];
    if count == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    for seq in sequences {
        for t in 0..seq.len().saturating_sub(1) {
            let feats = params.features(&seq[..=t]);
            let lp = params.log_probs_from_features(&feats);
            let target = seq[t + 1];
            loss -= lp[target as usize] * scale;
            params.accumulate_logprob_grad(&feats, &lp, target, -scale, &mut grad);
        }
    }
    (loss, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Largest per-epoch loss increase accepted before the step is halved.
    #[serde(default = "default_sft_tolerance")]
    pub tolerance: f64,
}

fn default_sft_tolerance() -> f64 {
    1e-6
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.05,
            tolerance: default_sft_tolerance(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub params: PolicyParams,
    /// Cross-entropy before training followed by one entry per epoch.
    pub history: Vec<f64>,
}

const MAX_HALVINGS: usize = 40;

/// Full-batch supervised next-token fitting. Each epoch takes one Adam step;
/// a step that raises the loss by more than the tolerance is retried at half
/// the step size, so the loss history never rises by more than the tolerance.
pub fn sft_fit(params: &PolicyParams, sequences: &[Vec<TokenId>], config: &SftConfig) -> Result<SftOutcome> {
    if sequences.iter().all(|s| s.len() < 2) {
        return Err(Error::InvalidArgument(
            "supervised fitting needs at least one sequence of two or more tokens".into(),
        ));
    }
    let mut current = params.clone();
    let mut optimizer = Adam::new(current.num_params(), config.learning_rate);
    let (mut loss, mut grad) = cross_entropy(&current, sequences);
    let mut history = vec![loss];

    for _ in 0..config.epochs {
        let mut lr = optimizer.learning_rate;
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let mut trial_opt = optimizer.clone();
            trial_opt.learning_rate = lr;
            let mut trial = current.clone();
            trial_opt.update(trial.as_mut_slice(), &grad);
            let (trial_loss, trial_grad) = cross_entropy(&trial, sequences);
            if trial_loss <= loss + config.tolerance {
                optimizer = trial_opt;
                current = trial;
                loss = trial_loss;
                grad = trial_grad;
                accepted = true;
                break;
            }
            lr *= 0.5;
        }
        if !accepted {
            log::debug!("sft step rejected at every step size; keeping parameters");
        }
        history.push(loss);
    }
    Ok(SftOutcome {
        params: current,
        history,
    })
}

/// Largest relative disagreement between the analytic gradient returned by
/// `loss` and central finite differences, over every parameter.
pub fn grad_check<F>(params: &PolicyParams, loss: F, epsilon: f64) -> Result<f64>
where
    F: Fn(&PolicyParams) -> (f64, Vec<f64>),
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside (0, 1e-2]"
        )));
    }
    let (_, analytic) = loss(params);
    if analytic.len() != params.num_params() {
        return Err(Error::Contract("analytic gradient has the wrong length".into()));
    }
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (i, &a) in analytic.iter().enumerate() {
        let original = probe.weights[i];
        probe.weights[i] = original + epsilon;
        let (up, _) = loss(&probe);
        probe.weights[i] = original - epsilon;
        let (down, _) = loss(&probe);
        probe.weights[i] = original;
        let numeric = (up - down) / (2.0 * epsilon);
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|e| Error::Checkpoint(format!("truncated payload: {e}")))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::{pad_batch, Trajectory};
    use proptest::prelude::*;

    fn random_params(vocab: usize, window: usize, seed: u64) -> PolicyParams {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, &[]);
        let mut p = PolicyParams::zeros(vocab, window).unwrap();
        for w in p.as_mut_slice() {
            *w = rng.random_range(-1.0..1.0);
        }
        p
    }

    #[test]
    fn uniform_logprobs() {
        let p = PolicyParams::zeros(4, 2).unwrap();
        let batch = pad_batch(&[Trajectory::from_parts(&[0, 1], &[2, 3, 1])]).unwrap();
        let fwd = batched_forward_pass(&p, &batch).unwrap();
        for lp in &fwd.logprobs[0] {
            assert!((lp - 0.25f64.ln()).abs() < 1e-15);
        }
        assert!(fwd.values[0].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_softmax_on_two_tokens() {
        // window 1, vocab 2: features are [tok0, tok1, bias]
        let mut p = PolicyParams::zeros(2, 1).unwrap();
        let set = |p: &mut PolicyParams, f: usize, j: usize, x: f64| {
            let i = p.actor_index(f, j);
            p.as_mut_slice()[i] = x;
        };
        set(&mut p, 0, 0, 0.3);
        set(&mut p, 0, 1, -0.2);
        set(&mut p, 1, 0, 1.1);
        set(&mut p, 1, 1, 0.4);
        set(&mut p, 2, 0, 0.05);
        set(&mut p, 2, 1, -0.5);
        let vi = p.value_index(2);
        p.as_mut_slice()[vi] = 0.7;

        let batch = pad_batch(&[Trajectory::from_parts(&[0], &[1, 0])]).unwrap();
        let fwd = batched_forward_pass(&p, &batch).unwrap();

        // after token 0: logits (0.35, -0.7); target 1
        let l0: [f64; 2] = [0.3 + 0.05, -0.2 - 0.5];
        let lse0 = (l0[0].exp() + l0[1].exp()).ln();
        // after token 1: logits (1.15, -0.1); target 0
        let l1: [f64; 2] = [1.1 + 0.05, 0.4 - 0.5];
        let lse1 = (l1[0].exp() + l1[1].exp()).ln();
        assert!((fwd.logprobs[0][0] - (l0[1] - lse0)).abs() < 1e-12);
        assert!((fwd.logprobs[0][1] - (l1[0] - lse1)).abs() < 1e-12);
        assert!((fwd.values[0][0] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn forward_rejects_foreign_tokens() {
        let p = PolicyParams::zeros(4, 2).unwrap();
        let batch = pad_batch(&[Trajectory::from_parts(&[0, 9], &[2])]).unwrap();
        assert!(matches!(
            batched_forward_pass(&p, &batch),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = random_params(5, 3, 11);
        let mut buf = Vec::new();
        p.save(&mut buf).unwrap();
        assert_eq!(buf.len(), 4 + 16 + 8 * p.num_params());
        let back = PolicyParams::load(buf.as_slice()).unwrap();
        assert_eq!(
            back.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            p.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert!(PolicyParams::load(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn sft_memorizes_a_repeated_sequence() {
        let seq: Vec<TokenId> = vec![0, 3, 1, 4, 2, 5, 0, 3];
        let data = vec![seq; 4];
        let p = PolicyParams::zeros(6, 2).unwrap();
        let cfg = SftConfig {
            epochs: 300,
            learning_rate: 0.1,
            tolerance: 1e-6,
        };
        let out = sft_fit(&p, &data, &cfg).unwrap();
        let last = *out.history.last().unwrap();
        assert!(last < 0.1, "final cross-entropy {last}");
        for w in out.history.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
    }

    #[test]
    fn sft_zero_epochs_and_empty_data() {
        let p = random_params(4, 2, 3);
        let cfg = SftConfig {
            epochs: 0,
            ..SftConfig::default()
        };
        let out = sft_fit(&p, &[vec![0, 1, 2]], &cfg).unwrap();
        assert_eq!(out.params, p);
        assert!(sft_fit(&p, &[], &cfg).is_err());
    }

    #[test]
    fn grad_check_linear_loss() {
        let p = random_params(3, 1, 5);
        let k = p.actor_index(1, 2);
        let err = grad_check(
            &p,
            |q| {
                let mut g = vec![0.0; q.num_params()];
                g[k] = 2.5;
                (2.5 * q.as_slice()[k], g)
            },
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn grad_check_cross_entropy() {
        let p = random_params(4, 2, 7);
        let data = vec![vec![0, 2, 3]];
        let err = grad_check(&p, |q| cross_entropy(q, &data), 1e-5).unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn grad_check_constant_loss() {
        let p = random_params(3, 1, 9);
        let err = grad_check(&p, |q| (4.0, vec![0.0; q.num_params()]), 1e-5).unwrap();
        assert_eq!(err, 0.0);
        assert!(grad_check(&p, |q| (4.0, vec![0.0; q.num_params()]), 0.5).is_err());
    }

    #[test]
    fn reference_policy_is_a_snapshot() {
        let mut p = random_params(4, 2, 1);
        let reference = ReferencePolicy::new(p.clone());
        let before = reference.log_probs(&[1, 2]);
        p.as_mut_slice()[0] += 5.0;
        assert_eq!(reference.log_probs(&[1, 2]), before);
    }

    proptest! {
        #[test]
        fn distributions_normalize(seed in 0u64..1000, ctx in proptest::collection::vec(0u32..5, 0..6)) {
            let p = random_params(5, 3, seed);
            let total: f64 = p.log_probs(&ctx).iter().map(|l| l.exp()).sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
