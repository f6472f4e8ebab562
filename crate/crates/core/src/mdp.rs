//! Token-level episodic MDP.
//!
//! A state is the token sequence produced so far (prompt followed by the
//! generated tokens), an action is the next token, and the transition appends
//! it deterministically. Reward is sparse: a single environment score arrives
//! at the end of the episode.
//!
//! Per-position arrays in [`Trajectory`] and [`PaddedBatch`] follow the
//! next-token alignment used by causal language models: position `t` holds
//! quantities for predicting token `t + 1` from the state `tokens[..=t]`, so a
//! row of `L` tokens carries `L - 1` positions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Placeholder id written into padded rows. Never fed to a policy.
pub const PAD_TOKEN: TokenId = TokenId::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
    labels: Option<Vec<String>>,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary size must be at least 2, got {size}"
            )));
        }
        Ok(Self { size, labels: None })
    }

    pub fn with_labels(labels: Vec<String>) -> Result<Self> {
        let mut vocab = Self::new(labels.len())?;
        vocab.labels = Some(labels);
        Ok(vocab)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }

    pub fn check(&self, token: TokenId) -> Result<()> {
        if self.contains(token) {
            Ok(())
        } else {
            Err(Error::InvalidAction {
                token,
                vocab: self.size,
            })
        }
    }

    /// Display string for a token; falls back to the numeric id.
    pub fn label(&self, token: TokenId) -> String {
        self.labels
            .as_ref()
            .and_then(|l| l.get(token as usize).cloned())
            .unwrap_or_else(|| token.to_string())
    }
}

/// A prompt drawn from the input dataset, with its own environment score
/// when known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub tokens: Vec<TokenId>,
    pub score: Option<f64>,
}

impl Prompt {
    pub fn new(tokens: Vec<TokenId>) -> Self {
        Self { tokens, score: None }
    }

    pub fn validate(&self, vocab: &Vocab) -> Result<()> {
        if self.tokens.is_empty() {
            return Err(Error::InvalidArgument(
                "prompt must hold at least one token".into(),
            ));
        }
        self.tokens.iter().try_for_each(|&t| vocab.check(t))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct EpisodeState {
    tokens: Vec<TokenId>,
}

impl EpisodeState {
    pub fn from_prompt(prompt: &Prompt) -> Self {
        Self {
            tokens: prompt.tokens.clone(),
        }
    }

    pub fn from_tokens(tokens: Vec<TokenId>) -> Self {
        Self { tokens }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Deterministic append of `action` to `state`.
pub fn transition(vocab: &Vocab, state: &EpisodeState, action: TokenId) -> Result<EpisodeState> {
    vocab.check(action)?;
    let mut tokens = Vec::with_capacity(state.tokens.len() + 1);
    tokens.extend_from_slice(&state.tokens);
    tokens.push(action);
    Ok(EpisodeState { tokens })
}

/// Anything that yields a next-token distribution from a context.
pub trait TokenPolicy {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities over the whole vocabulary given `context`.
    fn log_probs(&self, context: &[TokenId]) -> Vec<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub max_new_tokens: usize,
    /// Generation stops right after this token is emitted.
    pub eos: Option<TokenId>,
}

/// One episode. Per-position vectors have length `tokens.len() - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt_len: usize,
    pub tokens: Vec<TokenId>,
    /// True exactly on positions whose target token was generated.
    pub masks: Vec<bool>,
    pub logprobs_actor: Vec<f64>,
    pub logprobs_ref: Vec<f64>,
    pub values: Vec<f64>,
    pub env_score: f64,
    pub per_token_rewards: Vec<f64>,
}

impl Trajectory {
    /// Builds an episode from a prompt and its generated continuation. Only
    /// the masks are populated; numeric rows start at zero.
    pub fn from_parts(prompt: &[TokenId], generated: &[TokenId]) -> Self {
        let prompt_len = prompt.len();
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(generated);
        let positions = tokens.len().saturating_sub(1);
        let masks = (0..positions).map(|t| t + 1 >= prompt_len).collect();
        Self {
            prompt_len,
            tokens,
            masks,
            logprobs_actor: vec![0.0; positions],
            logprobs_ref: vec![0.0; positions],
            values: vec![0.0; positions],
            env_score: 0.0,
            per_token_rewards: vec![0.0; positions],
        }
    }

    pub fn positions(&self) -> usize {
        self.masks.len()
    }

    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    pub fn generated_len(&self) -> usize {
        self.tokens.len() - self.prompt_len
    }

    /// Sum of the shaped per-token rewards over the episode.
    pub fn shaped_return(&self) -> f64 {
        self.per_token_rewards.iter().sum()
    }
}

/// Samples a token from log-probabilities by inverse CDF.
pub fn sample_token<R: Rng + ?Sized>(log_probs: &[f64], rng: &mut R) -> TokenId {
    let u: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_positive = 0;
    for (token, &lp) in log_probs.iter().enumerate() {
        let p = lp.exp();
        if p > 0.0 {
            last_positive = token;
        }
        cumulative += p;
        if u < cumulative {
            return token as TokenId;
        }
    }
    // u landed in the rounding gap above the final cumulative sum
    last_positive as TokenId
}

/// Generates a completion for `prompt` by sampling from `policy`.
pub fn rollout<P, R>(
    policy: &P,
    vocab: &Vocab,
    prompt: &Prompt,
    config: &RolloutConfig,
    rng: &mut R,
) -> Result<Trajectory>
where
    P: TokenPolicy + ?Sized,
    R: Rng + ?Sized,
{
    if config.max_new_tokens == 0 {
        return Err(Error::InvalidArgument("max_new_tokens must be at least 1".into()));
    }
    prompt.validate(vocab)?;
    if policy.vocab_size() != vocab.size() {
        return Err(Error::Contract(format!(
            "policy covers {} tokens but the vocabulary has {}",
            policy.vocab_size(),
            vocab.size()
        )));
    }

    let mut tokens = prompt.tokens.clone();
    let mut sampled_logprobs = Vec::with_capacity(config.max_new_tokens);
    for _ in 0..config.max_new_tokens {
        let log_probs = policy.log_probs(&tokens);
        let action = sample_token(&log_probs, rng);
        sampled_logprobs.push(log_probs[action as usize]);
        tokens.push(action);
        if config.eos == Some(action) {
            break;
        }
    }

    let mut traj = Trajectory::from_parts(&prompt.tokens, &tokens[prompt.tokens.len()..]);
    let first = traj.prompt_len - 1;
    traj.logprobs_actor[first..].copy_from_slice(&sampled_logprobs);
    Ok(traj)
}

/// Aligned rows for a batch of episodes: prompts are left-padded and
/// generations right-padded to common widths.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedBatch {
    pub prompt_width: usize,
    pub gen_width: usize,
    pub tokens: Vec<Vec<TokenId>>,
    /// Left padding in front of each row's prompt.
    pub offsets: Vec<usize>,
    pub prompt_lens: Vec<usize>,
    pub gen_lens: Vec<usize>,
    pub masks: Vec<Vec<bool>>,
    pub logprobs_actor: Vec<Vec<f64>>,
    pub logprobs_ref: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub rewards: Vec<Vec<f64>>,
    pub env_scores: Vec<f64>,
}

impl PaddedBatch {
    pub fn rows(&self) -> usize {
        self.tokens.len()
    }

    pub fn width(&self) -> usize {
        self.prompt_width + self.gen_width
    }

    pub fn positions(&self) -> usize {
        self.width() - 1
    }

    /// Real (non-padding) context at position `t` of `row`, or `None` when
    /// the position lies in the left padding.
    pub fn context(&self, row: usize, t: usize) -> Option<&[TokenId]> {
        let offset = self.offsets[row];
        let end = offset + self.prompt_lens[row] + self.gen_lens[row];
        if t < offset || t >= end {
            None
        } else {
            Some(&self.tokens[row][offset..=t])
        }
    }

    /// Token predicted at position `t`, if it is real.
    pub fn target(&self, row: usize, t: usize) -> Option<TokenId> {
        let tok = self.tokens[row][t + 1];
        (tok != PAD_TOKEN).then_some(tok)
    }

    /// Keeps only the listed rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> PaddedBatch {
        fn pick<T: Clone>(v: &[T], rows: &[usize]) -> Vec<T> {
            rows.iter().map(|&r| v[r].clone()).collect()
        }
        PaddedBatch {
            prompt_width: self.prompt_width,
            gen_width: self.gen_width,
            tokens: pick(&self.tokens, rows),
            offsets: pick(&self.offsets, rows),
            prompt_lens: pick(&self.prompt_lens, rows),
            gen_lens: pick(&self.gen_lens, rows),
            masks: pick(&self.masks, rows),
            logprobs_actor: pick(&self.logprobs_actor, rows),
            logprobs_ref: pick(&self.logprobs_ref, rows),
            values: pick(&self.values, rows),
            rewards: pick(&self.rewards, rows),
            env_scores: pick(&self.env_scores, rows),
        }
    }

    pub fn masked_count(&self) -> usize {
        self.masks.iter().flatten().filter(|&&m| m).count()
    }
}

/// Pads a batch of trajectories to common prompt and generation widths.
pub fn pad_batch(trajectories: &[Trajectory]) -> Result<PaddedBatch> {
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument("cannot pad an empty batch".into()));
    }
    let prompt_width = trajectories.iter().map(|t| t.prompt_len).max().unwrap_or(0);
    let gen_width = trajectories.iter().map(|t| t.generated_len()).max().unwrap_or(0);
    let width = prompt_width + gen_width;
    let positions = width - 1;

    let n = trajectories.len();
    let mut batch = PaddedBatch {
        prompt_width,
        gen_width,
        tokens: Vec::with_capacity(n),
        offsets: Vec::with_capacity(n),
        prompt_lens: Vec::with_capacity(n),
        gen_lens: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        logprobs_actor: Vec::with_capacity(n),
        logprobs_ref: Vec::with_capacity(n),
        values: Vec::with_capacity(n),
        rewards: Vec::with_capacity(n),
        env_scores: Vec::with_capacity(n),
    };

    for traj in trajectories {
        let offset = prompt_width - traj.prompt_len;
        let gen_len = traj.generated_len();

        let mut row = vec![PAD_TOKEN; offset];
        row.extend_from_slice(&traj.tokens);
        row.resize(width, PAD_TOKEN);

        let place = |src: &[f64]| {
            let mut out = vec![0.0; positions];
            out[offset..offset + src.len()].copy_from_slice(src);
            out
        };
        let masks = (0..positions)
            .map(|t| t + 1 >= prompt_width && t + 1 < prompt_width + gen_len)
            .collect();

        batch.tokens.push(row);
        batch.offsets.push(offset);
        batch.prompt_lens.push(traj.prompt_len);
        batch.gen_lens.push(gen_len);
        batch.masks.push(masks);
        batch.logprobs_actor.push(place(&traj.logprobs_actor));
        batch.logprobs_ref.push(place(&traj.logprobs_ref));
        batch.values.push(place(&traj.values));
        batch.rewards.push(place(&traj.per_token_rewards));
        batch.env_scores.push(traj.env_score);
    }
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Puts all mass on one token.
    struct OneHot {
        vocab: usize,
        token: TokenId,
    }

    impl TokenPolicy for OneHot {
        fn vocab_size(&self) -> usize {
            self.vocab
        }
        fn log_probs(&self, _context: &[TokenId]) -> Vec<f64> {
            (0..self.vocab)
                .map(|a| {
                    if a as TokenId == self.token {
                        0.0
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect()
        }
    }

    struct Uniform(usize);

    impl TokenPolicy for Uniform {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn log_probs(&self, _context: &[TokenId]) -> Vec<f64> {
            vec![-(self.0 as f64).ln(); self.0]
        }
    }

    #[test]
    fn transition_appends() {
        let vocab = Vocab::new(8).unwrap();
        let s = EpisodeState::from_tokens(vec![3, 7]);
        let next = transition(&vocab, &s, 1).unwrap();
        assert_eq!(next.tokens(), &[3, 7, 1]);
        assert_eq!(s.tokens(), &[3, 7]);

        let s = EpisodeState::from_tokens(vec![0]);
        assert_eq!(transition(&vocab, &s, 0).unwrap().tokens(), &[0, 0]);
    }

    #[test]
    fn transition_rejects_out_of_range() {
        let vocab = Vocab::new(8).unwrap();
        let s = EpisodeState::from_tokens(vec![5]);
        assert!(matches!(
            transition(&vocab, &s, 99),
            Err(Error::InvalidAction { token: 99, vocab: 8 })
        ));
    }

    #[test]
    fn vocab_needs_two_tokens() {
        assert!(Vocab::new(1).is_err());
        assert_eq!(Vocab::new(2).unwrap().label(1), "1");
    }

    #[test]
    fn deterministic_rollout() {
        let vocab = Vocab::new(4).unwrap();
        let policy = OneHot { vocab: 4, token: 2 };
        let cfg = RolloutConfig {
            max_new_tokens: 3,
            eos: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = rollout(&policy, &vocab, &Prompt::new(vec![0]), &cfg, &mut rng).unwrap();
        assert_eq!(traj.tokens, vec![0, 2, 2, 2]);
        assert_eq!(traj.logprobs_actor, vec![0.0, 0.0, 0.0]);
        assert_eq!(traj.masks, vec![true, true, true]);
    }

    #[test]
    fn eos_stops_generation() {
        let vocab = Vocab::new(4).unwrap();
        let policy = OneHot { vocab: 4, token: 2 };
        let cfg = RolloutConfig {
            max_new_tokens: 3,
            eos: Some(2),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let traj = rollout(&policy, &vocab, &Prompt::new(vec![0]), &cfg, &mut rng).unwrap();
        assert_eq!(traj.tokens, vec![0, 2]);
        assert_eq!(traj.masks.iter().filter(|&&m| m).count(), 1);
    }

    #[test]
    fn uniform_rollout_logprobs() {
        let vocab = Vocab::new(4).unwrap();
        let cfg = RolloutConfig {
            max_new_tokens: 5,
            eos: None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traj = rollout(&Uniform(4), &vocab, &Prompt::new(vec![1, 2]), &cfg, &mut rng).unwrap();
        for (lp, m) in traj.logprobs_actor.iter().zip(&traj.masks) {
            if *m {
                assert!((lp - (0.25f64).ln()).abs() < 1e-15);
                assert!((lp + 1.3863).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn rollout_rejects_bad_prompt_and_budget() {
        let vocab = Vocab::new(4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = RolloutConfig {
            max_new_tokens: 2,
            eos: None,
        };
        assert!(rollout(&Uniform(4), &vocab, &Prompt::new(vec![9]), &cfg, &mut rng).is_err());
        let zero = RolloutConfig {
            max_new_tokens: 0,
            eos: None,
        };
        assert!(rollout(&Uniform(4), &vocab, &Prompt::new(vec![1]), &zero, &mut rng).is_err());
    }

    #[test]
    fn pad_batch_matches_three_episode_layout() {
        // prompts of length 2, 3, 3; generations of length 3, 3, 2
        let trajs = vec![
            Trajectory::from_parts(&[1, 2], &[4, 5, 6]),
            Trajectory::from_parts(&[1, 2, 3], &[4, 5, 6]),
            Trajectory::from_parts(&[1, 2, 3], &[4, 5]),
        ];
        let batch = pad_batch(&trajs).unwrap();
        let as01 = |row: &Vec<bool>| row.iter().map(|&m| m as u8).collect::<Vec<_>>();
        assert_eq!(as01(&batch.masks[0]), vec![0, 0, 1, 1, 1]);
        assert_eq!(as01(&batch.masks[1]), vec![0, 0, 1, 1, 1]);
        assert_eq!(as01(&batch.masks[2]), vec![0, 0, 1, 1, 0]);
        assert_eq!(batch.tokens[0][0], PAD_TOKEN);
        assert_eq!(batch.tokens[2][5], PAD_TOKEN);
        assert_eq!(batch.context(0, 0), None);
        assert_eq!(batch.context(0, 2), Some(&[1, 2][..]));
        assert_eq!(batch.target(2, 4), None);
    }

    #[test]
    fn pad_single_is_identity() {
        let mut traj = Trajectory::from_parts(&[3, 1], &[2, 2, 0]);
        traj.values = vec![0.1, 0.2, 0.3, 0.4];
        let batch = pad_batch(std::slice::from_ref(&traj)).unwrap();
        assert_eq!(batch.tokens[0], traj.tokens);
        assert_eq!(batch.masks[0], traj.masks);
        assert_eq!(batch.values[0], traj.values);
        assert_eq!(batch.offsets[0], 0);
    }

    #[test]
    fn pad_two_by_hand() {
        let a = Trajectory::from_parts(&[1, 2], &[3, 4]);
        let b = Trajectory::from_parts(&[5, 6, 7], &[0]);
        let batch = pad_batch(&[a, b]).unwrap();
        let p = PAD_TOKEN;
        assert_eq!(batch.tokens[0], vec![p, 1, 2, 3, 4]);
        assert_eq!(batch.tokens[1], vec![5, 6, 7, 0, p]);
        assert_eq!(batch.masks[0], vec![false, false, true, true]);
        assert_eq!(batch.masks[1], vec![false, false, true, false]);
        assert!(pad_batch(&[]).is_err());
    }

    #[test]
    fn mask_sum_counts_generated_tokens() {
        let t = Trajectory::from_parts(&[1, 2, 3], &[4, 5, 6, 7]);
        assert_eq!(t.masks.iter().filter(|&&m| m).count(), t.generated_len());
    }
}
