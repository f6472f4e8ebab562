//! Synthetic scoring environment and prompt datasets.
//!
//! [`ValenceEnv`] assigns every token a valence in `[-1, 1]` and scores a
//! completion by its scaled mean valence minus a repetition penalty on
//! repeated bigrams. Prompt datasets are drawn from a two-class mixture whose
//! negative class carries a heavy tail near the minimum score, standing in for
//! hard prompts in sentiment and toxicity tasks.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::dist_n;
use crate::mdp::{Prompt, TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValenceEnv {
    valence: Vec<f64>,
    repetition_penalty_weight: f64,
    scale: f64,
}

impl ValenceEnv {
    pub fn new(valence: Vec<f64>, repetition_penalty_weight: f64, scale: f64) -> Result<Self> {
        if valence.len() < 2 {
            return Err(Error::InvalidArgument(
                "valence table needs at least two tokens".into(),
            ));
        }
        if let Some(v) = valence.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("valence {v} outside [-1, 1]")));
        }
        if !valence.iter().any(|&v| v > 0.0) || !valence.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "valence table needs both a positive and a negative token".into(),
            ));
        }
        if !(repetition_penalty_weight >= 0.0) || !repetition_penalty_weight.is_finite() {
            return Err(Error::InvalidArgument(
                "repetition penalty weight must be >= 0".into(),
            ));
        }
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::InvalidArgument("scale must be > 0".into()));
        }
        Ok(Self {
            valence,
            repetition_penalty_weight,
            scale,
        })
    }

    /// Valences evenly spaced from +1 (token 0) down to -1 (last token).
    pub fn linear(vocab_size: usize, repetition_penalty_weight: f64, scale: f64) -> Result<Self> {
        if vocab_size < 2 {
            return Err(Error::InvalidArgument(
                "vocabulary size must be at least 2".into(),
            ));
        }
        let step = 2.0 / (vocab_size - 1) as f64;
        let valence = (0..vocab_size).map(|i| 1.0 - step * i as f64).collect();
        Self::new(valence, repetition_penalty_weight, scale)
    }

    pub fn vocab_size(&self) -> usize {
        self.valence.len()
    }

    pub fn valence(&self, token: TokenId) -> f64 {
        self.valence[token as usize]
    }

    pub fn valences(&self) -> &[f64] {
        &self.valence
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn repetition_penalty_weight(&self) -> f64 {
        self.repetition_penalty_weight
    }

    /// `scale * mean valence`, the repetition-free part of the score.
    pub fn valence_score(&self, tokens: &[TokenId]) -> f64 {
        let sum: f64 = tokens.iter().map(|&t| self.valence(t)).sum();
        self.scale * sum / tokens.len() as f64
    }

    /// Score of the generated segment `tokens[prompt_len..]`.
    pub fn score(&self, tokens: &[TokenId], prompt_len: usize) -> Result<f64> {
        let generated = tokens.get(prompt_len..).unwrap_or(&[]);
        if generated.is_empty() {
            return Err(Error::EmptyGeneration);
        }
        if let Some(&t) = generated.iter().find(|&&t| t as usize >= self.valence.len()) {
            return Err(Error::InvalidAction {
                token: t,
                vocab: self.valence.len(),
            });
        }
        // a single token has no bigram to repeat
        let distinct = if generated.len() >= 2 {
            dist_n(generated, 2)?
        } else {
            1.0
        };
        Ok(self.valence_score(generated) - self.repetition_penalty_weight * (1.0 - distinct))
    }

    /// Prompt score used for quantile analysis: the valence term alone.
    pub fn prompt_score(&self, tokens: &[TokenId]) -> f64 {
        self.valence_score(tokens)
    }

    fn class_pool(&self, class: Class) -> Vec<TokenId> {
        (0..self.valence.len() as TokenId)
            .filter(|&t| match class {
                Class::Positive => self.valence(t) > 0.0,
                Class::Negative => self.valence(t) < 0.0,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Positive,
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Parameters of the two-class prompt-score mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub positive_fraction: f64,
    /// Share of negative prompts drawn from `tail_range` instead of `negative_range`.
    pub tail_mass: f64,
    pub positive_range: [f64; 2],
    pub negative_range: [f64; 2],
    pub tail_range: [f64; 2],
    pub prompt_len: usize,
}

impl Default for MixtureSpec {
    fn default() -> Self {
        Self {
            positive_fraction: 0.7,
            tail_mass: 0.4,
            positive_range: [0.3, 3.0],
            negative_range: [-2.5, -0.3],
            tail_range: [-3.0, -2.5],
            prompt_len: 4,
        }
    }
}

impl MixtureSpec {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1], got {v}"
                )))
            }
        };
        unit("positive_fraction", self.positive_fraction)?;
        unit("tail_mass", self.tail_mass)?;
        for (name, r) in [
            ("positive_range", self.positive_range),
            ("negative_range", self.negative_range),
            ("tail_range", self.tail_range),
        ] {
            if !(r[0] <= r[1]) {
                return Err(Error::InvalidArgument(format!("{name} must satisfy lo <= hi")));
            }
        }
        if self.prompt_len == 0 {
            return Err(Error::InvalidArgument("prompt_len must be at least 1".into()));
        }
        Ok(())
    }

    /// True when some class has a zero-width score range.
    pub fn is_degenerate(&self) -> bool {
        let flat = |r: [f64; 2]| r[0] == r[1];
        (self.positive_fraction > 0.0 && flat(self.positive_range))
            || (self.positive_fraction < 1.0
                && ((self.tail_mass < 1.0 && flat(self.negative_range))
                    || (self.tail_mass > 0.0 && flat(self.tail_range))))
    }

    fn sample_target<R: Rng + ?Sized>(&self, rng: &mut R) -> (Class, f64) {
        let uniform = |rng: &mut R, r: [f64; 2]| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..r[1])
            }
        };
        if rng.random::<f64>() < self.positive_fraction {
            (Class::Positive, uniform(rng, self.positive_range))
        } else if rng.random::<f64>() < self.tail_mass {
            (Class::Negative, uniform(rng, self.tail_range))
        } else {
            (Class::Negative, uniform(rng, self.negative_range))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptDataset {
    pub prompts: Vec<Prompt>,
    /// Mixture the prompts were drawn from; `None` for loaded files.
    pub mixture: Option<MixtureSpec>,
    pub split: Split,
    pub degenerate: bool,
}

impl PromptDataset {
    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// Prompt scores, with missing scores as NaN.
    pub fn scores(&self) -> Vec<f64> {
        self.prompts.iter().map(|p| p.score.unwrap_or(f64::NAN)).collect()
    }
}

/// Greedily picks tokens from `pool` so the running mean valence tracks
/// `target_mean`. Ties go to the first candidate in a shuffled pool order.
fn compose<R: Rng + ?Sized>(
    env: &ValenceEnv,
    pool: &[TokenId],
    target_mean: f64,
    len: usize,
    rng: &mut R,
) -> Vec<TokenId> {
    let mut order = pool.to_vec();
    let mut tokens = Vec::with_capacity(len);
    let mut sum = 0.0;
    for k in 0..len {
        order.shuffle(rng);
        let goal = target_mean * (k + 1) as f64;
        let best = order
            .iter()
            .copied()
            .min_by(|&a, &b| {
                let da = (sum + env.valence(a) - goal).abs();
                let db = (sum + env.valence(b) - goal).abs();
                da.total_cmp(&db)
            })
            .expect("class pool is never empty");
        sum += env.valence(best);
        tokens.push(best);
    }
    tokens
}

/// Draws `n` prompts from the mixture; each prompt's score is computed
/// exactly from its composed tokens.
pub fn generate_dataset<R: Rng + ?Sized>(
    env: &ValenceEnv,
    spec: &MixtureSpec,
    n: usize,
    split: Split,
    rng: &mut R,
) -> Result<PromptDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("dataset size must be at least 1".into()));
    }
    spec.validate()?;
    let pools = [env.class_pool(Class::Positive), env.class_pool(Class::Negative)];
    let prompts = (0..n)
        .map(|_| {
            let (class, target) = spec.sample_target(rng);
            let pool = &pools[(class == Class::Negative) as usize];
            let tokens = compose(env, pool, target / env.scale(), spec.prompt_len, rng);
            let score = env.prompt_score(&tokens);
            Prompt {
                tokens,
                score: Some(score),
            }
        })
        .collect();
    let degenerate = spec.is_degenerate();
    if degenerate {
        log::warn!("mixture spec has a zero-variance class");
    }
    Ok(PromptDataset {
        prompts,
        mixture: Some(spec.clone()),
        split,
        degenerate,
    })
}

/// A full text sample (prompt plus continuation) with its class label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub class: Class,
}

/// Text corpus whose continuations follow the valence class of their
/// prompt: each continuation token comes from the prompt's class pool with
/// probability `fidelity` and from the whole vocabulary otherwise.
pub fn generate_corpus<R: Rng + ?Sized>(
    env: &ValenceEnv,
    spec: &MixtureSpec,
    n: usize,
    continuation_len: usize,
    fidelity: f64,
    rng: &mut R,
) -> Result<Vec<LabeledSequence>> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be at least 1".into()));
    }
    spec.validate()?;
    let pools = [env.class_pool(Class::Positive), env.class_pool(Class::Negative)];
    let vocab = env.vocab_size() as TokenId;
    Ok((0..n)
        .map(|_| {
            let (class, target) = spec.sample_target(rng);
            let pool = &pools[(class == Class::Negative) as usize];
            let mut tokens = compose(env, pool, target / env.scale(), spec.prompt_len, rng);
            for _ in 0..continuation_len {
                let tok = if rng.random::<f64>() < fidelity {
                    pool[rng.random_range(0..pool.len())]
                } else {
                    rng.random_range(0..vocab)
                };
                tokens.push(tok);
            }
            LabeledSequence {
                tokens,
                prompt_len: spec.prompt_len,
                class,
            }
        })
        .collect())
}

/// Reads a `prompt_tokens,score` CSV. Empty score cells are filled from
/// `scorer` when one is supplied.
pub fn load_prompts_csv(
    path: &Path,
    vocab: &Vocab,
    scorer: Option<&ValenceEnv>,
    split: Split,
) -> Result<PromptDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;

    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.len() != 2 || &headers[0] != "prompt_tokens" || &headers[1] != "score" {
        return Err(Error::Parse {
            path: path.into(),
            line: 1,
            msg: format!(
                "expected header `prompt_tokens,score`, found `{}`",
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut prompts = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let fail = |msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };

        let tokens = record[0]
            .split_whitespace()
            .map(|s| {
                s.parse::<TokenId>()
                    .map_err(|_| fail(format!("token `{s}` is not an integer id")))
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.is_empty() {
            return Err(fail("empty prompt".into()));
        }
        if let Some(t) = tokens.iter().find(|&&t| !vocab.contains(t)) {
            return Err(fail(format!(
                "token {t} outside vocabulary of size {}",
                vocab.size()
            )));
        }

        let cell = record[1].trim();
        let score = if cell.is_empty() {
            match scorer {
                Some(env) => env.prompt_score(&tokens),
                None => return Err(fail("missing score and no scorer supplied".into())),
            }
        } else {
            cell.parse::<f64>()
                .map_err(|_| fail(format!("score `{cell}` is not a number")))?
        };
        prompts.push(Prompt {
            tokens,
            score: Some(score),
        });
    }
    if prompts.is_empty() {
        log::warn!("{}: no prompt rows", path.display());
    }
    Ok(PromptDataset {
        prompts,
        mixture: None,
        split,
        degenerate: false,
    })
}

pub fn write_prompts_csv(dataset: &PromptDataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(["prompt_tokens", "score"])
        .map_err(|e| csv_error(path, e))?;
    for prompt in &dataset.prompts {
        let tokens = prompt
            .tokens
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        let score = prompt.score.map(|s| s.to_string()).unwrap_or_default();
        writer
            .write_record([tokens, score])
            .map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = err.position().map_or(0, |p| p.line());
    match err.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.into(),
            line,
            msg: format!("{other:?}"),
        },
    }
}
