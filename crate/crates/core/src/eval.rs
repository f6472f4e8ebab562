//! Evaluation metrics: distribution-shift histograms, prompt-quantile curves,
//! tail averages, distinct-n and perplexity.
//!
//! Distinct-n divides by the number of n-grams (`L - n + 1`), not the token
//! count. Perplexity conditions each token on at most the policy's feature
//! window, which for these models is the whole effective context, so a
//! sliding-window pass reduces to one exact pass.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{csv_error, ValenceEnv};
use crate::error::{Error, Result};
use crate::mdp::{rollout, Prompt, RolloutConfig, TokenId, TokenPolicy, Vocab};
use crate::rng;

/// Distinct n-grams over total n-grams.
pub fn dist_n(tokens: &[TokenId], n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("n-gram order must be at least 1".into()));
    }
    if tokens.len() < n {
        return Err(Error::InvalidArgument(format!(
            "sequence of length {} is shorter than n = {n}",
            tokens.len()
        )));
    }
    let windows = tokens.windows(n);
    let total = windows.len();
    let distinct: HashSet<&[TokenId]> = windows.collect();
    Ok(distinct.len() as f64 / total as f64)
}

/// Mean distinct-n over sequences long enough to hold an n-gram.
pub fn mean_dist_n<S: AsRef<[TokenId]>>(sequences: &[S], n: usize) -> Option<f64> {
    let values: Vec<f64> = sequences
        .iter()
        .filter_map(|s| dist_n(s.as_ref(), n).ok())
        .collect();
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Sum of base-2 next-token log-probabilities for `tokens[1..]` and the count.
fn log2_likelihood<P: TokenPolicy + ?Sized>(policy: &P, tokens: &[TokenId]) -> (f64, usize) {
    let mut sum = 0.0;
    for t in 1..tokens.len() {
        let lp = policy.log_probs(&tokens[..t])[tokens[t] as usize];
        sum += lp / std::f64::consts::LN_2;
    }
    (sum, tokens.len().saturating_sub(1))
}

fn perplexity_from(log2_sum: f64, count: usize) -> f64 {
    if log2_sum == f64::NEG_INFINITY {
        return f64::INFINITY;
    }
    (-log2_sum / count as f64).exp2()
}

/// `2^(-(1/N) sum log2 P(w_i | w_<i))` over the `N = len - 1` predicted
/// tokens. A zero-probability token yields `f64::INFINITY`.
pub fn perplexity<P: TokenPolicy + ?Sized>(policy: &P, tokens: &[TokenId]) -> Result<f64> {
    if tokens.len() < 2 {
        return Err(Error::InvalidArgument(
            "perplexity needs at least two tokens".into(),
        ));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= policy.vocab_size()) {
        return Err(Error::InvalidAction {
            token: t,
            vocab: policy.vocab_size(),
        });
    }
    let (sum, count) = log2_likelihood(policy, tokens);
    Ok(perplexity_from(sum, count))
}

/// Perplexity pooled over every predicted token of every sequence.
pub fn corpus_perplexity<P, S>(policy: &P, sequences: &[S]) -> Result<f64>
where
    P: TokenPolicy + Sync + ?Sized,
    S: AsRef<[TokenId]> + Sync,
{
    if sequences.iter().all(|s| s.as_ref().len() < 2) {
        return Err(Error::InvalidArgument(
            "perplexity needs a sequence of two or more tokens".into(),
        ));
    }
    let (sum, count) = sequences
        .par_iter()
        .map(|s| log2_likelihood(policy, s.as_ref()))
        .reduce(|| (0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    Ok(perplexity_from(sum, count))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePoint {
    /// Midpoint of the bin's rank range, as a fraction of the prompt count.
    pub quantile: f64,
    pub mean_score: f64,
    pub count: usize,
}

/// Sorts prompts by their own score, splits them into `n_bins` equal-count
/// bins (remainder spread over the lowest bins) and averages the completion
/// scores per bin.
pub fn quantile_curve(
    prompt_scores: &[f64],
    completion_scores: &[f64],
    n_bins: usize,
) -> Result<Vec<QuantilePoint>> {
    if prompt_scores.is_empty() {
        return Err(Error::InvalidArgument(
            "quantile curve needs at least one prompt".into(),
        ));
    }
    if prompt_scores.len() != completion_scores.len() {
        return Err(Error::InvalidArgument(
            "prompt and completion scores differ in length".into(),
        ));
    }
    let n = prompt_scores.len();
    if n_bins == 0 || n_bins > n {
        return Err(Error::InvalidArgument(format!(
            "bin count {n_bins} outside 1..={n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| prompt_scores[a].total_cmp(&prompt_scores[b]));

    let base = n / n_bins;
    let extra = n % n_bins;
    let mut start = 0;
    let mut points = Vec::with_capacity(n_bins);
    for bin in 0..n_bins {
        let size = base + usize::from(bin < extra);
        let members = &order[start..start + size];
        let mean = members.iter().map(|&i| completion_scores[i]).sum::<f64>() / size as f64;
        points.push(QuantilePoint {
            quantile: (start as f64 + size as f64 / 2.0) / n as f64,
            mean_score: mean,
            count: size,
        });
        start += size;
    }
    Ok(points)
}

/// Mean completion score over prompts scoring at or below `threshold`.
pub fn tail_average(prompt_scores: &[f64], completion_scores: &[f64], threshold: f64) -> Result<f64> {
    if prompt_scores.is_empty() || prompt_scores.len() != completion_scores.len() {
        return Err(Error::InvalidArgument(
            "need equal-length, nonempty score lists".into(),
        ));
    }
    let (sum, count) = prompt_scores
        .iter()
        .zip(completion_scores)
        .filter(|(p, _)| **p <= threshold)
        .fold((0.0, 0usize), |(s, c), (_, &x)| (s + x, c + 1));
    if count == 0 {
        return Err(Error::EmptyTail(threshold));
    }
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// Counts per half-open bin `[edges[k], edges[k + 1])`.
    pub counts: Vec<usize>,
    /// Samples below the first edge.
    pub underflow: usize,
    /// Samples at or above the last edge, plus NaNs.
    pub overflow: usize,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum::<usize>() + self.underflow + self.overflow
    }
}

/// `bins + 1` evenly spaced edges over `[lo, hi]`.
pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Result<Vec<f64>> {
    if bins == 0 || !(lo < hi) {
        return Err(Error::InvalidArgument("need lo < hi and at least one bin".into()));
    }
    let width = (hi - lo) / bins as f64;
    let mut edges: Vec<f64> = (0..bins).map(|k| lo + width * k as f64).collect();
    edges.push(hi);
    Ok(edges)
}

pub fn histogram(scores: &[f64], edges: &[f64]) -> Result<Histogram> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(
            "histogram edges must be strictly increasing".into(),
        ));
    }
    let bins = edges.len() - 1;
    let mut hist = Histogram {
        edges: edges.to_vec(),
        counts: vec![0; bins],
        underflow: 0,
        overflow: 0,
    };
    for &s in scores {
        if s < edges[0] {
            hist.underflow += 1;
        } else if !(s < edges[bins]) {
            hist.overflow += 1;
        } else {
            // last edge <= s is the bin's left edge
            let k = edges.partition_point(|&e| e <= s) - 1;
            hist.counts[k] += 1;
        }
    }
    Ok(hist)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub quantile_bins: usize,
    pub histogram_bins: usize,
    /// Prompt-score thresholds for tail averages; the first is the headline.
    pub tail_thresholds: Vec<f64>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            quantile_bins: 10,
            histogram_bins: 24,
            tail_thresholds: vec![-2.5],
            seed: 20_240_101,
        }
    }
}

/// Completions sampled for a fixed prompt set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSamples {
    pub prompt_scores: Vec<f64>,
    pub completion_scores: Vec<f64>,
    pub generations: Vec<Vec<TokenId>>,
}

const EVAL_STREAM: u64 = 0xE7A1;

/// One sampled completion per prompt. Prompt `k` draws from the stream keyed
/// by `(seed, k)`, so models compared under the same seed share random
/// numbers.
pub fn sample_completions<P: TokenPolicy + Sync + ?Sized>(
    policy: &P,
    vocab: &Vocab,
    env: &ValenceEnv,
    prompts: &[Prompt],
    rollout_config: &RolloutConfig,
    seed: u64,
) -> Result<EvalSamples> {
    let results: Vec<Result<(f64, f64, Vec<TokenId>)>> = prompts
        .par_iter()
        .enumerate()
        .map(|(k, prompt)| {
            let mut stream = rng::stream(seed, &[EVAL_STREAM, k as u64]);
            let traj = rollout(policy, vocab, prompt, rollout_config, &mut stream)?;
            let score = env.score(&traj.tokens, traj.prompt_len)?;
            let prompt_score = prompt.score.unwrap_or_else(|| env.prompt_score(&prompt.tokens));
            Ok((prompt_score, score, traj.generated().to_vec()))
        })
        .collect();
    let mut samples = EvalSamples {
        prompt_scores: Vec::with_capacity(prompts.len()),
        completion_scores: Vec::with_capacity(prompts.len()),
        generations: Vec::with_capacity(prompts.len()),
    };
    for r in results {
        let (p, c, g) = r?;
        samples.prompt_scores.push(p);
        samples.completion_scores.push(c);
        samples.generations.push(g);
    }
    Ok(samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TailAverage {
    pub threshold: f64,
    /// `None` when no prompt falls at or below the threshold.
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub n_prompts: usize,
    pub mean_score: f64,
    pub prompt_histogram: Histogram,
    pub histogram: Histogram,
    pub quantile_curve: Vec<QuantilePoint>,
    pub tail_averages: Vec<TailAverage>,
    pub dist_1: f64,
    pub dist_2: f64,
    pub dist_3: f64,
    pub gen_len_mean: f64,
    /// `None` when a held-out token had zero probability.
    pub perplexity: Option<f64>,
}

impl EvalReport {
    pub fn build(
        label: &str,
        samples: &EvalSamples,
        edges: &[f64],
        config: &EvalConfig,
        perplexity: f64,
    ) -> Result<Self> {
        let n = samples.completion_scores.len();
        if n == 0 {
            return Err(Error::InvalidArgument("no samples to report".into()));
        }
        let tail_averages = config
            .tail_thresholds
            .iter()
            .map(|&threshold| {
                let value = match tail_average(&samples.prompt_scores, &samples.completion_scores, threshold)
                {
                    Ok(v) => Some(v),
                    Err(Error::EmptyTail(_)) => None,
                    Err(e) => return Err(e),
                };
                Ok(TailAverage { threshold, value })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            label: label.to_string(),
            n_prompts: n,
            mean_score: samples.completion_scores.iter().sum::<f64>() / n as f64,
            prompt_histogram: histogram(&samples.prompt_scores, edges)?,
            histogram: histogram(&samples.completion_scores, edges)?,
            quantile_curve: quantile_curve(
                &samples.prompt_scores,
                &samples.completion_scores,
                config.quantile_bins.min(n),
            )?,
            tail_averages,
            dist_1: mean_dist_n(&samples.generations, 1).unwrap_or(f64::NAN),
            dist_2: mean_dist_n(&samples.generations, 2).unwrap_or(f64::NAN),
            dist_3: mean_dist_n(&samples.generations, 3).unwrap_or(f64::NAN),
            gen_len_mean: samples.generations.iter().map(Vec::len).sum::<usize>() as f64 / n as f64,
            perplexity: perplexity.is_finite().then_some(perplexity),
        })
    }

    /// Mean completion score of the lowest prompt-quantile bin.
    pub fn bottom_quantile_mean(&self) -> f64 {
        self.quantile_curve[0].mean_score
    }

    pub fn headline_tail_average(&self) -> Option<f64> {
        self.tail_averages.first().and_then(|t| t.value)
    }
}

pub const METRICS_HEADER: [&str; 11] = [
    "model",
    "mean_score",
    "tail_average",
    "bottom_quantile_mean",
    "dist_1",
    "dist_2",
    "dist_3",
    "gen_len_mean",
    "perplexity",
    "histogram_underflow",
    "histogram_overflow",
];

pub fn metrics_row(report: &EvalReport) -> Vec<String> {
    let opt = |v: Option<f64>, none: &str| v.map_or_else(|| none.to_string(), |x| x.to_string());
    vec![
        report.label.clone(),
        report.mean_score.to_string(),
        opt(report.headline_tail_average(), ""),
        report.bottom_quantile_mean().to_string(),
        report.dist_1.to_string(),
        report.dist_2.to_string(),
        report.dist_3.to_string(),
        report.gen_len_mean.to_string(),
        opt(report.perplexity, "overflow"),
        report.histogram.underflow.to_string(),
        report.histogram.overflow.to_string(),
    ]
}

/// Writes `histogram.csv`, `quantile.csv`, `metrics.csv`, `scores.csv` and
/// `summary.json` into `dir`.
pub fn write_report(report: &EvalReport, samples: &EvalSamples, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let writer = |name: &str| {
        let path = dir.join(name);
        csv::Writer::from_path(&path)
            .map(|w| (w, path.clone()))
            .map_err(|e| csv_error(&path, e))
    };

    let (mut w, path) = writer("histogram.csv")?;
    w.write_record(["bin_lo", "bin_hi", "prompt", report.label.as_str()])
        .map_err(|e| csv_error(&path, e))?;
    for k in 0..report.histogram.counts.len() {
        w.write_record([
            report.histogram.edges[k].to_string(),
            report.histogram.edges[k + 1].to_string(),
            report.prompt_histogram.counts[k].to_string(),
            report.histogram.counts[k].to_string(),
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let (mut w, path) = writer("quantile.csv")?;
    w.write_record(["quantile", report.label.as_str()])
        .map_err(|e| csv_error(&path, e))?;
    for p in &report.quantile_curve {
        w.write_record([p.quantile.to_string(), p.mean_score.to_string()])
            .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let (mut w, path) = writer("metrics.csv")?;
    w.write_record(METRICS_HEADER).map_err(|e| csv_error(&path, e))?;
    w.write_record(metrics_row(report))
        .map_err(|e| csv_error(&path, e))?;
    w.flush().map_err(|e| Error::io(&path, e))?;

    let (mut w, path) = writer("scores.csv")?;
    w.write_record(["prompt_score", "completion_score", "generation"])
        .map_err(|e| csv_error(&path, e))?;
    for k in 0..samples.completion_scores.len() {
        let gen = samples.generations[k]
            .iter()
            .map(|t| t.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        w.write_record([
            samples.prompt_scores[k].to_string(),
            samples.completion_scores[k].to_string(),
            gen,
        ])
        .map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("summary.json");
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::InvalidArgument(format!("cannot serialize report: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

/// Reads back `scores.csv`.
pub fn read_scores(path: &Path) -> Result<EvalSamples> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut samples = EvalSamples {
        prompt_scores: Vec::new(),
        completion_scores: Vec::new(),
        generations: Vec::new(),
    };
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        let fail = |msg: String| Error::Parse {
            path: path.into(),
            line,
            msg,
        };
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| fail(format!("`{s}` is not a number")))
        };
        samples.prompt_scores.push(num(&record[0])?);
        samples.completion_scores.push(num(&record[1])?);
        let gen = record[2]
            .split_whitespace()
            .map(|s| {
                s.parse::<TokenId>()
                    .map_err(|_| fail(format!("`{s}` is not a token id")))
            })
            .collect::<Result<Vec<_>>>()?;
        samples.generations.push(gen);
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::PolicyParams;
    use proptest::prelude::*;

    #[test]
    fn dist_n_examples() {
        assert_eq!(dist_n(&[0, 1, 2, 3], 1).unwrap(), 1.0);
        assert!((dist_n(&[0, 1, 0, 1], 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((dist_n(&[4, 4, 4, 4], 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(dist_n(&[1], 2).is_err());
    }

    #[test]
    fn uniform_perplexity_is_vocab_size() {
        let p = PolicyParams::zeros(8, 3).unwrap();
        assert_eq!(perplexity(&p, &[0, 5, 2, 7, 1]).unwrap(), 8.0);
        assert!(perplexity(&p, &[3]).is_err());
    }

    #[test]
    fn greedy_sequence_has_unit_perplexity() {
        struct Det;
        impl TokenPolicy for Det {
            fn vocab_size(&self) -> usize {
                3
            }
            fn log_probs(&self, ctx: &[TokenId]) -> Vec<f64> {
                let next = (ctx.last().unwrap() + 1) % 3;
                (0..3)
                    .map(|a| if a == next { 0.0 } else { f64::NEG_INFINITY })
                    .collect()
            }
        }
        assert_eq!(perplexity(&Det, &[0, 1, 2, 0]).unwrap(), 1.0);
        assert_eq!(perplexity(&Det, &[0, 2]).unwrap(), f64::INFINITY);
    }

    #[test]
    fn hand_perplexity_two_tokens() {
        // window 1, vocab 2, only bias and token-0 features set
        let mut p = PolicyParams::zeros(2, 1).unwrap();
        let i = p.actor_index(0, 1);
        p.as_mut_slice()[i] = 1.0; // after token 0, logit(1) = 1
        let j = p.actor_index(2, 0);
        p.as_mut_slice()[j] = 0.5; // bias on token 0
                                   // sequence 0,1,1,0
        let e = std::f64::consts::E;
        let after0 = |tok: usize| {
            let z = e.powf(0.5) + e;
            if tok == 0 {
                e.powf(0.5) / z
            } else {
                e / z
            }
        };
        let after1 = |tok: usize| {
            let z = e.powf(0.5) + 1.0;
            if tok == 0 {
                e.powf(0.5) / z
            } else {
                1.0 / z
            }
        };
        let prob = after0(1) * after1(1) * after1(0);
        let expected = prob.powf(-1.0 / 3.0);
        assert!((perplexity(&p, &[0, 1, 1, 0]).unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn quantile_curve_examples() {
        let pts = quantile_curve(&[-3.0, -2.0, -1.0, 0.0], &[0.0, 1.0, 2.0, 3.0], 2).unwrap();
        assert_eq!(
            pts.iter().map(|p| p.mean_score).collect::<Vec<_>>(),
            vec![0.5, 2.5]
        );
        assert_eq!(pts[0].quantile, 0.25);

        let flat = quantile_curve(&[3.0, 1.0, 2.0, 0.0, 5.0], &[1.5; 5], 3).unwrap();
        assert!(flat.iter().all(|p| p.mean_score == 1.5));
        assert_eq!(flat.iter().map(|p| p.count).collect::<Vec<_>>(), vec![2, 2, 1]);

        let x: Vec<f64> = (0..10).map(f64::from).collect();
        let up = quantile_curve(&x, &x, 2).unwrap();
        assert!(up[0].mean_score < up[1].mean_score);

        assert!(quantile_curve(&[], &[], 1).is_err());
    }

    #[test]
    fn tail_average_examples() {
        let p = [-3.0, -2.6, 0.0];
        let c = [1.0, 2.0, 9.0];
        assert!((tail_average(&p, &c, -2.5).unwrap() - 1.5).abs() < 1e-15);
        assert_eq!(tail_average(&p, &c, -2.8).unwrap(), 1.0);
        assert_eq!(tail_average(&p, &c, 10.0).unwrap(), 4.0);
        assert!(matches!(tail_average(&p, &c, -5.0), Err(Error::EmptyTail(_))));
    }

    #[test]
    fn histogram_examples() {
        let edges = [-4.0, -2.0, 0.0, 2.0, 4.0];
        let h = histogram(&[-3.0, -1.0, 1.0, 3.0], &edges).unwrap();
        assert_eq!(h.counts, vec![1, 1, 1, 1]);
        let h = histogram(&[0.5, 0.1, 1.9], &edges).unwrap();
        assert_eq!(h.counts, vec![0, 0, 3, 0]);
        let h = histogram(&[-9.0, 4.0, 0.0, f64::NAN], &edges).unwrap();
        assert_eq!((h.underflow, h.overflow), (1, 2));
        assert_eq!(h.total(), 4);
        assert!(histogram(&[0.0], &[1.0, 1.0]).is_err());
    }

    proptest! {
        #[test]
        fn quantile_bins_reaggregate(p in proptest::collection::vec(-3.0f64..3.0, 1..200),
                                     seed in 0u64..100, bins in 1usize..20) {
            use rand::Rng;
            let mut r = rng::stream(seed, &[]);
            let c: Vec<f64> = p.iter().map(|_| r.random_range(-3.0..3.0)).collect();
            let bins = bins.min(p.len());
            let pts = quantile_curve(&p, &c, bins).unwrap();
            let weighted: f64 = pts.iter().map(|q| q.mean_score * q.count as f64).sum::<f64>() / p.len() as f64;
            let global = c.iter().sum::<f64>() / c.len() as f64;
            prop_assert!((weighted - global).abs() < 1e-9);
        }

        #[test]
        fn dist_n_in_unit_interval(t in proptest::collection::vec(0u32..4, 3..30), n in 1usize..3) {
            let d = dist_n(&t, n).unwrap();
            prop_assert!(d > 0.0 && d <= 1.0);
            let grams: Vec<_> = t.windows(n).collect();
            let all_distinct = grams.iter().collect::<HashSet<_>>().len() == grams.len();
            prop_assert_eq!(d == 1.0, all_distinct);
        }

        #[test]
        fn histogram_conserves_samples(s in proptest::collection::vec(-10.0f64..10.0, 0..100)) {
            let edges = uniform_edges(-4.0, 4.0, 8).unwrap();
            prop_assert_eq!(histogram(&s, &edges).unwrap().total(), s.len());
        }

        #[test]
        fn perplexity_invariant_under_relabeling(seed in 0u64..200, seq in proptest::collection::vec(0u32..4, 2..10)) {
            use rand::seq::SliceRandom;
            use rand::Rng;
            let vocab = 4;
            let window = 2;
            let mut r = rng::stream(seed, &[1]);
            let mut p = PolicyParams::zeros(vocab, window).unwrap();
            for w in p.as_mut_slice() { *w = r.random_range(-2.0..2.0); }
            let mut perm: Vec<usize> = (0..vocab).collect();
            perm.shuffle(&mut r);

            let mut q = PolicyParams::zeros(vocab, window).unwrap();
            let d = p.feature_dim();
            let map_feature = |f: usize| {
                if f == p.bias_feature() { f } else { (f / vocab) * vocab + perm[f % vocab] }
            };
            for f in 0..d {
                for (j, &pj) in perm.iter().enumerate() {
                    let src = p.as_slice()[p.actor_index(f, j)];
                    let dst = q.actor_index(map_feature(f), pj);
                    q.as_mut_slice()[dst] = src;
                }
            }
            let relabeled: Vec<TokenId> = seq.iter().map(|&t| perm[t as usize] as TokenId).collect();
            let a = perplexity(&p, &seq).unwrap();
            let b = perplexity(&q, &relabeled).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a);
        }
    }
}
