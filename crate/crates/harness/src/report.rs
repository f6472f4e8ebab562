//! Merges evaluated runs into one comparison report.
//!
//! Each run is re-scored from its `eval/scores.csv` against the histogram
//! edges in its `run.json`, so every model in a report is binned identically.
//! Runs sharing a label (the same arm under different seeds) are pooled:
//! histogram counts are summed, quantile curves averaged, and scalar metrics
//! reported as mean and standard deviation across seeds.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rarlhf_core::eval::{metrics_row, read_scores, EvalReport, METRICS_HEADER};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::experiment::{EnvFingerprint, RunMeta};

/// An evaluated run found on disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub meta: RunMeta,
    pub report: EvalReport,
}

/// Every directory under `roots` (including the roots) holding a `run.json`,
/// sorted by path.
pub fn find_run_dirs(roots: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack: Vec<PathBuf> = roots.to_vec();
    while let Some(dir) = stack.pop() {
        if !dir.is_dir() {
            bail!("{} is not a directory", dir.display());
        }
        if dir.join("run.json").is_file() {
            found.push(dir.clone());
        }
        for entry in fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    found.sort();
    found.dedup();
    Ok(found)
}

/// Perplexity as recorded in the run's `summary.json`; a missing value
/// means the model assigned zero probability to a held-out token.
fn recorded_perplexity(summary: &Path) -> Result<f64> {
    let text = fs::read_to_string(summary).with_context(|| format!("reading {}", summary.display()))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing {}", summary.display()))?;
    Ok(value
        .get("perplexity")
        .and_then(serde_json::Value::as_f64)
        .unwrap_or(f64::INFINITY))
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let meta_path = dir.join("run.json");
    let meta: RunMeta = serde_json::from_str(
        &fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?,
    )
    .with_context(|| format!("parsing {}", meta_path.display()))?;
    let cfg_path = dir.join("config.toml");
    let cfg = ExperimentConfig::load(&cfg_path, &[])
        .with_context(|| format!("loading config snapshot {}", cfg_path.display()))?;
    let eval_dir = dir.join("eval");
    let samples = read_scores(&eval_dir.join("scores.csv"))?;
    let ppl = recorded_perplexity(&eval_dir.join("summary.json"))?;
    let report = EvalReport::build(&meta.label, &samples, &meta.env.histogram_edges, &cfg.eval, ppl)
        .with_context(|| format!("re-scoring {}", dir.display()))?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        meta,
        report,
    })
}

/// Mean and sample standard deviation; the deviation is zero for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricSummary {
    pub mean: f64,
    pub std: f64,
    /// Seeds that contributed a finite value.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelSummary {
    pub label: String,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, Option<MetricSummary>>,
}

/// Metrics aggregated across seeds, in `METRICS_HEADER` order.
const SUMMARY_METRICS: [&str; 8] = [
    "mean_score",
    "tail_average",
    "bottom_quantile_mean",
    "dist_1",
    "dist_2",
    "dist_3",
    "gen_len_mean",
    "perplexity",
];

fn metric(report: &EvalReport, name: &str) -> Option<f64> {
    let v = match name {
        "mean_score" => Some(report.mean_score),
        "tail_average" => report.headline_tail_average(),
        "bottom_quantile_mean" => Some(report.bottom_quantile_mean()),
        "dist_1" => Some(report.dist_1),
        "dist_2" => Some(report.dist_2),
        "dist_3" => Some(report.dist_3),
        "gen_len_mean" => Some(report.gen_len_mean),
        "perplexity" => report.perplexity,
        _ => None,
    };
    v.filter(|x| x.is_finite())
}

/// A merged report over any number of runs.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub env: EnvFingerprint,
    pub runs: Vec<LoadedRun>,
    /// Labels in first-seen order.
    pub labels: Vec<String>,
}

impl Comparison {
    pub fn new(runs: Vec<LoadedRun>) -> Result<Self> {
        let Some(first) = runs.first() else {
            bail!("no evaluated runs found");
        };
        let env = first.meta.env.clone();
        for run in &runs[1..] {
            if run.meta.env != env {
                bail!(
                    "run {} was scored on a different environment than {} ({:?} vs {:?})",
                    run.dir.display(),
                    first.dir.display(),
                    run.meta.env,
                    env
                );
            }
        }
        let quantiles = first.report.quantile_curve.len();
        if let Some(run) = runs.iter().find(|r| r.report.quantile_curve.len() != quantiles) {
            bail!(
                "run {} uses a different number of quantile bins",
                run.dir.display()
            );
        }
        let mut labels: Vec<String> = Vec::new();
        for run in &runs {
            if !labels.contains(&run.meta.label) {
                labels.push(run.meta.label.clone());
            }
        }
        Ok(Self { env, runs, labels })
    }

    pub fn load(roots: &[PathBuf]) -> Result<Self> {
        let dirs = find_run_dirs(roots)?;
        let mut runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
        runs.sort_by(|a, b| {
            (a.meta.arm, &a.meta.label, a.meta.seed).cmp(&(b.meta.arm, &b.meta.label, b.meta.seed))
        });
        Self::new(runs)
    }

    fn runs_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a LoadedRun> + 'a {
        self.runs.iter().filter(move |r| r.meta.label == label)
    }

    pub fn summaries(&self) -> Vec<LabelSummary> {
        self.labels
            .iter()
            .map(|label| {
                let runs: Vec<&LoadedRun> = self.runs_for(label).collect();
                let metrics = SUMMARY_METRICS
                    .iter()
                    .map(|&name| {
                        let values: Vec<f64> = runs.iter().filter_map(|r| metric(&r.report, name)).collect();
                        let summary = (!values.is_empty()).then(|| {
                            let (mean, std) = mean_std(&values);
                            MetricSummary {
                                mean,
                                std,
                                n: values.len(),
                            }
                        });
                        (name.to_string(), summary)
                    })
                    .collect();
                LabelSummary {
                    label: label.clone(),
                    seeds: runs.iter().map(|r| r.meta.seed).collect(),
                    metrics,
                }
            })
            .collect()
    }

    /// Writes `histogram.csv`, `quantile.csv`, `metrics.csv`, `summary.csv`
    /// and `summary.json` into `out`.
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let edges = &self.env.histogram_edges;
        let bins = edges.len() - 1;
        let first = &self.runs[0].report;

        let path = out.join("histogram.csv");
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut header = vec!["bin_lo".to_string(), "bin_hi".to_string(), "prompt".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for k in 0..bins {
            let mut row = vec![
                edges[k].to_string(),
                edges[k + 1].to_string(),
                first.prompt_histogram.counts[k].to_string(),
            ];
            for label in &self.labels {
                let count: usize = self.runs_for(label).map(|r| r.report.histogram.counts[k]).sum();
                row.push(count.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;

        let path = out.join("quantile.csv");
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut header = vec!["quantile".to_string()];
        header.extend(self.labels.iter().cloned());
        w.write_record(&header)?;
        for (q, point) in first.quantile_curve.iter().enumerate() {
            let mut row = vec![point.quantile.to_string()];
            for label in &self.labels {
                let values: Vec<f64> = self
                    .runs_for(label)
                    .map(|r| r.report.quantile_curve[q].mean_score)
                    .collect();
                row.push(mean_std(&values).0.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;

        let path = out.join("metrics.csv");
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut header = vec!["seed"];
        header.extend(METRICS_HEADER);
        w.write_record(&header)?;
        for run in &self.runs {
            let mut row = vec![run.meta.seed.to_string()];
            row.extend(metrics_row(&run.report));
            w.write_record(&row)?;
        }
        w.flush()?;

        let summaries = self.summaries();
        let path = out.join("summary.csv");
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
        let mut header = vec!["model".to_string(), "n_seeds".to_string()];
        for name in SUMMARY_METRICS {
            header.push(format!("{name}_mean"));
            header.push(format!("{name}_std"));
        }
        w.write_record(&header)?;
        for s in &summaries {
            let mut row = vec![s.label.clone(), s.seeds.len().to_string()];
            for name in SUMMARY_METRICS {
                match &s.metrics[name] {
                    Some(m) => {
                        row.push(m.mean.to_string());
                        row.push(m.std.to_string());
                    }
                    None => {
                        row.push(String::new());
                        row.push(String::new());
                    }
                }
            }
            w.write_record(&row)?;
        }
        w.flush()?;

        let path = out.join("summary.json");
        let json = serde_json::to_string_pretty(&summaries)?;
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
