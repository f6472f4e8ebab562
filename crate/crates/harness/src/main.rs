use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use rarlhf::config::{resolve_output, Arm, ExperimentConfig};
use rarlhf::experiment::{
    evaluate, fingerprint, prepare, prepare_output_dir, run_seed, sweep, write_sweep_csv, RunMeta,
    RunOutcome, CODE_VERSION,
};
use rarlhf::report::Comparison;
use rarlhf_core::eval::write_report;
use rarlhf_core::trainer::checkpoint;

#[derive(Parser)]
#[command(
    name = "rarlhf",
    version,
    about = "Risk-averse RLHF experiments on a toy token environment"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every configured arm for every seed.
    Train(TrainArgs),
    /// Evaluate the reference model or a trained checkpoint on the test prompts.
    Eval(EvalArgs),
    /// Print the per-iteration batch quota as `iteration,B0` CSV.
    Schedule(ScheduleArgs),
    /// Train RA-RLHF over a grid of (warm start, alpha, rho) points.
    Sweep(SweepArgs),
    /// Merge evaluated runs into one comparison report.
    Report(ReportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set schedule.alpha=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        Ok(ExperimentConfig::load(&self.config, &self.overrides)?)
    }
}

#[derive(Args)]
struct OutputArgs {
    /// Output directory; defaults to the config's `experiment.output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replace an existing output directory.
    #[arg(long)]
    force: bool,
}

impl OutputArgs {
    fn root(&self, cfg: &ExperimentConfig) -> PathBuf {
        match &self.out {
            Some(p) => resolve_output(p),
            None => cfg.resolved_output_dir(),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Continue from the latest checkpoint of each run.
    #[arg(long, conflicts_with = "force")]
    resume: bool,
    /// Comma-separated seeds replacing `experiment.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated arms (sft, rlhf, ra-rlhf) replacing `experiment.arms`.
    #[arg(long, value_delimiter = ',', value_parser = parse_arm)]
    arms: Option<Vec<Arm>>,
    /// Run seeds concurrently.
    #[arg(long)]
    parallel_seeds: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Trainer checkpoint to evaluate; the reference model when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Model label in the report.
    #[arg(long)]
    label: Option<String>,
    /// Evaluation sampling seed offset.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ScheduleArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    output: OutputArgs,
    /// Grid point `warm_start,alpha,rho`. Repeatable.
    #[arg(long = "point", value_parser = parse_point)]
    points: Vec<(usize, f64, f64)>,
    /// Alphas crossed with `--warm-starts` and `--rhos`.
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
    /// Warm starts for the cross product; defaults to the config value.
    #[arg(long, value_delimiter = ',')]
    warm_starts: Vec<usize>,
    /// Rhos for the cross product; defaults to the config value.
    #[arg(long, value_delimiter = ',')]
    rhos: Vec<f64>,
    /// Comma-separated seeds replacing `experiment.seeds`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories, or directories to search for runs.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Where to write the merged report.
    #[arg(long)]
    out: PathBuf,
}

fn parse_arm(s: &str) -> Result<Arm, String> {
    Arm::parse(s).ok_or_else(|| format!("unknown arm `{s}` (expected sft, rlhf or ra-rlhf)"))
}

fn parse_point(s: &str) -> Result<(usize, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [i0, alpha, rho] = parts.as_slice() else {
        return Err(format!("grid point `{s}` must be warm_start,alpha,rho"));
    };
    Ok((
        i0.parse().map_err(|_| format!("bad warm start `{i0}`"))?,
        alpha.parse().map_err(|_| format!("bad alpha `{alpha}`"))?,
        rho.parse().map_err(|_| format!("bad rho `{rho}`"))?,
    ))
}

fn write_snapshot(root: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let path = root.join("config.toml");
    fs::write(&path, cfg.to_toml()).with_context(|| format!("writing {}", path.display()))
}

fn print_outcomes(outcomes: &[RunOutcome]) {
    println!("seed,model,mean_score,tail_average,bottom_quantile_mean,dist_2,gen_len_mean,perplexity");
    for o in outcomes {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:.4}"));
        println!(
            "{},{},{:.4},{},{:.4},{:.4},{:.2},{}",
            o.meta.seed,
            o.meta.label,
            o.report.mean_score,
            opt(o.report.headline_tail_average()),
            o.report.bottom_quantile_mean(),
            o.report.dist_2,
            o.report.gen_len_mean,
            opt(o.report.perplexity),
        );
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(seeds) = args.seeds {
        cfg.experiment.seeds = seeds;
    }
    if let Some(arms) = args.arms {
        cfg.experiment.arms = arms;
    }
    cfg.validate()?;
    let root = args.output.root(&cfg);
    prepare_output_dir(&root, args.output.force, args.resume)?;
    write_snapshot(&root, &cfg)?;
    let prepared = prepare(&cfg)?;

    let run = |seed: u64| run_seed(&cfg, &prepared, seed, Some(&root), args.resume);
    let per_seed: Vec<Vec<RunOutcome>> = if args.parallel_seeds {
        cfg.experiment
            .seeds
            .par_iter()
            .map(|&s| run(s))
            .collect::<Result<_>>()?
    } else {
        cfg.experiment
            .seeds
            .iter()
            .map(|&s| run(s))
            .collect::<Result<_>>()?
    };
    let outcomes: Vec<RunOutcome> = per_seed.into_iter().flatten().collect();
    print_outcomes(&outcomes);

    Comparison::load(std::slice::from_ref(&root))?.write(&root.join("report"))?;
    log::info!("wrote runs and report under {}", root.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let root = args.output.root(&cfg);
    prepare_output_dir(&root, args.output.force, false)?;
    let prepared = prepare(&cfg)?;
    let (policy, arm, default_label) = match &args.checkpoint {
        Some(path) => {
            let state = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
            let expected = prepared.sft.num_params();
            if state.policy.num_params() != expected {
                bail!(
                    "checkpoint {} has {} parameters but this config's model has {expected}",
                    path.display(),
                    state.policy.num_params()
                );
            }
            (state.policy, Arm::Rlhf, "checkpoint")
        }
        None => (prepared.sft.clone(), Arm::Sft, "sft"),
    };
    let label = args.label.unwrap_or_else(|| default_label.to_string());
    let (samples, report) = evaluate(&cfg, &prepared, &policy, &label, args.seed)?;
    write_report(&report, &samples, &root.join("eval"))?;
    write_snapshot(&root, &cfg)?;
    let meta = RunMeta {
        label,
        arm,
        seed: args.seed,
        code_version: CODE_VERSION.to_string(),
        experiment: cfg.experiment.name.clone(),
        iterations: 0,
        schedule: None,
        env: fingerprint(&cfg, &prepared),
    };
    let path = root.join("run.json");
    fs::write(&path, serde_json::to_string_pretty(&meta)?)
        .with_context(|| format!("writing {}", path.display()))?;
    println!(
        "{}: mean {:.4}, bottom-decile {:.4}, perplexity {}",
        meta.label,
        report.mean_score,
        report.bottom_quantile_mean(),
        report
            .perplexity
            .map_or_else(|| "overflow".to_string(), |p| format!("{p:.4}"))
    );
    Ok(())
}

fn cmd_schedule(args: ScheduleArgs) -> Result<()> {
    let cfg = args.config.load()?;
    let schedule = cfg.risk_schedule()?;
    let mut text = String::from("iteration,B0\n");
    for (i, b0) in schedule.table() {
        text.push_str(&format!("{i},{b0}\n"));
    }
    match args.out {
        Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let mut cfg = args.config.load()?;
    if let Some(seeds) = args.seeds {
        cfg.experiment.seeds = seeds;
    }
    cfg.validate()?;
    let mut points = args.points;
    if !args.alphas.is_empty() {
        let warm_starts = if args.warm_starts.is_empty() {
            vec![cfg.schedule.warm_start]
        } else {
            args.warm_starts
        };
        let rhos = if args.rhos.is_empty() {
            vec![cfg.schedule.rho]
        } else {
            args.rhos
        };
        for &i0 in &warm_starts {
            for &alpha in &args.alphas {
                for &rho in &rhos {
                    points.push((i0, alpha, rho));
                }
            }
        }
    } else if !args.warm_starts.is_empty() || !args.rhos.is_empty() {
        bail!("--warm-starts and --rhos need --alphas");
    }
    if points.is_empty() {
        bail!("no grid points: pass --point or --alphas");
    }

    let root = args.output.root(&cfg);
    prepare_output_dir(&root, args.output.force, false)?;
    write_snapshot(&root, &cfg)?;
    let prepared = prepare(&cfg)?;
    let rows = sweep(&cfg, &prepared, &points, &cfg.experiment.seeds, Some(&root))?;
    let path = root.join("sweep.csv");
    write_sweep_csv(&path, &rows)?;
    print!("{}", fs::read_to_string(&path)?);
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let comparison = Comparison::load(&args.runs)?;
    comparison.write(&args.out)?;
    println!("model,n_seeds,mean_score,tail_average");
    for s in comparison.summaries() {
        let fmt = |name: &str| {
            s.metrics[name]
                .as_ref()
                .map_or_else(String::new, |m| format!("{:.4} ± {:.4}", m.mean, m.std))
        };
        println!(
            "{},{},{},{}",
            s.label,
            s.seeds.len(),
            fmt("mean_score"),
            fmt("tail_average")
        );
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Schedule(a) => cmd_schedule(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
    }
}

#[cfg(test)]
mod tests {
    use clap::CommandFactory;

    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn grid_points_parse() {
        assert_eq!(parse_point("30, 0.4, 0.95"), Ok((30, 0.4, 0.95)));
        assert!(parse_point("30,0.4").is_err());
        assert!(parse_point("x,0.4,0.9").is_err());
    }
}
