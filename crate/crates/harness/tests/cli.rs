use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[experiment]
name = "tiny"
seeds = [1]
arms = ["sft", "rlhf", "ra-rlhf"]
output_dir = "tiny"

[env]
vocab_size = 6
horizon = 4

[dataset]
train_prompts = 40
test_prompts = 30

[dataset.mixture]
prompt_len = 2

[policy]
window = 2

[supervised]
continuation_len = 4
base_corpus = 60
sft_corpus = 30
heldout = 10
base = { epochs = 5 }
sft = { epochs = 3 }

[ppo]
batch_size = 8
learning_rate = 0.02
ppo_epochs = 2

[schedule]
alpha = 0.5
warm_start = 1
rho = 0.75

[train]
iterations = 4
checkpoint_every = 2

[eval]
quantile_bins = 3
histogram_bins = 5
"#;

fn rarlhf(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rarlhf"))
        .args(args)
        .env("RARLHF_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .env_remove("RUST_BACKTRACE")
        .env_remove("RUST_LIB_BACKTRACE")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("tiny.cfg");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_runs_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = rarlhf(tmp.path(), &["train", "--config", &cfg]);
    assert!(out.status.success(), "{}", stderr(&out));

    let root = tmp.path().join("tiny");
    assert!(root.join("config.toml").is_file());
    for arm in ["sft", "rlhf", "ra-rlhf"] {
        let run = root.join("seed-1").join(arm);
        for f in [
            "run.json",
            "config.toml",
            "eval/histogram.csv",
            "eval/quantile.csv",
            "eval/metrics.csv",
            "eval/summary.json",
        ] {
            assert!(run.join(f).is_file(), "missing {arm}/{f}");
        }
    }
    let stats = fs::read_to_string(root.join("seed-1/ra-rlhf/stats.csv")).unwrap();
    assert_eq!(stats.lines().count(), 5);
    assert!(stats.starts_with("iteration,"));
    assert!(root.join("seed-1/rlhf/checkpoints/iter-00004.ckpt").is_file());

    let hist = fs::read_to_string(root.join("report/histogram.csv")).unwrap();
    assert_eq!(
        hist.lines().next().unwrap(),
        "bin_lo,bin_hi,prompt,sft,rlhf,ra-rlhf"
    );
    assert_eq!(hist.lines().count(), 6);
    let summary = fs::read_to_string(root.join("report/summary.csv")).unwrap();
    assert!(summary.lines().nth(1).unwrap().starts_with("sft,1,"));
}

#[test]
fn existing_output_needs_force() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let args = ["train", "--config", cfg.as_str(), "--arms", "rlhf"];
    assert!(rarlhf(tmp.path(), &args).status.success());

    let again = rarlhf(tmp.path(), &args);
    assert!(!again.status.success());
    assert!(stderr(&again).contains("--force"), "{}", stderr(&again));

    let mut forced = args.to_vec();
    forced.push("--force");
    let out = rarlhf(tmp.path(), &forced);
    assert!(out.status.success(), "{}", stderr(&out));
}

#[test]
fn forced_rerun_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let args = ["train", "--config", cfg.as_str(), "--arms", "ra-rlhf", "--force"];
    let stats = tmp.path().join("tiny/seed-1/ra-rlhf/stats.csv");
    assert!(rarlhf(tmp.path(), &args).status.success());
    let first = fs::read_to_string(&stats).unwrap();
    assert!(rarlhf(tmp.path(), &args).status.success());
    assert_eq!(fs::read_to_string(&stats).unwrap(), first);
}

#[test]
fn invalid_config_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = rarlhf(
        tmp.path(),
        &["train", "--config", &cfg, "--set", "schedule.alpha=1.5"],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("schedule.alpha"), "{}", stderr(&out));

    let out = rarlhf(
        tmp.path(),
        &["train", "--config", &cfg, "--set", "ppo.batch_size=0"],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("ppo"), "{}", stderr(&out));

    let out = rarlhf(tmp.path(), &["train", "--config", &cfg, "--set", "env.vocab=3"]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("vocab"), "{}", stderr(&out));
    assert!(!tmp.path().join("tiny").exists());
}

#[test]
fn schedule_prints_quota_table() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "");
    let out = rarlhf(
        tmp.path(),
        &[
            "schedule",
            "--config",
            &cfg,
            "--set",
            "ppo.batch_size=128",
            "--set",
            "train.iterations=194",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "iteration,B0");
    assert_eq!(lines.len(), 195);
    assert_eq!(lines[30], "30,128");
    assert_eq!(lines[100], "100,94");
    assert_eq!(lines[194], "194,52");
}

#[test]
fn sweep_emits_one_row_per_point_and_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = rarlhf(
        tmp.path(),
        &[
            "sweep",
            "--config",
            &cfg,
            "--point",
            "1,0.5,0.75",
            "--point",
            "2,0.25,0.75",
            "--seeds",
            "1,2",
            "--out",
            "grid",
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let csv = fs::read_to_string(tmp.path().join("grid/sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("warm_start,alpha,rho,seed,mean_score,tail_average"));
}

#[test]
fn eval_then_report_passthrough() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let out = rarlhf(tmp.path(), &["eval", "--config", &cfg, "--out", "ref"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rep = tmp.path().join("rep");
    let out = rarlhf(
        tmp.path(),
        &[
            "report",
            tmp.path().join("ref").to_str().unwrap(),
            "--out",
            rep.to_str().unwrap(),
        ],
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let quant = fs::read_to_string(rep.join("quantile.csv")).unwrap();
    assert_eq!(quant.lines().next().unwrap(), "quantile,sft");
    assert_eq!(quant.lines().count(), 4);
}

#[test]
fn report_rejects_mismatched_environments() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    assert!(rarlhf(tmp.path(), &["eval", "--config", &cfg, "--out", "a"])
        .status
        .success());
    assert!(rarlhf(
        tmp.path(),
        &["eval", "--config", &cfg, "--out", "b", "--set", "env.scale=5"]
    )
    .status
    .success());
    let out = rarlhf(
        tmp.path(),
        &[
            "report",
            tmp.path().join("a").to_str().unwrap(),
            tmp.path().join("b").to_str().unwrap(),
            "--out",
            tmp.path().join("rep").to_str().unwrap(),
        ],
    );
    assert!(!out.status.success());
    assert!(stderr(&out).contains("different environment"), "{}", stderr(&out));
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for entry in fs::read_dir(from).unwrap() {
        let path = entry.unwrap().path();
        let dest = to.join(path.file_name().unwrap());
        if path.is_dir() {
            copy_tree(&path, &dest);
        } else {
            fs::copy(&path, &dest).unwrap();
        }
    }
}

#[test]
fn resume_after_interruption_matches_uninterrupted_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), TINY);
    let full = [
        "train",
        "--config",
        cfg.as_str(),
        "--arms",
        "ra-rlhf",
        "--out",
        "full",
    ];
    assert!(rarlhf(tmp.path(), &full).status.success());

    // rebuild the state of a run killed right after its iteration-2 checkpoint
    let run = |d: &str| tmp.path().join(d).join("seed-1/ra-rlhf");
    copy_tree(&tmp.path().join("full"), &tmp.path().join("part"));
    fs::remove_file(run("part").join("checkpoints/iter-00004.ckpt")).unwrap();
    fs::remove_dir_all(run("part").join("eval")).unwrap();
    fs::remove_file(run("part").join("run.json")).unwrap();
    let stats = fs::read_to_string(run("full").join("stats.csv")).unwrap();
    let head: String = stats.lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(run("part").join("stats.csv"), head).unwrap();

    let resumed = [
        "train",
        "--config",
        cfg.as_str(),
        "--arms",
        "ra-rlhf",
        "--out",
        "part",
        "--resume",
    ];
    let out = rarlhf(tmp.path(), &resumed);
    assert!(out.status.success(), "{}", stderr(&out));

    for f in ["stats.csv", "eval/scores.csv", "run.json"] {
        assert_eq!(
            fs::read_to_string(run("part").join(f)).unwrap(),
            fs::read_to_string(run("full").join(f)).unwrap(),
            "{f} differs"
        );
    }
    assert_eq!(
        fs::read(run("part").join("checkpoints/iter-00004.ckpt")).unwrap(),
        fs::read(run("full").join("checkpoints/iter-00004.ckpt")).unwrap()
    );
}
