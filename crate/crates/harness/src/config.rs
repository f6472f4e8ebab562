//! Experiment configuration.
//!
//! Configs are TOML files with one table per concern (`[env]`, `[ppo]`,
//! `[schedule]`, ...). Every table has defaults, so an empty file loads the
//! full-scale hyperparameters; the bundled toy config overrides the scale.
//! Individual keys can be overridden with dotted paths such as
//! `schedule.alpha=0.2`.

use std::fmt;
use std::path::{Path, PathBuf};

use rarlhf_core::env::MixtureSpec;
use rarlhf_core::eval::EvalConfig;
use rarlhf_core::mdp::{RolloutConfig, Vocab};
use rarlhf_core::policy::SftConfig;
use rarlhf_core::schedule::RiskSchedule;
use rarlhf_core::shaping::BetaController;
use rarlhf_core::trainer::{Objective, PpoConfig, SelectOn, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{}: {source}", path.display())]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Syntax { path: PathBuf, msg: String },
    #[error("override `{0}` is not of the form key=value")]
    OverrideSyntax(String),
    #[error("override `{key}`: {msg}")]
    Override { key: String, msg: String },
    #[error("invalid config field `{field}`: {msg}")]
    Field { field: String, msg: String },
}

fn field_error(field: &str, msg: impl fmt::Display) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

/// The three experiment arms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Arm {
    #[serde(rename = "sft")]
    Sft,
    #[serde(rename = "rlhf")]
    Rlhf,
    #[serde(rename = "ra-rlhf")]
    RaRlhf,
}

impl Arm {
    pub fn label(self) -> &'static str {
        match self {
            Arm::Sft => "sft",
            Arm::Rlhf => "rlhf",
            Arm::RaRlhf => "ra-rlhf",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sft" => Some(Arm::Sft),
            "rlhf" => Some(Arm::Rlhf),
            "ra-rlhf" => Some(Arm::RaRlhf),
            _ => None,
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    /// Relative paths resolve against `RARLHF_OUTPUT_ROOT` when it is set.
    pub output_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![1, 2, 3],
            arms: vec![Arm::Sft, Arm::Rlhf, Arm::RaRlhf],
            output_dir: PathBuf::from("runs"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSection {
    pub vocab_size: usize,
    pub scale: f64,
    pub repetition_penalty: f64,
    /// Generated tokens per episode.
    pub horizon: usize,
    pub eos: Option<u32>,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            scale: 3.0,
            repetition_penalty: 2.0,
            horizon: 12,
            eos: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// Seed for prompt sets and text corpora, shared by every run seed.
    pub seed: u64,
    pub train_prompts: usize,
    pub test_prompts: usize,
    /// Optional `prompt_tokens,score` files replacing the generated sets.
    pub train_csv: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub mixture: MixtureSpec,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            seed: 0,
            train_prompts: 2000,
            test_prompts: 2000,
            train_csv: None,
            test_csv: None,
            mixture: MixtureSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub window: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { window: 4 }
    }
}

/// Supervised stage: a base model fitted on a mixed-class corpus, then the
/// reference model fine-tuned on positive-class text only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SupervisedSection {
    pub continuation_len: usize,
    /// Probability that a corpus continuation token follows its prompt's class.
    pub fidelity: f64,
    pub base_corpus: usize,
    pub base: SftConfig,
    pub sft_corpus: usize,
    pub sft: SftConfig,
    /// Held-out positive-class sequences for perplexity.
    pub heldout: usize,
}

impl Default for SupervisedSection {
    fn default() -> Self {
        Self {
            continuation_len: 12,
            fidelity: 0.8,
            base_corpus: 2000,
            base: SftConfig {
                epochs: 150,
                learning_rate: 0.05,
                tolerance: 1e-6,
            },
            sft_corpus: 1000,
            sft: SftConfig {
                epochs: 40,
                learning_rate: 0.02,
                tolerance: 1e-6,
            },
            heldout: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub alpha: f64,
    pub warm_start: usize,
    pub rho: f64,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            warm_start: 30,
            rho: 0.95,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    /// Total iterations `M`.
    pub iterations: usize,
    pub checkpoint_every: usize,
    pub select_on: SelectOn,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            iterations: 194,
            checkpoint_every: 20,
            select_on: SelectOn::Shaped,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub env: EnvSection,
    pub dataset: DatasetSection,
    pub policy: PolicySection,
    pub supervised: SupervisedSection,
    pub ppo: PpoConfig,
    pub schedule: ScheduleSection,
    pub controller: BetaController,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_str_with_overrides(
        text: &str,
        origin: &Path,
        overrides: &[String],
    ) -> Result<Self, ConfigError> {
        let file: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Syntax {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        // start from the full default tree so partial nested tables stay valid
        let mut table = toml::Table::try_from(Self::default()).expect("defaults serialize to TOML");
        merge(&mut table, file);
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let config: Self = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Syntax {
                path: origin.to_path_buf(),
                msg: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_str_with_overrides(&text, path, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let e = &self.experiment;
        if e.seeds.is_empty() {
            return Err(field_error("experiment.seeds", "at least one seed is required"));
        }
        if e.arms.is_empty() {
            return Err(field_error("experiment.arms", "at least one arm is required"));
        }

        let env = &self.env;
        Vocab::new(env.vocab_size).map_err(|err| field_error("env.vocab_size", err))?;
        if !(env.scale > 0.0) {
            return Err(field_error("env.scale", "must be > 0"));
        }
        if !(env.repetition_penalty >= 0.0) {
            return Err(field_error("env.repetition_penalty", "must be >= 0"));
        }
        if env.horizon == 0 {
            return Err(field_error("env.horizon", "must be at least 1"));
        }
        if let Some(eos) = env.eos {
            if eos as usize >= env.vocab_size {
                return Err(field_error("env.eos", "token outside the vocabulary"));
            }
        }

        let d = &self.dataset;
        if d.train_csv.is_none() && d.train_prompts == 0 {
            return Err(field_error("dataset.train_prompts", "must be at least 1"));
        }
        if d.test_csv.is_none() && d.test_prompts == 0 {
            return Err(field_error("dataset.test_prompts", "must be at least 1"));
        }
        d.mixture
            .validate()
            .map_err(|err| field_error("dataset.mixture", err))?;

        if self.policy.window == 0 {
            return Err(field_error("policy.window", "must be at least 1"));
        }

        let s = &self.supervised;
        if !(0.0..=1.0).contains(&s.fidelity) {
            return Err(field_error("supervised.fidelity", "must lie in [0, 1]"));
        }
        if s.continuation_len == 0 {
            return Err(field_error("supervised.continuation_len", "must be at least 1"));
        }
        for (name, n) in [
            ("supervised.base_corpus", s.base_corpus),
            ("supervised.sft_corpus", s.sft_corpus),
            ("supervised.heldout", s.heldout),
        ] {
            if n == 0 {
                return Err(field_error(name, "must be at least 1"));
            }
        }
        for (name, c) in [("supervised.base", &s.base), ("supervised.sft", &s.sft)] {
            if !(c.learning_rate > 0.0) {
                return Err(field_error(&format!("{name}.learning_rate"), "must be > 0"));
            }
        }

        self.ppo.validate().map_err(|err| field_error("ppo", err))?;
        self.controller
            .validate()
            .map_err(|err| field_error("controller", err))?;
        if self.train.iterations == 0 {
            return Err(field_error("train.iterations", "must be at least 1"));
        }
        let sch = &self.schedule;
        if !(sch.alpha > 0.0 && sch.alpha <= 1.0) {
            return Err(field_error(
                "schedule.alpha",
                format!("must lie in (0, 1], got {}", sch.alpha),
            ));
        }
        if !(sch.rho > 0.0 && sch.rho <= 1.0) {
            return Err(field_error(
                "schedule.rho",
                format!("must lie in (0, 1], got {}", sch.rho),
            ));
        }
        if e.arms.contains(&Arm::RaRlhf) {
            self.risk_schedule()
                .map_err(|err| field_error("schedule.warm_start", err))?;
        }

        let ev = &self.eval;
        if ev.quantile_bins == 0 {
            return Err(field_error("eval.quantile_bins", "must be at least 1"));
        }
        if ev.histogram_bins == 0 {
            return Err(field_error("eval.histogram_bins", "must be at least 1"));
        }
        Ok(())
    }

    pub fn risk_schedule(&self) -> rarlhf_core::Result<RiskSchedule> {
        self.risk_schedule_with(self.schedule.alpha, self.schedule.warm_start, self.schedule.rho)
    }

    pub fn risk_schedule_with(
        &self,
        alpha: f64,
        warm_start: usize,
        rho: f64,
    ) -> rarlhf_core::Result<RiskSchedule> {
        RiskSchedule::new(self.ppo.batch_size, alpha, warm_start, rho, self.train.iterations)
    }

    pub fn rollout(&self) -> RolloutConfig {
        RolloutConfig {
            max_new_tokens: self.env.horizon,
            eos: self.env.eos,
        }
    }

    pub fn train_config(&self, objective: Objective) -> TrainConfig {
        TrainConfig {
            ppo: self.ppo,
            objective,
            select_on: self.train.select_on,
            rollout: self.rollout(),
            iterations: self.train.iterations,
            checkpoint_every: self.train.checkpoint_every,
        }
    }

    /// Output directory after applying `RARLHF_OUTPUT_ROOT`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.experiment.output_dir)
    }
}

pub const OUTPUT_ROOT_VAR: &str = "RARLHF_OUTPUT_ROOT";

pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Sets a dotted key in a TOML table. The value is read as a TOML literal
/// when it parses as one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::OverrideSyntax(assignment.to_string()))?;
    let key = key.trim();
    let raw = raw.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::OverrideSyntax(assignment.to_string()));
    }
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("key is nonempty");
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry.as_table_mut().ok_or_else(|| ConfigError::Override {
            key: key.to_string(),
            msg: format!("`{part}` is not a table"),
        })?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
