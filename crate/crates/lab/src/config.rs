//! TOML run configuration.
//!
//! ```toml
//! environment = "cartpole"        # or "hard_example", "tabular:mdp.json"
//! n = 500
//! seed = 0
//!
//! [train]                          # any TrainConfig field
//! total_actor_updates = 10000
//! ```
//!
//! Relative paths are resolved against the directory holding the config
//! file. `OPPOSD_OUTPUT_DIR` replaces `output_dir`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use opposd_core::actor::TrainConfig;
use opposd_core::mdp::{PolicyTable, TabularMdp};
use serde::Deserialize;

use crate::error::{LabError, LabResult};
use crate::mdp_file::{load_mdp, load_policy};

pub const OUTPUT_DIR_VAR: &str = "OPPOSD_OUTPUT_DIR";
pub const DEFAULT_N: usize = 500;
pub const CARTPOLE_HORIZON: usize = 200;
pub const DEFAULT_MC_EPISODES: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub enum EnvironmentSpec {
    CartPole,
    HardExample,
    Tabular { path: PathBuf, mdp: TabularMdp },
}

impl EnvironmentSpec {
    pub fn label(&self) -> &'static str {
        match self {
            EnvironmentSpec::CartPole => "cartpole",
            EnvironmentSpec::HardExample => "hard_example",
            EnvironmentSpec::Tabular { .. } => "tabular",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorSpec {
    Uniform,
    Table(PolicyTable),
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    /// Run directory (or its `checkpoints/` directory) to score.
    pub run: Option<PathBuf>,
    /// Roll out checkpoints in the simulator.
    pub simulator: bool,
    pub mc_episodes: usize,
    /// Trajectories in the evaluation dataset when none is given.
    pub n: Option<usize>,
    /// Ratio refit iterations; defaults to `train.warm_ratio_iterations`.
    pub refit_iterations: Option<usize>,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        EvaluateConfig {
            run: None,
            simulator: true,
            mc_episodes: DEFAULT_MC_EPISODES,
            n: None,
            refit_iterations: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    environment: Option<String>,
    seed: Option<u64>,
    n: Option<usize>,
    horizon: Option<usize>,
    behavior: Option<String>,
    dataset: Option<PathBuf>,
    eval_dataset: Option<PathBuf>,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    train: toml::Table,
    #[serde(default)]
    evaluate: Option<toml::Table>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub environment: EnvironmentSpec,
    pub seed: u64,
    /// Trajectories to collect.
    pub n: usize,
    pub horizon: usize,
    pub behavior: BehaviorSpec,
    /// Training data; collected on the fly when absent.
    pub dataset: Option<PathBuf>,
    pub eval_dataset: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
    pub evaluate: EvaluateConfig,
    /// The config text as loaded, copied into every run directory.
    pub source: String,
}

fn config_err(field: impl Into<String>, reason: impl Into<String>) -> LabError {
    LabError::Config {
        field: field.into(),
        reason: reason.into(),
    }
}

/// Field named in a serde error such as "unknown field `x`".
fn field_in(message: &str, prefix: &str) -> String {
    let name = message.split('`').nth(1).unwrap_or("");
    if name.is_empty() {
        prefix.trim_end_matches('.').to_string()
    } else {
        format!("{prefix}{name}")
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn existing(base: &Path, p: &Path, field: &str) -> LabResult<PathBuf> {
    let full = resolve(base, p);
    if !full.exists() {
        return Err(config_err(field, format!("{} does not exist", full.display())));
    }
    Ok(full)
}

fn merge_train(base: TrainConfig, overrides: toml::Table) -> LabResult<TrainConfig> {
    if overrides.contains_key("seed") {
        return Err(config_err("train.seed", "set the top-level `seed` instead"));
    }
    let mut table = toml::Table::try_from(&base).map_err(|e| config_err("train", e.to_string()))?;
    for (k, v) in overrides {
        table.insert(k, v);
    }
    TrainConfig::deserialize(table).map_err(|e| {
        let msg = e.message().to_string();
        config_err(field_in(&msg, "train."), msg)
    })
}

impl RunConfig {
    pub fn load(path: &Path) -> LabResult<Self> {
        let text = std::fs::read_to_string(path).map_err(LabError::io(path))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &base)
    }

    /// `base` resolves relative paths.
    pub fn parse(text: &str, base: &Path) -> LabResult<Self> {
        let raw: RawConfig = toml::from_str(text).map_err(|e| {
            let msg = e.message().to_string();
            config_err(field_in(&msg, ""), msg)
        })?;
        let seed = raw.seed.ok_or_else(|| config_err("seed", "is mandatory"))?;
        let env_text = raw
            .environment
            .ok_or_else(|| config_err("environment", "is mandatory (cartpole, hard_example or tabular:<file>)"))?;
        let environment = match env_text.as_str() {
            "cartpole" => EnvironmentSpec::CartPole,
            "hard_example" => EnvironmentSpec::HardExample,
            other => match other.strip_prefix("tabular:") {
                Some(file) => {
                    let path = existing(base, Path::new(file), "environment")?;
                    let mdp = load_mdp(&path).map_err(|e| config_err("environment", e.to_string()))?;
                    EnvironmentSpec::Tabular { path, mdp }
                }
                None => {
                    return Err(config_err(
                        "environment",
                        format!("unknown environment `{other}` (cartpole, hard_example or tabular:<file>)"),
                    ))
                }
            },
        };
        let n = raw.n.unwrap_or(DEFAULT_N);
        if n == 0 {
            return Err(config_err("n", "an empty dataset cannot be collected"));
        }
        let horizon = match (raw.horizon, &environment) {
            (Some(h), _) => h,
            (None, EnvironmentSpec::CartPole) => CARTPOLE_HORIZON,
            (None, EnvironmentSpec::HardExample) => opposd_core::mdp::hard_example::HORIZON,
            (None, EnvironmentSpec::Tabular { mdp, .. }) => mdp
                .horizon()
                .ok_or_else(|| config_err("horizon", "is required when the MDP file has none"))?,
        };
        if horizon == 0 {
            return Err(config_err("horizon", "must be at least 1"));
        }
        let behavior = match raw.behavior.as_deref() {
            None | Some("uniform") => BehaviorSpec::Uniform,
            Some(other) => match other.strip_prefix("table:") {
                Some(file) => {
                    if !matches!(environment, EnvironmentSpec::Tabular { .. } | EnvironmentSpec::HardExample) {
                        return Err(config_err("behavior", "a policy table needs a tabular environment"));
                    }
                    let path = existing(base, Path::new(file), "behavior")?;
                    BehaviorSpec::Table(load_policy(&path).map_err(|e| config_err("behavior", e.to_string()))?)
                }
                None => return Err(config_err("behavior", format!("unknown behavior `{other}` (uniform or table:<file>)"))),
            },
        };
        let dataset = raw.dataset.map(|p| existing(base, &p, "dataset")).transpose()?;
        let eval_dataset = raw.eval_dataset.map(|p| existing(base, &p, "eval_dataset")).transpose()?;
        let output_dir = match std::env::var_os(OUTPUT_DIR_VAR) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => resolve(base, raw.output_dir.as_deref().unwrap_or(Path::new("runs"))),
        };
        let defaults = match environment {
            EnvironmentSpec::HardExample => TrainConfig::hard_example(),
            _ => TrainConfig::default(),
        };
        let mut train = merge_train(defaults, raw.train)?;
        train.seed = seed;
        train.validate().map_err(|e| match e {
            opposd_core::Error::InvalidConfig { field, reason } => config_err(format!("train.{field}"), reason),
            other => LabError::Core(other),
        })?;
        let mut evaluate = match raw.evaluate {
            Some(t) => EvaluateConfig::deserialize(t).map_err(|e| {
                let msg = e.message().to_string();
                config_err(field_in(&msg, "evaluate."), msg)
            })?,
            None => EvaluateConfig::default(),
        };
        evaluate.run = evaluate.run.map(|p| resolve(base, &p));
        if evaluate.n == Some(0) {
            return Err(config_err("evaluate.n", "must be at least 1"));
        }
        Ok(RunConfig {
            environment,
            seed,
            n,
            horizon,
            behavior,
            dataset,
            eval_dataset,
            output_dir,
            train,
            evaluate,
            source: text.to_string(),
        })
    }
}

const TRAIN_FIELDS: &[(&str, &str)] = &[
    ("algorithm", "opposd or off_pac"),
    ("discount_variant", "average, discounted_w_only or discounted_full"),
    ("gamma", "discount factor in (0, 1]"),
    ("lambda", "lambda-return parameter in [0, 1]"),
    ("entropy_coefficient", "entropy regularization weight"),
    ("actor_learning_rate", "Adam step size for the policy"),
    ("critic_learning_rate", "Adam step size for the critic"),
    ("ratio_learning_rate", "Adam step size for the ratio network"),
    ("ratio_weight_decay", "L2 weight decay of the ratio network"),
    ("actor_batch_size", "actor mini-batch size"),
    ("critic_batch_size", "critic mini-batch size"),
    ("ratio_batch_size", "ratio mini-batch size"),
    ("critic_steps", "critic steps per actor update"),
    ("ratio_steps", "ratio steps per actor update"),
    ("bc_iterations", "behavior cloning iterations"),
    ("warm_critic_iterations", "critic warm-start iterations"),
    ("warm_ratio_iterations", "ratio warm-start iterations"),
    ("total_actor_updates", "actor updates in the run"),
    ("checkpoint_interval", "actor updates between checkpoints"),
    ("epsilon_smoothing", "propensity smoothing epsilon in [0, 1)"),
    ("hidden_layers", "hidden widths of all three networks"),
    ("kernel_bandwidth", "RBF bandwidth; unset uses the median heuristic"),
];

fn show(v: Option<&toml::Value>) -> String {
    match v {
        Some(v) => v.to_string(),
        None => "unset".into(),
    }
}

/// Every config field with its default, for `--help`.
pub fn config_reference() -> String {
    let defaults = toml::Table::try_from(TrainConfig::default()).expect("config serializes");
    let hard = toml::Table::try_from(TrainConfig::hard_example()).expect("config serializes");
    let mut s = String::from("CONFIG FILE (TOML)\n\nTop level:\n");
    for (k, d) in [
        ("environment", "cartpole | hard_example | tabular:<mdp.json>  (required)"),
        ("seed", "master seed  (required)"),
        ("n", "trajectories to collect  [default: 500]"),
        ("horizon", "steps per trajectory  [default: 200 cartpole, 3 hard_example, MDP file value]"),
        ("behavior", "uniform | table:<policy.json>  [default: uniform]"),
        ("dataset", "training dataset file; collected from the simulator when unset"),
        ("eval_dataset", "evaluation dataset file; collected when unset"),
        ("output_dir", "parent of run directories  [default: runs; env OPPOSD_OUTPUT_DIR overrides]"),
    ] {
        let _ = writeln!(s, "  {k:<24} {d}");
    }
    s.push_str("\n[train]  (hard_example uses its own defaults where shown)\n");
    for (k, d) in TRAIN_FIELDS {
        let (a, b) = (show(defaults.get(*k)), show(hard.get(*k)));
        let def = if a == b { format!("[default: {a}]") } else { format!("[default: {a}; hard_example: {b}]") };
        let _ = writeln!(s, "  {k:<24} {d}  {def}");
    }
    s.push_str("  (the run seed is the top-level `seed`)\n\n[evaluate]\n");
    for (k, d) in [
        ("run", "run directory whose checkpoints are scored"),
        ("simulator", "add Monte-Carlo rollouts  [default: true]"),
        ("mc_episodes", "rollouts per checkpoint  [default: 100]"),
        ("n", "evaluation trajectories when collecting  [default: top-level n]"),
        ("refit_iterations", "ratio refit iterations  [default: train.warm_ratio_iterations]"),
    ] {
        let _ = writeln!(s, "  {k:<24} {d}");
    }
    s
}
