//! The `collect`, `train`, `evaluate` and `select` commands.
//!
//! Every command writes into a fresh run directory
//! `<output_dir>/<command>-<environment>-seed<seed>-<NNN>` holding a copy of
//! the config; nothing is ever overwritten.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use opposd_core::actor::{
    continue_training, hard_example_actor, train, ActorModel, Algorithm, CheckpointEvaluator, TrainState,
};
use opposd_core::data::{collect_dataset, epsilon_smooth, Dataset, PreparedData};
use opposd_core::env::{CartPole, Environment, StatePolicy, Step, TabularEnv, TabularPolicy, UniformPolicy};
use opposd_core::mdp::hard_example_mdp;
use opposd_core::oppe::{
    correlation_report, onpolicy_mc_eval, oppe_estimate, refit_ratio, select_best, EvaluationRecord,
    MonteCarloEvaluator,
};
use opposd_core::rng::{derive, tags};
use rand::RngCore;

use crate::checkpoint::{list_checkpoints, read_checkpoint, DiskStore};
use crate::config::{BehaviorSpec, EnvironmentSpec, RunConfig};
use crate::dataset_file::{load_dataset, save_dataset};
use crate::error::{LabError, LabResult};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const EVALUATION_FILE: &str = "evaluation.csv";
const REFIT_STREAM: u64 = 1 << 32;

/// Simulator behind a config's environment.
#[derive(Debug, Clone)]
pub enum Simulator {
    CartPole(CartPole),
    Tabular(TabularEnv),
}

impl Simulator {
    pub fn for_config(cfg: &RunConfig) -> Self {
        match &cfg.environment {
            EnvironmentSpec::CartPole => Simulator::CartPole(CartPole::new()),
            EnvironmentSpec::HardExample => Simulator::Tabular(TabularEnv::new(hard_example_mdp().mdp)),
            EnvironmentSpec::Tabular { mdp, .. } => Simulator::Tabular(TabularEnv::new(mdp.clone())),
        }
    }

    fn inner(&mut self) -> &mut dyn Environment {
        match self {
            Simulator::CartPole(e) => e,
            Simulator::Tabular(e) => e,
        }
    }
}

impl Environment for Simulator {
    fn state_dim(&self) -> usize {
        match self {
            Simulator::CartPole(e) => e.state_dim(),
            Simulator::Tabular(e) => e.state_dim(),
        }
    }

    fn n_actions(&self) -> usize {
        match self {
            Simulator::CartPole(e) => e.n_actions(),
            Simulator::Tabular(e) => e.n_actions(),
        }
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.inner().reset(rng)
    }

    fn step(&mut self, action: usize, rng: &mut dyn RngCore) -> opposd_core::Result<Step> {
        self.inner().step(action, rng)
    }
}

fn behavior_policy(cfg: &RunConfig, n_actions: usize) -> Box<dyn StatePolicy> {
    match &cfg.behavior {
        BehaviorSpec::Uniform => Box::new(UniformPolicy { n_actions }),
        BehaviorSpec::Table(table) => Box::new(TabularPolicy { table: table.clone() }),
    }
}

/// Rolls out `n` behavior trajectories from stream `index` and applies the
/// configured smoothing.
pub fn collect(cfg: &RunConfig, n: usize, index: u64) -> LabResult<Dataset> {
    let mut env = Simulator::for_config(cfg);
    let behavior = behavior_policy(cfg, env.n_actions());
    let ds = collect_dataset(&mut env, behavior.as_ref(), n, cfg.horizon, &mut derive(cfg.seed, tags::COLLECT, index))?;
    smooth(cfg, ds, index)
}

fn smooth(cfg: &RunConfig, ds: Dataset, index: u64) -> LabResult<Dataset> {
    let eps = cfg.train.epsilon_smoothing;
    if ds.smoothing_epsilon == eps {
        return Ok(ds);
    }
    if ds.smoothing_epsilon != 0.0 {
        return Err(LabError::Config {
            field: "train.epsilon_smoothing".into(),
            reason: format!("dataset was already smoothed with epsilon {}", ds.smoothing_epsilon),
        });
    }
    let behavior = behavior_policy(cfg, ds.n_actions);
    let mut out = epsilon_smooth(&ds, behavior.as_ref(), eps, &mut derive(cfg.seed, tags::SMOOTH, index))?;
    out.recompute_normalization()?;
    Ok(out)
}

fn training_data(cfg: &RunConfig) -> LabResult<Dataset> {
    match &cfg.dataset {
        Some(p) => smooth(cfg, load_dataset(p)?, 0),
        None => collect(cfg, cfg.n, 0),
    }
}

fn evaluation_data(cfg: &RunConfig) -> LabResult<Dataset> {
    match &cfg.eval_dataset {
        Some(p) => smooth(cfg, load_dataset(p)?, 1),
        None => collect(cfg, cfg.evaluate.n.unwrap_or(cfg.n), 1),
    }
}

/// Claims a fresh run directory.
pub fn run_dir(cfg: &RunConfig, command: &str) -> LabResult<PathBuf> {
    fs::create_dir_all(&cfg.output_dir).map_err(LabError::io(&cfg.output_dir))?;
    for k in 1..100_000 {
        let dir = cfg
            .output_dir
            .join(format!("{command}-{}-seed{}-{k:03}", cfg.environment.label(), cfg.seed));
        match fs::create_dir(&dir) {
            Ok(()) => {
                let cfg_path = dir.join("config.toml");
                fs::write(&cfg_path, &cfg.source).map_err(LabError::io(&cfg_path))?;
                return Ok(dir);
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(LabError::io(&dir)(e)),
        }
    }
    Err(LabError::format(&cfg.output_dir, "no free run directory name"))
}

/// Writes `<run>/dataset.jsonl` and returns its path.
pub fn cmd_collect(cfg: &RunConfig) -> LabResult<PathBuf> {
    let ds = collect(cfg, cfg.n, 0)?;
    let dir = run_dir(cfg, "collect")?;
    let path = dir.join(DATASET_FILE);
    save_dataset(&ds, &path)?;
    info!("collected {} trajectories into {}", ds.n_trajectories(), path.display());
    Ok(path)
}

fn mc_evaluator(cfg: &RunConfig) -> Option<MonteCarloEvaluator<Simulator>> {
    (cfg.evaluate.simulator && cfg.evaluate.mc_episodes > 0).then(|| MonteCarloEvaluator {
        env: Simulator::for_config(cfg),
        episodes: cfg.evaluate.mc_episodes,
        horizon: cfg.horizon,
        gamma: cfg.train.gamma,
        seed: cfg.seed,
    })
}

fn algorithm_name(a: Algorithm) -> &'static str {
    match a {
        Algorithm::Opposd => "opposd",
        Algorithm::OffPac => "off_pac",
    }
}

pub fn metrics_comment(cfg: &RunConfig) -> String {
    format!(
        "algorithm={} discount_variant={} environment={} seed={}",
        algorithm_name(cfg.train.algorithm),
        serde_json::to_value(cfg.train.discount_variant)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
        cfg.environment.label(),
        cfg.seed
    )
}

/// Trains from scratch, or continues from the checkpoint directory
/// `resume`. Returns the run directory holding `metrics.csv` and
/// `checkpoints/`.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> LabResult<PathBuf> {
    let ds = training_data(cfg)?;
    let data = PreparedData::new(&ds, &ds.normalization)?;
    let resumed = resume.map(read_checkpoint).transpose()?;
    let dir = run_dir(cfg, "train")?;
    let mut store = DiskStore::create(&dir, &metrics_comment(cfg))?;
    let mut evaluator = mc_evaluator(cfg);
    let eval = evaluator.as_mut().map(|e| e as &mut dyn CheckpointEvaluator);
    match resumed {
        Some((mut state, _)) => {
            if state.actor.normalization != data.normalization {
                return Err(LabError::Config {
                    field: "dataset".into(),
                    reason: "the checkpoint was trained on a different dataset".into(),
                });
            }
            info!("resuming after update {}", state.completed_updates);
            continue_training(&mut state, &data, &cfg.train, &mut store, eval)?;
        }
        None => {
            let actor = match cfg.environment {
                EnvironmentSpec::HardExample => {
                    Some(hard_example_actor(cfg.train.actor_learning_rate, data.normalization.clone())?)
                }
                _ => None,
            };
            train(&data, &cfg.train, actor, &mut store, eval)?;
        }
    }
    info!("run written to {}", dir.display());
    Ok(dir)
}

fn checkpoint_root(cfg: &RunConfig, run: Option<&Path>) -> LabResult<PathBuf> {
    let run = run
        .map(Path::to_path_buf)
        .or_else(|| cfg.evaluate.run.clone())
        .ok_or_else(|| LabError::Config {
            field: "evaluate.run".into(),
            reason: "no run directory given (set it in the config or pass --run)".into(),
        })?;
    let nested = run.join("checkpoints");
    Ok(if nested.is_dir() { nested } else { run })
}

/// OPPE estimate (and Monte-Carlo value when a simulator is enabled) of
/// one checkpointed state.
pub fn evaluate_state(
    cfg: &RunConfig,
    state: &TrainState,
    eval_data: &Dataset,
    sim: Option<&mut Simulator>,
) -> LabResult<EvaluationRecord> {
    let u = state.completed_updates;
    let data = PreparedData::new(eval_data, &state.ratio.normalization)?;
    let iterations = cfg.evaluate.refit_iterations.unwrap_or(cfg.train.warm_ratio_iterations);
    let mut rng = derive(cfg.seed, tags::EVAL, REFIT_STREAM + u as u64);
    let ratio = refit_ratio(&state.ratio, &state.actor, &data, iterations, cfg.train.ratio_batch_size, &mut rng)?;
    let estimate = oppe_estimate(&state.actor, &data, &ratio, cfg.train.gamma)?;
    let (mc_estimate, mc_std, n_mc_episodes) = match sim {
        Some(env) => {
            let mut rng = derive(cfg.seed, tags::EVAL, u as u64);
            let r = onpolicy_mc_eval(&state.actor, env, cfg.evaluate.mc_episodes, cfg.horizon, cfg.train.gamma, &mut rng)?;
            (Some(r.mean), Some(r.std), r.n_episodes)
        }
        None => (None, None, 0),
    };
    Ok(EvaluationRecord {
        checkpoint: u,
        oppe_estimate: estimate,
        mc_estimate,
        mc_std,
        n_mc_episodes,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV body plus a `# pearson_r=` footer line.
pub fn write_evaluation(path: &Path, records: &[EvaluationRecord]) -> LabResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| LabError::format(path, e.to_string());
    w.write_record(["checkpoint", "oppe_estimate", "mc_estimate", "mc_std", "n_mc_episodes"])
        .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.checkpoint.to_string(),
            r.oppe_estimate.to_string(),
            opt(r.mc_estimate),
            opt(r.mc_std),
            r.n_mc_episodes.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let mut bytes = w.into_inner().map_err(|e| LabError::format(path, e.to_string()))?;
    match correlation_report(records) {
        Ok(rep) => writeln!(bytes, "# pearson_r={} n={}", rep.coefficient, rep.points.len()),
        Err(e) => writeln!(bytes, "# pearson_r=undefined ({e})"),
    }
    .map_err(LabError::io(path))?;
    fs::write(path, bytes).map_err(LabError::io(path))
}

pub fn read_evaluation(path: &Path) -> LabResult<Vec<EvaluationRecord>> {
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    let mut reader = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let bad = |what: &str| LabError::format(path, format!("bad {what}"));
    let num = |s: &str, what: &str| -> LabResult<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(what))
        }
    };
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| LabError::format(path, e.to_string()))?;
        if rec.len() != 5 {
            return Err(bad("row width"));
        }
        out.push(EvaluationRecord {
            checkpoint: rec[0].parse().map_err(|_| bad("checkpoint"))?,
            oppe_estimate: num(&rec[1], "oppe_estimate")?.ok_or_else(|| bad("oppe_estimate"))?,
            mc_estimate: num(&rec[2], "mc_estimate")?,
            mc_std: num(&rec[3], "mc_std")?,
            n_mc_episodes: rec[4].parse().map_err(|_| bad("n_mc_episodes"))?,
        });
    }
    Ok(out)
}

/// Scores every checkpoint of a run. Returns the `evaluation.csv` path and
/// the records.
pub fn cmd_evaluate(cfg: &RunConfig, run: Option<&Path>) -> LabResult<(PathBuf, Vec<EvaluationRecord>)> {
    let root = checkpoint_root(cfg, run)?;
    let checkpoints = list_checkpoints(&root)?;
    let eval_data = evaluation_data(cfg)?;
    let mut sim = (cfg.evaluate.simulator && cfg.evaluate.mc_episodes > 0).then(|| Simulator::for_config(cfg));
    let mut records = Vec::with_capacity(checkpoints.len());
    for (u, path) in &checkpoints {
        let (state, _) = read_checkpoint(path)?;
        if state.completed_updates != *u {
            return Err(LabError::format(path, "directory name and stored update index disagree"));
        }
        let rec = evaluate_state(cfg, &state, &eval_data, sim.as_mut())?;
        info!("checkpoint {u}: oppe {} mc {:?}", rec.oppe_estimate, rec.mc_estimate);
        records.push(rec);
    }
    let dir = run_dir(cfg, "evaluate")?;
    let path = dir.join(EVALUATION_FILE);
    write_evaluation(&path, &records)?;
    Ok((path, records))
}

/// Best checkpoint by OPPE estimate, from an existing evaluation file or a
/// fresh evaluation.
pub fn cmd_select(cfg: &RunConfig, run: Option<&Path>, records: Option<&Path>) -> LabResult<usize> {
    let records = match records {
        Some(p) => read_evaluation(p)?,
        None => cmd_evaluate(cfg, run)?.1,
    };
    Ok(select_best(&records)?)
}

/// The actor of a checkpoint directory.
pub fn load_actor(dir: &Path) -> LabResult<ActorModel> {
    Ok(read_checkpoint(dir)?.0.actor)
}
