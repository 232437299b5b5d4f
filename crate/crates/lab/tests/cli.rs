use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use opposd_lab::metrics::read_metrics;
use opposd_lab::runner::read_evaluation;

const SMALL_TRAIN: &str = r#"
[train]
total_actor_updates = 6
checkpoint_interval = 3
bc_iterations = 20
warm_critic_iterations = 20
warm_ratio_iterations = 20
actor_batch_size = 64
critic_batch_size = 64
ratio_batch_size = 32
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        Sandbox {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn config(&self, name: &str, text: &str) -> PathBuf {
        let p = self.dir.path().join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_opposd"))
            .args(args)
            .env("OPPOSD_OUTPUT_DIR", self.out())
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let o = self.run(args);
        assert!(
            o.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr)
        );
        String::from_utf8(o.stdout).unwrap().trim().to_string()
    }
}

fn hard_config(seed: u64, extra: &str) -> String {
    format!("environment = \"hard_example\"\nn = 200\nseed = {seed}\n{extra}")
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_documents_config_fields_with_defaults() {
    let s = Sandbox::new();
    let help = s.ok(&["--help"]);
    for field in [
        "gamma",
        "lambda",
        "entropy_coefficient",
        "actor_learning_rate",
        "ratio_weight_decay",
        "actor_batch_size",
        "ratio_batch_size",
        "critic_steps",
        "ratio_steps",
        "bc_iterations",
        "warm_critic_iterations",
        "warm_ratio_iterations",
        "total_actor_updates",
        "checkpoint_interval",
        "epsilon_smoothing",
        "algorithm",
        "discount_variant",
        "seed",
        "environment",
    ] {
        assert!(help.contains(field), "{field} missing from --help");
    }
    assert!(help.contains("[default: 5000"));
    assert!(help.contains("[default: 0.00001]"));
    let train_help = s.ok(&["train", "--help"]);
    assert!(train_help.contains("warm_ratio_iterations"));
}

#[test]
fn config_errors_exit_with_2() {
    let s = Sandbox::new();
    for (name, text) in [
        ("noseed.toml", "environment = \"cartpole\"\n"),
        ("gamma.toml", "environment = \"cartpole\"\nseed = 1\n[train]\ngamma = 1.5\n"),
        ("typo.toml", "environment = \"cartpole\"\nseed = 1\n[train]\nlearning_rate = 0.1\n"),
        ("empty.toml", "environment = \"cartpole\"\nseed = 1\nn = 0\n"),
    ] {
        let cfg = s.config(name, text);
        let o = s.run(&["collect", "--config", cfg.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let o = s.run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn numeric_failure_exits_with_3() {
    let s = Sandbox::new();
    let cfg = s.config(
        "boom.toml",
        &hard_config(
            1,
            "[train]\ncritic_learning_rate = 1e300\nbc_iterations = 5\nwarm_critic_iterations = 1\nwarm_ratio_iterations = 1\ntotal_actor_updates = 3\n[evaluate]\nsimulator = false\n",
        ),
    );
    let o = s.run(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage"));
}

#[test]
fn collect_is_deterministic_and_never_overwrites() {
    let s = Sandbox::new();
    let cfg = s.config("c.toml", "environment = \"cartpole\"\nn = 20\nseed = 11\n");
    let a = PathBuf::from(s.ok(&["collect", "--config", cfg.to_str().unwrap()]));
    let b = PathBuf::from(s.ok(&["collect", "--config", cfg.to_str().unwrap()]));
    assert_ne!(a, b);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ds = opposd_lab::dataset_file::load_dataset(&a).unwrap();
    assert_eq!((ds.n_trajectories(), ds.horizon), (20, 200));
    assert!(ds.trajectories.iter().all(|t| t.transitions.len() == 200));
}

#[test]
fn training_counts_checkpoints_and_is_reproducible() {
    let s = Sandbox::new();
    let text = hard_config(
        2,
        "[train]\ntotal_actor_updates = 100\ncheckpoint_interval = 100\nbc_iterations = 20\nwarm_critic_iterations = 20\nwarm_ratio_iterations = 20\nactor_batch_size = 32\ncritic_batch_size = 32\nratio_batch_size = 16\ncritic_steps = 1\nratio_steps = 1\n[evaluate]\nmc_episodes = 10\n",
    );
    let cfg = s.config("t.toml", &text);
    let a = PathBuf::from(s.ok(&["train", "--config", cfg.to_str().unwrap()]));
    let b = PathBuf::from(s.ok(&["train", "--config", cfg.to_str().unwrap()]));
    let names: Vec<String> = fs::read_dir(a.join("checkpoints"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    assert_eq!(names, vec!["update_00000000", "update_00000100"]);
    let (comment, rows) = read_metrics(&a.join("metrics.csv")).unwrap();
    assert!(comment.contains("algorithm=opposd"));
    assert_eq!(rows.len(), 101);
    assert!(rows[0].eval_mean.is_some() && rows[100].eval_mean.is_some() && rows[50].eval_mean.is_none());
    assert_eq!(files_under(&a), files_under(&b));
}

#[test]
fn off_pac_runs_are_labelled() {
    let s = Sandbox::new();
    let extra = SMALL_TRAIN.replace("[train]", "[train]\nalgorithm = \"off_pac\"");
    let cfg = s.config("o.toml", &hard_config(3, &format!("{extra}[evaluate]\nsimulator = false\n")));
    let dir = PathBuf::from(s.ok(&["train", "--config", cfg.to_str().unwrap()]));
    let (comment, rows) = read_metrics(&dir.join("metrics.csv")).unwrap();
    assert!(comment.contains("algorithm=off_pac"));
    assert!(rows.iter().all(|r| r.ratio_loss.is_none() && r.eval_mean.is_none()));
}

#[test]
fn resumed_run_reproduces_metrics_and_checkpoints() {
    let s = Sandbox::new();
    let cfg = s.config("r.toml", &hard_config(4, &format!("{SMALL_TRAIN}[evaluate]\nmc_episodes = 10\n")));
    let cfg = cfg.to_str().unwrap();
    let full = PathBuf::from(s.ok(&["train", "--config", cfg]));
    let mid = full.join("checkpoints").join("update_00000003");
    let resumed = PathBuf::from(s.ok(&["train", "--config", cfg, "--resume", mid.to_str().unwrap()]));
    let (_, full_rows) = read_metrics(&full.join("metrics.csv")).unwrap();
    let (_, tail_rows) = read_metrics(&resumed.join("metrics.csv")).unwrap();
    assert_eq!(tail_rows, full_rows[4..].to_vec());
    let last = Path::new("checkpoints").join("update_00000006");
    assert_eq!(files_under(&full.join(&last)), files_under(&resumed.join(&last)));
}

#[test]
fn evaluate_and_select_over_twenty_checkpoints() {
    let s = Sandbox::new();
    let extra = "[train]\ntotal_actor_updates = 19\ncheckpoint_interval = 1\nbc_iterations = 20\nwarm_critic_iterations = 20\nwarm_ratio_iterations = 20\nactor_batch_size = 64\ncritic_batch_size = 64\nratio_batch_size = 32\n[evaluate]\nmc_episodes = 10\nrefit_iterations = 5\n";
    let cfg = s.config("e.toml", &hard_config(5, extra));
    let cfg = cfg.to_str().unwrap();
    let run = s.ok(&["train", "--config", cfg]);
    let csv_path = PathBuf::from(s.ok(&["evaluate", "--config", cfg, "--run", &run]));
    let text = fs::read_to_string(&csv_path).unwrap();
    let records = read_evaluation(&csv_path).unwrap();
    assert_eq!(records.len(), 20);
    assert!(records.iter().all(|r| r.mc_estimate.is_some() && r.n_mc_episodes == 10));
    assert!(text.lines().last().unwrap().starts_with("# pearson_r="));
    let best: usize = s.ok(&["select", "--config", cfg, "--records", csv_path.to_str().unwrap()]).parse().unwrap();
    let max = records.iter().map(|r| r.oppe_estimate).fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(records.iter().rev().find(|r| r.oppe_estimate == max).unwrap().checkpoint, best);
}

#[test]
fn evaluation_without_simulator_leaves_mc_columns_empty() {
    let s = Sandbox::new();
    let extra = "[train]\ntotal_actor_updates = 0\nbc_iterations = 20\nwarm_critic_iterations = 20\nwarm_ratio_iterations = 20\n[evaluate]\nsimulator = false\nrefit_iterations = 5\n";
    let cfg = s.config("n.toml", &hard_config(6, extra));
    let cfg = cfg.to_str().unwrap();
    let run = s.ok(&["train", "--config", cfg]);
    let csv_path = PathBuf::from(s.ok(&["evaluate", "--config", cfg, "--run", &run]));
    let records = read_evaluation(&csv_path).unwrap();
    assert_eq!(records.len(), 1);
    assert!(records[0].mc_estimate.is_none() && records[0].mc_std.is_none());
    assert!(fs::read_to_string(&csv_path).unwrap().contains("# pearson_r=undefined"));
    assert_eq!(s.ok(&["select", "--config", cfg, "--run", &run]), "0");
}

#[test]
fn missing_checkpoints_name_the_directory() {
    let s = Sandbox::new();
    let cfg = s.config("m.toml", &hard_config(7, ""));
    let empty = s.dir.path().join("no-run-here");
    fs::create_dir(&empty).unwrap();
    let o = s.run(&["evaluate", "--config", cfg.to_str().unwrap(), "--run", empty.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("no checkpoints") && err.contains("no-run-here"), "{err}");
}

#[test]
fn gradcheck_command_passes() {
    let s = Sandbox::new();
    let out = s.ok(&["gradcheck", "--points", "3", "--seed", "2"]);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{out}");
}

#[test]
fn tabular_environment_from_file() {
    let s = Sandbox::new();
    let mut rng = opposd_core::rng::derive(1, 0, 0);
    let mdp = opposd_core::mdp::TabularMdp::random(4, 2, 0.9, 2, None, &mut rng).unwrap();
    opposd_lab::mdp_file::save_mdp(&mdp, &s.dir.path().join("mdp.json")).unwrap();
    let cfg = s.config("tab.toml", "environment = \"tabular:mdp.json\"\nseed = 0\nn = 5\nhorizon = 8\n");
    let path = s.ok(&["collect", "--config", cfg.to_str().unwrap()]);
    let ds = opposd_lab::dataset_file::load_dataset(Path::new(&path)).unwrap();
    assert_eq!((ds.state_dim, ds.n_actions, ds.horizon), (4, 2, 8));
}
