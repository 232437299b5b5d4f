use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use opposd_lab::config::{config_reference, RunConfig};
use opposd_lab::gradcheck::{run_gradcheck, DEFAULT_POINTS, TOLERANCE};
use opposd_lab::runner::{cmd_collect, cmd_evaluate, cmd_select, cmd_train};
use opposd_lab::LabError;

/// Batch off-policy policy optimization with state distribution correction.
///
/// Exit status: 0 success, 2 configuration error, 3 numeric failure,
/// 1 anything else.
#[derive(Parser)]
#[command(name = "opposd", version, after_long_help = config_reference())]
struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the behavior policy and write a JSON-lines dataset.
    #[command(after_long_help = config_reference())]
    Collect {
        #[arg(short, long)]
        config: PathBuf,
    },
    /// Warm start and train; writes checkpoints and metrics.csv.
    #[command(after_long_help = config_reference())]
    Train {
        #[arg(short, long)]
        config: PathBuf,
        /// Checkpoint directory (update_NNNNNNNN) to continue from.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score every checkpoint of a run; writes evaluation.csv.
    #[command(after_long_help = config_reference())]
    Evaluate {
        #[arg(short, long)]
        config: PathBuf,
        /// Run directory; overrides `evaluate.run`.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Print the checkpoint with the best OPPE estimate.
    #[command(after_long_help = config_reference())]
    Select {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        run: Option<PathBuf>,
        /// Existing evaluation.csv; skips re-evaluation.
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Finite-difference check of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_POINTS)]
        points: usize,
    },
}

fn run(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::Collect { config } => {
            let path = cmd_collect(&RunConfig::load(&config)?)?;
            println!("{}", path.display());
        }
        Command::Train { config, resume } => {
            let dir = cmd_train(&RunConfig::load(&config)?, resume.as_deref())?;
            println!("{}", dir.display());
        }
        Command::Evaluate { config, run } => {
            let (path, _) = cmd_evaluate(&RunConfig::load(&config)?, run.as_deref())?;
            println!("{}", path.display());
        }
        Command::Select { config, run, records } => {
            let best = cmd_select(&RunConfig::load(&config)?, run.as_deref(), records.as_deref())?;
            println!("{best}");
        }
        Command::Gradcheck { seed, points } => {
            let results = run_gradcheck(seed, points)?;
            let mut failed = Vec::new();
            for r in &results {
                println!(
                    "{} {:<18} points={} max_rel_error={:.3e} tolerance={TOLERANCE:e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.points,
                    r.max_rel_error
                );
                if !r.passed {
                    failed.push(r.name);
                }
            }
            if !failed.is_empty() {
                return Err(LabError::GradcheckFailed(failed.join(", ")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
