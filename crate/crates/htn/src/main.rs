use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use htn::config::{ExperimentConfig, Task};
use htn::experiments::{run_autoencode, run_bench_contract, run_classify, run_count_params, run_regress, RunError};
use htn::fetch::fetch;
use htn::ConfigError;

#[derive(Parser)]
#[command(name = "htn", version, about = "Hybrid tensor-network experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default runs/<task>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `threads` from the config.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate a digit classifier.
    Classify(RunArgs),
    /// Train a tree-network autoencoder.
    Autoencode(RunArgs),
    /// Sweep model sizes on scalar digit regression.
    Regress(RunArgs),
    /// Time the tree-layer contraction over bond dimensions and thread counts.
    BenchContract(RunArgs),
    /// Print the per-layer parameter table.
    CountParams(RunArgs),
    /// Copy IDX files from a local mirror, verifying known digests.
    Fetch {
        /// mnist or fashion
        #[arg(long, default_value = "mnist")]
        dataset: String,
        /// Mirror directory (default: $HTN_DATA_MIRROR).
        #[arg(long)]
        mirror: Option<PathBuf>,
        /// Destination directory (default data/<dataset>).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

fn run(task: Task, args: RunArgs) -> Result<(), RunError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(t) = cfg.task {
        if t != task {
            return Err(ConfigError::Invalid(format!("config is for `{t}`, not `{task}`")).into());
        }
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = args.threads {
        cfg.threads = threads;
    }
    let out = args.out.unwrap_or_else(|| PathBuf::from("runs").join(task.name()));
    match task {
        Task::Classify => run_classify(&cfg, &out).map(drop),
        Task::Autoencode => run_autoencode(&cfg, &out).map(drop),
        Task::Regress => run_regress(&cfg, &out).map(drop),
        Task::BenchContract => run_bench_contract(&cfg, &out).map(drop),
        Task::CountParams => run_count_params(&cfg).map(drop),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (task, args) = match cli.command {
        Command::Classify(a) => (Task::Classify, a),
        Command::Autoencode(a) => (Task::Autoencode, a),
        Command::Regress(a) => (Task::Regress, a),
        Command::BenchContract(a) => (Task::BenchContract, a),
        Command::CountParams(a) => (Task::CountParams, a),
        Command::Fetch { dataset, mirror, dest } => {
            let dest = dest.unwrap_or_else(|| PathBuf::from("data").join(&dataset));
            return match fetch(&dataset, mirror.as_deref(), &dest) {
                Ok(files) => {
                    for f in files {
                        let status = if f.verified { "verified" } else { "no reference digest" };
                        println!("{}  {}  {status}", f.sha256, f.file);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(task, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
