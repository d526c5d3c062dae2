use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nadex::commands::{self, EvalRequest};
use nadex::config::{RunConfig, SEED_ENV};
use nadex::run::Split;
use nadex::{CliError, Result};

#[derive(Parser)]
#[command(name = "nadex", version, about = "Negative-aware diffusion for temporal knowledge graph extrapolation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best checkpoint by validation MRR.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// `key=value` override; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint with time-aware filtered metrics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Restrict to queries whose triple never occurs in training.
        #[arg(long)]
        unseen_only: bool,
        #[arg(long)]
        seed: Option<u64>,
        /// Noise draws averaged per query.
        #[arg(long)]
        repeats: Option<usize>,
        /// Run the full reverse chain instead of one denoising pass.
        #[arg(long)]
        iterative: bool,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Also write a tab-separated report here.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Rank objects for one query `(subject, relation, ?, time)`.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        subject: i64,
        #[arg(long, allow_hyphen_values = true)]
        relation: i64,
        /// Timestamp ordinal (raw time divided by the granularity).
        #[arg(long)]
        time: u32,
        #[arg(long, default_value_t = 10)]
        top_k: usize,
    },
    /// Print the noise schedule as tab-separated rows.
    InspectSchedule {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
}

fn load_config(path: Option<PathBuf>, set: &[String]) -> Result<RunConfig> {
    RunConfig::load(path.as_deref(), set, std::env::var(SEED_ENV).ok())
}

fn init_threads(threads: usize) {
    if threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Train { config, set } => {
            let config = load_config(config, &set)?;
            init_threads(config.threads);
            let outcome = commands::train(config, &mut stdout)?;
            if let Some(e) = outcome.best_epoch {
                eprintln!("best valid MRR {} at epoch {e}", outcome.best_valid_mrr);
            }
        }
        Command::Eval {
            checkpoint,
            split,
            unseen_only,
            seed,
            repeats,
            iterative,
            data_dir,
            tsv,
        } => {
            let req = EvalRequest {
                split: Some(split.parse::<Split>()?),
                unseen_only,
                seed: seed.or(std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok())),
                repeats,
                iterative,
                data_dir,
                tsv,
            };
            commands::eval(&checkpoint, &req, &mut stdout)?;
        }
        Command::Predict {
            checkpoint,
            subject,
            relation,
            time,
            top_k,
        } => {
            commands::predict(&checkpoint, subject, relation, time, top_k, &mut stdout)?;
        }
        Command::InspectSchedule { config, set } => {
            let config = load_config(config, &set)?;
            commands::inspect_schedule(&config, &mut stdout)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report_line());
            ExitCode::from(exit_status(&e))
        }
    }
}

fn exit_status(e: &CliError) -> u8 {
    e.exit_code().clamp(1, 255) as u8
}
