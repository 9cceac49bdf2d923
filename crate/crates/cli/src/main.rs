mod commands;
mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use run::Failure;

#[derive(Parser)]
#[command(name = "vpc", version, about = "Variational predictive coding experiments at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
pub struct Common {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, `key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed for every random choice of the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created fresh. Relative paths resolve under
    /// $VPC_ARTIFACT_ROOT when it is set.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Log-mel features for every .wav file in a directory.
    Features {
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Sample a labeled synthetic HMM corpus.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Fit a k-means codebook on corpus frames.
    Kmeans {
        #[arg(long)]
        corpus: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train an encoder with one of the objectives.
    Pretrain {
        #[arg(long)]
        corpus: PathBuf,
        /// hubert_obj, masked_vpc, future_vpc or masked_nce.
        #[arg(long)]
        objective: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a Masked-VPC student on a frozen teacher's hidden states.
    SecondIter {
        #[arg(long)]
        corpus: PathBuf,
        /// Teacher checkpoint directory.
        #[arg(long)]
        teacher: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Linear probes on the frozen layers of a checkpoint.
    Probe {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare finished runs by their final smoothed -ELBO.
    Compare {
        /// Run directories or run.json files.
        #[arg(long = "run", required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient check of every objective on toy models.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// -ELBO against the exact likelihood, on a checkpoint or on random toy models.
    Boundcheck {
        #[arg(long, requires = "corpus")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Features { input, common } => commands::features(&input, &common),
        Command::Synth { common } => commands::synth(&common),
        Command::Kmeans { corpus, common } => commands::kmeans(&corpus, &common),
        Command::Pretrain {
            corpus,
            objective,
            common,
        } => commands::pretrain(&corpus, objective.as_deref(), &common),
        Command::SecondIter { corpus, teacher, common } => commands::second_iter(&corpus, &teacher, &common),
        Command::Probe {
            corpus,
            checkpoint,
            common,
        } => commands::probe(&corpus, &checkpoint, &common),
        Command::Compare { runs, common } => commands::compare(&runs, &common),
        Command::Gradcheck { common } => commands::gradcheck(&common),
        Command::Boundcheck {
            checkpoint,
            corpus,
            common,
        } => commands::boundcheck(checkpoint.as_deref(), corpus.as_deref(), &common),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return Failure::config(e.to_string().trim_end()).report(),
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => f.report(),
    }
}
