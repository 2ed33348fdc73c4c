//! `mialab`: generate data, train targets, simulate federated training, run
//! attacks and whole experiments from one TOML configuration file.
//!
//! Exit status: 0 on success, 1 for configuration or input problems, 2 when
//! a computation fails numerically.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mialab::MiaError;

#[derive(Parser)]
#[command(name = "mialab", version, about = "White-box membership inference laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Seed for this run; `experiment` runs only this seed when given.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory receiving all outputs.
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PlacementArg {
    None,
    GlobalPassive,
    GlobalActive,
    GlobalActiveIsolate,
    LocalPassive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Negatives {
    /// Fresh samples from the data distribution.
    Nonmembers,
    /// The fine-tuning set.
    Finetune,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the synthetic dataset into `<out-dir>/data`.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the target (and its fine-tuned version) into `<out-dir>/target`.
    TrainTarget {
        #[command(flatten)]
        common: Common,
        /// Dataset written by `gen-data`; regenerated from the seed if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Simulate federated training and write the round log to `<out-dir>/rounds`.
    FlRun {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "global-passive")]
        placement: PlacementArg,
        /// Federated dataset written by `gen-data`; regenerated if absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Attack saved snapshots and write metrics to `<out-dir>/attack`.
    Attack {
        #[command(flatten)]
        common: Common,
        /// Target snapshot files (JSON); repeat to observe several versions.
        #[arg(long = "model")]
        models: Vec<PathBuf>,
        /// Round log written by `fl-run`, instead of `--model`.
        #[arg(long, conflicts_with = "models")]
        round_log: Option<PathBuf>,
        /// Observed rounds of the round log; defaults to the configured window.
        #[arg(long, value_delimiter = ',')]
        rounds: Vec<usize>,
        /// Participant whose uploads are observed; defaults to the victim.
        #[arg(long)]
        participant: Option<usize>,
        /// Dataset written by `gen-data`; regenerated from the seed if absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "nonmembers")]
        negatives: Negatives,
        /// Cluster gradient norms instead of training an attack model.
        #[arg(long)]
        unsupervised: bool,
    },
    /// Run the configured scenario over all seeds; writes `report.csv` and `report.json`.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
    /// Re-emit the CSV of a saved report and print its aggregates.
    Report {
        /// `report.json` written by `experiment`.
        #[arg(long)]
        input: PathBuf,
        /// Keep only the rows of this seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
}

fn exit_code(err: &MiaError) -> u8 {
    match err {
        MiaError::Numeric(_) | MiaError::Degenerate(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.exit_code() == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    let result = match cli.command {
        Command::GenData { common } => commands::gen_data(&common),
        Command::TrainTarget { common, data } => commands::train_target(&common, data.as_deref()),
        Command::FlRun { common, placement, data } => commands::fl_run(&common, placement, data.as_deref()),
        Command::Attack { common, models, round_log, rounds, participant, data, negatives, unsupervised } => {
            commands::attack(&common, &commands::AttackArgs {
                models,
                round_log,
                rounds,
                participant,
                data,
                negatives,
                unsupervised,
            })
        }
        Command::Experiment { common } => commands::experiment(&common),
        Command::Report { input, seed, out_dir } => commands::report(&input, seed, &out_dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
