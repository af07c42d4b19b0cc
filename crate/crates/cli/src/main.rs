use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pixplan_cli::stages;

/// Learn grounded planning models from image pairs and run them end to
/// end: sample data, train, export PDDL, plan, validate, report. Stages
/// share one experiment directory whose manifest pins the configuration.
#[derive(Parser)]
#[command(name = "pixplan", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment directory holding the manifest and artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override a config key for this invocation, e.g. --set train.epochs=50.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample image transitions and freeze the experiment manifest.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Experiment configuration file; defaults fill every missing key.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Shorthand for --set seed=N, applied last.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the configured model on the sampled transitions.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Extract a grounded domain from the checkpoint and write PDDL.
    ExportPddl {
        #[command(flatten)]
        common: Common,
    },
    /// Sample goal-directed test instances with known optimal lengths.
    MakeInstances {
        #[command(flatten)]
        common: Common,
    },
    /// Encode instances into problems and run the planner on each.
    Plan {
        #[command(flatten)]
        common: Common,
        /// Worker threads across instances.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Decode plans back to images and judge them against the simulator.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Worker threads across instances.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluation metrics and plots for the trained checkpoint.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData { common, config, seed } => {
            stages::generate_data(&common.out, config.as_deref(), &common.set, seed)
        }
        Command::Train { common } => stages::train_model(&common.out, &common.set),
        Command::ExportPddl { common } => stages::export_pddl(&common.out, &common.set),
        Command::MakeInstances { common } => stages::make_instances(&common.out, &common.set),
        Command::Plan { common, jobs } => stages::plan(&common.out, &common.set, jobs),
        Command::Validate { common, jobs } => stages::validate(&common.out, &common.set, jobs),
        Command::Report { common } => stages::report(&common.out, &common.set),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
