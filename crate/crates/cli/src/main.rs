mod commands;
mod config;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use socs::category::LabelSpace;
use socs::error::{Error, Result};

use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "socs", version, about = "Category-level pose experiments on synthetic data")]
struct Cli {
    /// Experiment config (TOML). Defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides the label space (socs or nocs).
    #[arg(long = "label-space", global = true)]
    label_space: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset directory.
    SynthGen,
    /// Fit per-instance warps and write the category bundle.
    SocsBuild {
        /// Dataset directory (default: <out>/dataset).
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train a model; writes checkpoints and metrics.csv.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use ground-truth labels instead of network predictions.
        #[arg(long)]
        oracle: bool,
    },
    /// Robust pose and size fit from a correspondence JSON or CSV file.
    Fitpose {
        #[arg(long)]
        input: PathBuf,
    },
    /// Run the ablation grid and write ablation.csv.
    Ablate {
        /// Run only this cell (row index of the full table).
        #[arg(long)]
        cell: Option<usize>,
    },
    /// Print the resolved config as TOML.
    Config,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(l) = &cli.label_space {
        cfg.label_space = l.parse::<LabelSpace>()?;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<String> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::SynthGen => commands::synth_gen(&cfg),
        Command::SocsBuild { dataset } => commands::socs_build(&cfg, dataset.as_deref()),
        Command::Train => commands::train_cmd(&cfg),
        Command::Eval { checkpoint, oracle } => commands::eval_cmd(&cfg, checkpoint.as_deref(), *oracle),
        Command::Fitpose { input } => commands::fitpose_cmd(&cfg, input),
        Command::Ablate { cell } => commands::ablate_cmd(&cfg, *cell),
        Command::Config => cfg.to_toml(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(s) => {
            print!("{s}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::NonFiniteLoss { step, samples } = &e {
                eprintln!("diverged at step {step}; samples {samples:?}");
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
