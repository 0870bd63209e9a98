//! `heatlearn`: runs experiment sweeps and writes CSV results.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{parse_seed_arg, Algo, ExperimentConfig, Preset, SeedList};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialization error: {0}")]
    Serialize(#[from] toml::ser::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Library(#[from] heatlearn::Error),
}

#[derive(Parser, Debug)]
#[command(name = "heatlearn", version, about = "Online learning of district heating controllers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the sweep described by a config file.
    Run {
        config: PathBuf,
        /// Seeds to run, as `0..10` or `1,4,7` (overrides the file).
        #[arg(long, value_parser = parse_seed_arg)]
        seeds: Option<SeedList>,
        /// Output directory (overrides the file; default `results`).
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Worker threads; 0 uses every core.
        #[arg(long, default_value_t = 0)]
        workers: usize,
        /// Algorithms to run (repeatable; overrides the file).
        #[arg(long = "algo", value_enum)]
        algos: Vec<Algo>,
    },
    /// Print a preset's full config.
    Preset {
        #[arg(value_enum)]
        name: Preset,
        /// Emit the config in file format (the only output mode).
        #[arg(long)]
        emit_config: bool,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Preset { name, emit_config: _ } => {
            print!("{}", ExperimentConfig::preset(name).to_toml()?);
            Ok(())
        }
        Command::Run {
            config,
            seeds,
            out_dir,
            workers,
            algos,
        } => {
            let text = std::fs::read_to_string(&config)?;
            let mut cfg = ExperimentConfig::from_toml(&text)?;
            if let Some(SeedList(s)) = seeds {
                cfg.seeds = s;
            }
            if !algos.is_empty() {
                cfg.algorithms = algos;
            }
            if let Some(d) = out_dir {
                cfg.out_dir = Some(d);
            }
            let dir = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("results"));
            cfg.out_dir = Some(dir.clone());
            cfg.validate()?;
            let outcomes = runner::execute(&cfg, workers)?;
            runner::write_outputs(&cfg, &outcomes, &dir)?;
            let failed = outcomes.iter().filter(|o| o.traj.as_ref().is_none_or(|t| t.is_failed())).count();
            eprintln!(
                "{} runs written to {} ({failed} failed)",
                outcomes.len(),
                dir.display()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
