//! Experiment runner: seeded training runs, parameter sweeps, landscape
//! scans, and record comparison.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for numeric
//! failures mid-run (in which case every record up to the failure has
//! already been flushed).

mod compare;
mod config;
mod experiments;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use flatmatch_core::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExperimentKind {
    Supervised,
    SslBaseline,
    Flatmatch,
    FlatmatchE,
    FlatmatchFixlabel,
    Landscape,
    Sweep,
}

impl ExperimentKind {
    fn parse(name: &str) -> Result<Self, Error> {
        Ok(match name {
            "supervised" => ExperimentKind::Supervised,
            "ssl_baseline" => ExperimentKind::SslBaseline,
            "flatmatch" => ExperimentKind::Flatmatch,
            "flatmatch_e" => ExperimentKind::FlatmatchE,
            "flatmatch_fixlabel" => ExperimentKind::FlatmatchFixlabel,
            "landscape" => ExperimentKind::Landscape,
            "sweep" => ExperimentKind::Sweep,
            other => {
                return Err(Error::Config(format!(
                    "unknown experiment `{other}` (expected supervised|ssl_baseline|flatmatch|flatmatch_e|flatmatch_fixlabel|landscape|sweep)"
                )))
            }
        })
    }

    fn trainer_name(&self) -> &'static str {
        match self {
            ExperimentKind::Supervised => "supervised",
            ExperimentKind::SslBaseline => "ssl_baseline",
            ExperimentKind::Flatmatch => "flatmatch",
            ExperimentKind::FlatmatchE => "flatmatch_e",
            ExperimentKind::FlatmatchFixlabel => "flatmatch_fixlabel",
            ExperimentKind::Landscape => "landscape",
            ExperimentKind::Sweep => "sweep",
        }
    }
}

#[derive(Parser)]
#[command(name = "flatmatch", version, about = "Sharpness-aware semi-supervised training lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write records, checkpoints, and a manifest.
    Run {
        /// supervised | ssl_baseline | flatmatch | flatmatch_e |
        /// flatmatch_fixlabel | landscape | sweep
        #[arg(long)]
        exp: String,
        /// TOML config file; omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Master seed (overrides the config file).
        #[arg(long)]
        seed: Option<u64>,
        /// Fan out this many consecutive seeds into per-seed directories.
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        /// Dotted-path override, e.g. `--set flatmatch.rho=0.05`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
        /// Output directory.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Sweep target, e.g. `flatmatch.rho` (sweep experiment only).
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated sweep values (sweep experiment only).
        #[arg(long)]
        values: Option<String>,
    },
    /// Summarize final test error (mean +- std) across record CSVs.
    Compare {
        /// Paths to record.csv files.
        paths: Vec<PathBuf>,
        /// Also write the summary as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Run { exp, config, seed, seeds, sets, out, param, values } => {
            let exp = ExperimentKind::parse(&exp)?;
            let cfg = config::resolve_config(config.as_deref(), exp, &sets, seed)?;
            experiments::run(experiments::RunArgs {
                exp,
                cfg,
                out,
                seeds,
                param: param.as_deref(),
                values: values.as_deref(),
            })
        }
        Command::Compare { paths, out } => {
            let table = compare::compare(&paths, out.as_deref())?;
            print!("{table}");
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    let code = match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Parse(_) => 2,
                Error::Numeric(_) => 3,
                _ => 1,
            }
        }
    };
    std::process::exit(code);
}
