use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ris_sim::harness::{emit, load_scenario, run_partial, Format, Module, ScenarioSpec};
use ris_sim::Error;

/// Runs RIS sensing, radar, localization and SLAM experiments.
#[derive(Parser)]
#[command(name = "ris-sim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Posture recognition and occupancy reconstruction.
    Sense(RunArgs),
    /// Multi-target detection.
    Radar(RunArgs),
    /// RSS fingerprint localization.
    Localize(RunArgs),
    /// Particle-filter SLAM.
    Slam(RunArgs),
    /// Every module listed in the scenario (all modules without one).
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file; built-in defaults when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// First root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Number of consecutive seeds starting at --seed (default 0).
    #[arg(long)]
    seeds: Option<u64>,
    /// Cycle count for the cycle-based modules.
    #[arg(long)]
    cycles: Option<usize>,
    /// Output directory; records go to stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
    format: String,
    /// Run a single scheme.
    #[arg(long)]
    scheme: Option<String>,
}

enum Failure {
    Validation(Error),
    Runtime(Error),
}

fn build_spec(module: Option<Module>, args: &RunArgs) -> Result<ScenarioSpec, Error> {
    let mut spec = match &args.scenario {
        Some(path) => load_scenario(path)?,
        None => match module {
            Some(m) => ScenarioSpec::new(m.name(), vec![m]),
            None => ScenarioSpec::new("sweep", Module::ALL.to_vec()),
        },
    };
    if let Some(m) = module {
        spec.modules = vec![m];
    }
    match (args.seed, args.seeds) {
        (_, Some(0)) => {
            return Err(Error::Scenario {
                key: "seeds".into(),
                message: "--seeds must be positive".into(),
            })
        }
        (Some(s), Some(n)) => spec.seeds = (s..s.saturating_add(n)).collect(),
        (Some(s), None) => spec.seeds = vec![s],
        (None, Some(n)) => spec.seeds = (0..n).collect(),
        (None, None) => {}
    }
    if let Some(c) = args.cycles {
        if module == Some(Module::Sense) {
            return Err(Error::Scenario {
                key: "cycles".into(),
                message: "sensing runs have no cycles".into(),
            });
        }
        spec.set_cycles(c);
    }
    if let Some(s) = &args.scheme {
        match module {
            Some(m) => spec.set_scheme(m, s)?,
            None => {
                return Err(Error::Scenario {
                    key: "scheme".into(),
                    message: "--scheme needs a single-module command".into(),
                })
            }
        }
    }
    spec.validate()?;
    Ok(spec)
}

fn execute(module: Option<Module>, args: &RunArgs) -> Result<(), Failure> {
    let spec = build_spec(module, args).map_err(Failure::Validation)?;
    let format: Format = args.format.parse().map_err(Failure::Validation)?;
    let (records, failure) = run_partial(&spec);
    let written = match &args.out {
        Some(dir) => fs::create_dir_all(dir).map_err(Error::from).and_then(|_| {
            let path = dir.join(format!("{}.{}", spec.id, format.extension()));
            let file = io::BufWriter::new(fs::File::create(path)?);
            emit(&records, format, file)
        }),
        None => {
            let mut out = io::stdout().lock();
            emit(&records, format, &mut out).and_then(|_| out.flush().map_err(Error::from))
        }
    };
    match (failure, written) {
        (Some(e), _) | (None, Err(e)) => Err(Failure::Runtime(e)),
        (None, Ok(())) => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let (module, args) = match &cli.command {
        Command::Sense(a) => (Some(Module::Sense), a),
        Command::Radar(a) => (Some(Module::Radar), a),
        Command::Localize(a) => (Some(Module::Localize), a),
        Command::Slam(a) => (Some(Module::Slam), a),
        Command::Sweep(a) => (None, a),
    };
    match execute(module, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
