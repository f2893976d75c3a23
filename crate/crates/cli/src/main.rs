//! `fdnopt` command-line front end.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fdnopt::presets::Preset;

use crate::config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Io(_) => 4,
        }
    }
}

impl From<fdnopt::Error> for CliError {
    fn from(e: fdnopt::Error) -> Self {
        use fdnopt::Error as E;
        match &e {
            _ if e.is_numeric() => CliError::Numeric(e.to_string()),
            E::Io { .. } | E::Wav { .. } | E::Serde(_) => CliError::Io(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "fdnopt",
    version,
    about = "Differentiable FDN attenuation analysis and optimisation"
)]
struct Cli {
    /// Maximum number of concurrent work items (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// paper-scale, desk-scale or ci.
    #[arg(long)]
    preset: Option<String>,
    /// Root seed of all randomness.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct NoiseFlags {
    /// none, target-only or noise-aware.
    #[arg(long)]
    noise: Option<String>,
    /// SNR of the added noise in dB.
    #[arg(long, requires = "noise")]
    snr_db: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render an FDN impulse response with its filter design and decay curves.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        t60_dc: Option<f64>,
        #[arg(long)]
        crossover_hz: Option<f64>,
        #[arg(long)]
        snr_db: Option<f64>,
    },
    /// Loss profiles along T60 and crossover sweeps.
    Landscape {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        noise: NoiseFlags,
        #[arg(long)]
        steps: Option<usize>,
        /// Drop the first 87.5 ms of both responses.
        #[arg(long)]
        truncate: bool,
    },
    /// Loss minima under random frequency-independent parameters.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        noise: NoiseFlags,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        instances: Option<usize>,
    },
    /// Gradient-descent study over the four noise/trainability tests.
    Study {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        max_iterations: Option<usize>,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let preset = common
        .preset
        .as_deref()
        .map(|s| s.parse::<Preset>())
        .transpose()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let mut cfg = RunConfig::resolve(common.config.as_deref(), preset)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn apply_noise(flags: &NoiseFlags, current: &mut fdnopt::landscape::NoiseCondition) -> Result<(), CliError> {
    if let Some(kind) = &flags.noise {
        let snr = flags.snr_db.or(current.snr_db()).unwrap_or(70.0);
        *current = config::noise_condition(kind, snr)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Render {
            common,
            t60_dc,
            crossover_hz,
            snr_db,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(v) = t60_dc {
                cfg.render.attenuation.t60_dc = v;
            }
            if let Some(v) = crossover_hz {
                cfg.render.attenuation.crossover_hz = v;
            }
            if snr_db.is_some() {
                cfg.render.snr_db = snr_db;
            }
            commands::render(&cfg)
        }
        Command::Landscape {
            common,
            noise,
            steps,
            truncate,
        } => {
            let mut cfg = resolve(&common)?;
            apply_noise(&noise, &mut cfg.landscape.noise)?;
            if let Some(s) = steps {
                cfg.landscape.steps = s;
            }
            if truncate {
                cfg.landscape.t_mix = config::DEFAULT_MIXING_TIME_S;
            }
            commands::landscape(&cfg)
        }
        Command::Perturb {
            common,
            noise,
            steps,
            instances,
        } => {
            let mut cfg = resolve(&common)?;
            apply_noise(&noise, &mut cfg.perturb.noise)?;
            if let Some(s) = steps {
                cfg.perturb.steps = s;
            }
            if let Some(k) = instances {
                cfg.perturb.instances = k;
            }
            commands::perturb(&cfg)
        }
        Command::Study {
            common,
            trials,
            max_iterations,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(j) = trials {
                cfg.study.trials = j;
            }
            if let Some(n) = max_iterations {
                cfg.study.optimizer.max_iterations = n;
            }
            commands::study(&cfg)
        }
        Command::Gradcheck { common } => commands::gradcheck(&resolve(&common)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fdnopt: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
