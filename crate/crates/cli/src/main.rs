//! `routelens`: batch driver for localization, geometry and circuit analyses.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data or model error,
//! 4 convergence warning under `--strict`.

mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{ExperimentConfig, Settings};
use routelens_core::{parallel, Error};

#[derive(Parser)]
#[command(name = "routelens", version, about = "Trace persuasion-induced answer flips to attention circuits")]
struct Cli {
    /// TOML file with any of the flag names as keys; flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(flatten)]
    settings: Settings,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Restoration sweep over every head and MLP.
    Localize,
    /// Decision subspace and per-example vertex jumps.
    Geometry,
    /// Projected OV map and option alignment.
    Ov,
    /// Rank-1 QK routing feature with cross-validation.
    Qk,
    /// Add the routing feature at option tokens over an alpha grid.
    Steer,
    /// Layer-window denoising and noising.
    Window,
    /// Composition of shallower heads with the routing feature.
    Compose,
    /// Build and inspect prompt pairs.
    Prompts,
    /// Write the planted toy model and its corpus.
    Plant,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Self::Localize => "localize",
            Self::Geometry => "geometry",
            Self::Ov => "ov",
            Self::Qk => "qk",
            Self::Steer => "steer",
            Self::Window => "window",
            Self::Compose => "compose",
            Self::Prompts => "prompts",
            Self::Plant => "plant",
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidInput(_) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let settings = match &cli.config {
        Some(path) => Settings::read(path).map(|file| file.merged(&cli.settings)),
        None => Ok(cli.settings.clone()),
    };
    let cfg = match settings.and_then(|s| ExperimentConfig::resolve(cli.command.name(), s)) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let run = || match cli.command {
        Command::Localize => commands::localize(&cfg),
        Command::Geometry => commands::geometry(&cfg),
        Command::Ov => commands::ov(&cfg),
        Command::Qk => commands::qk(&cfg),
        Command::Steer => commands::steer(&cfg),
        Command::Window => commands::window(&cfg),
        Command::Compose => commands::compose(&cfg),
        Command::Prompts => commands::prompts(&cfg),
        Command::Plant => commands::plant(&cfg),
    };
    match parallel::with_jobs(cfg.jobs, run) {
        Ok(outcome) => {
            for f in &outcome.files {
                println!("{}", f.display());
            }
            for w in &outcome.convergence {
                eprintln!("warning: {w}");
            }
            if cfg.strict && !outcome.convergence.is_empty() {
                ExitCode::from(4)
            } else {
                ExitCode::SUCCESS
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
