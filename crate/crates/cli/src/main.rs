//! `manipure`: data generation, training, attacks, purification and evaluation.

mod artifacts;
mod commands;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use manipure_core::config::RunConfig;
use manipure_core::experiment::Defense;
use manipure_core::{Error, Result};

use commands::AttackMethod;

#[derive(Debug, Parser)]
#[command(
    name = "manipure",
    version,
    about = "Frequency-domain diffusion purification on a synthetic image task"
)]
struct Cli {
    /// JSON run config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Prints the resolved config as JSON and exits.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generates the synthetic dataset and the oracle denoiser statistics.
    GenData,
    /// Trains the classifier on the generated training split.
    TrainClf,
    /// Attacks the first `eval.n_samples` test images.
    Attack {
        #[arg(long, value_enum, default_value = "pgd")]
        method: AttackMethod,
        /// Purifier attacked through by `bpda`.
        #[arg(long, default_value = "manipure", value_parser = parse_defense)]
        defense: Defense,
    },
    /// Purifies one image and logs the per-step spectral trace.
    Purify {
        #[arg(long)]
        input: PathBuf,
        /// Clean reference; enables the injected-noise heatmap and KL.
        #[arg(long)]
        clean: Option<PathBuf>,
        /// Image to take from batch files.
        #[arg(long)]
        index: Option<usize>,
        #[arg(long, default_value = "manipure", value_parser = parse_defense)]
        defense: Defense,
    },
    /// Evaluates every defense on clean, PGD and PGD+EOT inputs.
    Eval,
    /// Radial band profiles of clean images, adversarial images and their difference.
    AnalyzeSpectrum {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        adv: PathBuf,
    },
    /// Compares adaptive and uniform injected noise with adversarial perturbations.
    CompareNoise {
        #[arg(long)]
        clean: PathBuf,
        #[arg(long)]
        adv: PathBuf,
    },
}

fn parse_defense(s: &str) -> std::result::Result<Defense, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    if cli.print_config {
        // A closed pipe (e.g. `| head`) is not an error worth reporting.
        let _ = writeln!(std::io::stdout(), "{}", cfg.to_json_pretty());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given; see `manipure --help`".into()));
    };
    match command {
        Command::GenData => commands::gen_data(&cfg),
        Command::TrainClf => commands::train_clf(&cfg),
        Command::Attack { method, defense } => commands::attack(&cfg, method, defense),
        Command::Purify {
            input,
            clean,
            index,
            defense,
        } => commands::purify(&cfg, &input, clean.as_deref(), index, defense),
        Command::Eval => commands::eval(&cfg),
        Command::AnalyzeSpectrum { clean, adv } => commands::analyze_spectrum(&cfg, &clean, &adv),
        Command::CompareNoise { clean, adv } => commands::compare_noise(&cfg, &clean, &adv),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::MissingPrerequisite { .. } => 3,
        Error::Numerical(_) | Error::Asymmetry { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
