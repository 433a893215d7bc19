use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fracinv::config::ExperimentConfig;
use fracinv::io::read_vector_csv;
use fracinv::pipeline::{Mode, Pipeline};
use fracinv::{Error, Result};

/// Bayesian inversion for time-fractional diffusion.
#[derive(Debug, Parser)]
#[command(name = "fracinv", version)]
struct Cli {
    /// Experiment configuration (JSON); built-in desk defaults when absent.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override a named seed (data, snapshots, training, chains).
    #[arg(long = "seed-override", global = true, value_name = "NAME=INT")]
    seed_override: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate noisy observations from the true field.
    Synth,
    /// Run the inversion stages on existing data.
    Invert {
        /// Recompute from this stage on, loading earlier ones from disk.
        #[arg(long = "stage-from", value_name = "NAME")]
        stage_from: Option<String>,
        /// Build the surrogate and sampler on the Gaussian prior instead.
        #[arg(long = "prior-based")]
        prior_based: bool,
    },
    /// Recompute summaries from stored chains.
    Stats {
        #[arg(long = "prior-based")]
        prior_based: bool,
    },
    /// Single fine-grid solve.
    Forward {
        /// KL coefficients (one per line); the configured truth when absent.
        #[arg(long, value_name = "PATH")]
        theta: Option<PathBuf>,
    },
    /// Held-out surrogate error against the training model.
    SurrogateTest {
        #[arg(long = "prior-based")]
        prior_based: bool,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_seed_overrides(&cli.seed_override)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let mut p = Pipeline::new(cfg)?;
    match cli.command {
        Command::Synth => {
            let s = p.synth()?;
            println!("wrote {} observations to {}", s.data.len(), p.out.join("synth").display());
        }
        Command::Invert { stage_from, prior_based } => {
            let s = p.invert(Mode::from_flag(prior_based), stage_from.as_deref())?;
            println!(
                "{} mode: acceptance {:.2}%, coverage {:.0}%, field error {:.4} (prior mean {:.4})",
                s.mode.dir(),
                100.0 * s.stats.mean_acceptance,
                100.0 * s.stats.coverage,
                s.stats.posterior_field_error,
                s.stats.prior_field_error
            );
        }
        Command::Stats { prior_based } => {
            let s = p.stats(Mode::from_flag(prior_based))?;
            println!("{} retained samples, acceptance {:.2}%", s.n_retained, 100.0 * s.mean_acceptance);
        }
        Command::Forward { theta } => {
            let z = theta
                .map(|path| read_vector_csv(&path).map_err(|e| Error::Config(format!("{}: {e}", path.display()))))
                .transpose()?;
            let d = p.forward(z)?;
            println!("wrote {} observations to {}", d.len(), p.out.join("forward").display());
        }
        Command::SurrogateTest { prior_based } => {
            let r = p.surrogate_test(Mode::from_flag(prior_based))?;
            println!("relative RMS {:.4e} over {} points (max {:.4e})", r.relative_rms, r.n_test, r.max_relative_error);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
