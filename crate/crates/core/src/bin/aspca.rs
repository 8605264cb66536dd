use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use aspca::experiment::{
    cmd_generate, cmd_gradcheck, cmd_run, cmd_spectrum, parse_methods, Case, ExperimentConfig,
};
use aspca::Error;

/// Adaptive PCA parametrization experiments.
#[derive(Parser)]
#[command(name = "aspca", version)]
struct Cli {
    /// JSON experiment configuration; defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Case override: clean or noised.
    #[arg(long, global = true)]
    case: Option<String>,
    /// Comma-separated methods: full,pca,rotation,swap,extension.
    #[arg(long, global = true)]
    strategies: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write prior dataset, truth and observations.
    Generate,
    /// Write the eigenvalue spectrum of the prior dataset.
    Spectrum {
        /// Dataset file; defaults to the case directory's dataset.json.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Run the configured methods on generated data.
    Run,
    /// Compare adjoint gradients with finite differences.
    Gradcheck {
        /// Generate data from the evaluation model (all gradients vanish).
        #[arg(long)]
        matched: bool,
    },
}

const EXIT_HARNESS: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_CHECK_FAILED: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::InvalidArgument(_) | Error::Parse { .. } => EXIT_VALIDATION,
        _ => EXIT_HARNESS,
    }
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(case) = &cli.case {
        cfg.case = case.parse::<Case>()?;
    }
    if let Some(list) = &cli.strategies {
        cfg.strategies = parse_methods(list)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<u8, Error> {
    let cfg = resolve(cli)?;
    match &cli.command {
        Command::Generate => {
            let files = cmd_generate(&cfg)?;
            println!(
                "wrote {}",
                files.dataset.parent().unwrap_or(&cfg.output_dir).display()
            );
        }
        Command::Spectrum { dataset } => {
            let dir = cfg.case_dir();
            let path = dataset.clone().unwrap_or_else(|| dir.join("dataset.json"));
            let out = dir.join("spectrum.csv");
            let rows = cmd_spectrum(&path, &out)?;
            println!("wrote {} eigenvalues to {}", rows.len(), out.display());
        }
        Command::Run => {
            for s in cmd_run(&cfg)? {
                println!(
                    "{:<10} status={:<16} objective={:.6e} misfit={:.6e} rmse={:.4e} fwd={} adj={}",
                    s.method.name(),
                    s.status,
                    s.final_objective,
                    s.final_misfit,
                    s.truth_rmse,
                    s.n_forward,
                    s.n_adjoint
                );
            }
        }
        Command::Gradcheck { matched } => {
            let report = cmd_gradcheck(&cfg, *matched)?;
            println!(
                "dS/dm   rel={:.3e} abs={:.3e}\ndS/dxi  rel={:.3e} abs={:.3e}\n{}",
                report.model_error,
                report.model_abs_error,
                report.latent_error,
                report.latent_abs_error,
                if report.passed { "PASS" } else { "FAIL" }
            );
            if !report.passed {
                return Ok(EXIT_CHECK_FAILED);
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err))
        }
    }
}
