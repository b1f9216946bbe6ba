use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use iuq_core::domain::ParameterVector;
use iuq_core::pipeline::{export_results, run_pipeline, write_synthetic_bundle, PipelineConfig, Stage};
use iuq_core::synthbench::SynthConfig;

/// Surrogate-based Bayesian calibration pipeline.
#[derive(Parser, Debug)]
#[command(name = "iuq", version)]
struct Cli {
    /// Pipeline config file (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread cap. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset, truth sidecar, partition and config.
    SynthGen(SynthArgs),
    /// One-at-a-time parameter screening.
    Screen,
    /// Screening, surrogates and Sobol indices.
    Sobol,
    /// Everything up to calibration in each mode.
    Calibrate,
    /// Everything up to validation on the held-out cases.
    Validate(ValidateArgs),
    /// Full pipeline followed by export.
    Run(ValidateArgs),
    /// Plot-ready CSVs from a completed run directory.
    Export,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 74)]
    n_cases: usize,
    #[arg(long, default_value_t = 20)]
    n_calibration: usize,
    #[arg(long, default_value_t = 0.04)]
    sigma_exp: f64,
    /// Generate data without the injected discrepancy.
    #[arg(long)]
    no_discrepancy: bool,
    /// Comma-separated true parameter values.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    theta_true: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    /// Propagate through the GP_CC mean instead of the forward model.
    #[arg(long)]
    via_surrogate: bool,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let path = cli.config.as_ref().context("--config is required for this subcommand")?;
    let mut cfg = PipelineConfig::from_file(path)?;
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<bool> {
    let stage = match &cli.command {
        Command::SynthGen(args) => {
            let out = cli.out.as_ref().context("synth-gen needs --out")?;
            let mut synth = SynthConfig {
                n_cases: args.n_cases,
                sigma_exp: args.sigma_exp,
                discrepancy_on: !args.no_discrepancy,
                ..SynthConfig::default()
            };
            if let Some(seed) = cli.seed {
                synth.seed = seed;
            }
            if let Some(t) = &args.theta_true {
                synth.theta_true = ParameterVector::from_slice(t).context("--theta-true needs four values")?;
            }
            let conf = write_synthetic_bundle(out, &synth, args.n_calibration)?;
            println!("{}", conf.display());
            return Ok(true);
        }
        Command::Export => {
            let dir = match (&cli.out, &cli.config) {
                (Some(d), _) => d.clone(),
                (None, Some(_)) => load_config(cli)?.out,
                (None, None) => bail!("export needs --out or --config"),
            };
            export_results(&dir)?;
            return Ok(true);
        }
        Command::Screen => (Stage::Screen, false),
        Command::Sobol => (Stage::Sobol, false),
        Command::Calibrate => (Stage::Calibrate, false),
        Command::Validate(a) => (Stage::Validate, a.via_surrogate),
        Command::Run(a) => (Stage::Export, a.via_surrogate),
    };
    let mut cfg = load_config(cli)?;
    cfg.via_surrogate = stage.1;
    let report = run_pipeline(&cfg, stage.0)?;
    for m in &report.modes {
        let status = if m.converged { "converged" } else { "NOT converged" };
        match &m.validation {
            Some(v) => println!("{}: {status}, validation rmse {:.5} (prior {:.5})", m.mode, v.rmse_posterior, v.rmse_prior),
            None => println!("{}: {status}", m.mode),
        }
    }
    Ok(report.converged())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::FAILURE;
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: MCMC diagnostics failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
