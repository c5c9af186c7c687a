use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mopinn::experiment::{qq_from_ensembles, run, ExperimentConfig, ExperimentId, NoiseCase};
use mopinn::posterior::{write_qq_csv, PosteriorField};
use mopinn::{Error, Result};

/// Multi-output PINN experiments with ensemble uncertainty estimates.
#[derive(Parser)]
#[command(name = "mopinn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a named experiment and write its artifacts.
    Run(RunArgs),
    /// QQ pairs between two ensemble CSV files at their shared locations.
    Qq {
        field_a: PathBuf,
        field_b: PathBuf,
        /// Restrict to these 1D locations (repeatable).
        #[arg(long = "at", allow_negative_numbers = true)]
        at: Vec<f64>,
        /// Write here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// linear1d_forward, nonlinear1d_forward, allen_cahn_2d, inverse1d,
    /// inverse2d, fem_compare or prior_augmented.
    experiment: Option<String>,
    /// TOML file with any experiment settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// case1 (σ = 0.01) or case2 (σ = 0.1).
    #[arg(long)]
    noise: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for measurements and replica noise (defaults to --seed).
    #[arg(long)]
    data_seed: Option<u64>,
    /// Number of replicas M.
    #[arg(long)]
    outputs: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// FEM ensemble size (fem_compare).
    #[arg(long)]
    ensemble: Option<usize>,
    /// Prior statistics CSV (prior_augmented).
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
    /// Full-size 2D networks and training length.
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn config(&self) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(p) => ExperimentConfig::read_toml(p)?,
            None => ExperimentConfig::default(),
        };
        let flags = ExperimentConfig {
            experiment: self.experiment.as_deref().map(str::parse::<ExperimentId>).transpose()?,
            noise: self.noise.as_deref().map(str::parse::<NoiseCase>).transpose()?,
            seed: self.seed,
            data_seed: self.data_seed,
            outputs: self.outputs,
            epochs: self.epochs,
            ensemble: self.ensemble,
            prior_file: self.prior.clone(),
            deterministic: self.deterministic.then_some(true),
            paper_scale: self.paper_scale.then_some(true),
            out: self.out.clone(),
            ..Default::default()
        };
        Ok(file.overlay(flags))
    }
}

fn read_ensemble(path: &PathBuf) -> Result<PosteriorField> {
    let f = File::open(path).map_err(|e| Error::Config(format!("cannot open {}: {e}", path.display())))?;
    PosteriorField::read_ensemble_csv(BufReader::new(f))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.config()?.resolve()?;
            eprintln!("running {} into {}", cfg.experiment, cfg.out.display());
            let manifest = run(&cfg)?;
            for (k, v) in &manifest.metrics {
                println!("{k} = {v}");
            }
            eprintln!("done in {:.1} s", manifest.wall_clock_seconds);
            Ok(())
        }
        Command::Qq {
            field_a,
            field_b,
            at,
            out,
        } => {
            let rows = qq_from_ensembles(&read_ensemble(&field_a)?, &read_ensemble(&field_b)?, &at)?;
            match out {
                Some(p) => {
                    let mut w = BufWriter::new(File::create(p)?);
                    write_qq_csv(&mut w, &rows)?;
                    w.flush()?;
                }
                None => write_qq_csv(io::stdout().lock(), &rows)?,
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
