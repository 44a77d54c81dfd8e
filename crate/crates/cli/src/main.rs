use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use enkf_mc::config::{parse_config, FilterKind, Overrides};
use enkf_mc::filters::Formulation;

mod commands;
mod output;

#[derive(Parser, Debug)]
#[command(name = "enkfmc", version, about = "Ensemble Kalman filter experiments on Lorenz-96")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one twin experiment (decomposed when subdomains > 1).
    Run(Common),
    /// Estimate precision factors from an ensemble and dump them.
    Estimate(Common),
    /// Rerun the experiment for each truncated-SVD threshold.
    Sweep(Common),
    /// Run every filter in `compare.filters` with shared seeds.
    Compare(Common),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FilterArg {
    EnkfMc,
    Letkf,
    EnkfSchur,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum FormulationArg {
    Incremental,
    Primal,
    Dual,
}

#[derive(Args, Debug)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for the data-parallel loops.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    zeta: Option<usize>,
    #[arg(long)]
    nens: Option<usize>,
    #[arg(long = "sigma-r")]
    sigma_r: Option<f64>,
    #[arg(long, value_enum)]
    filter: Option<FilterArg>,
    #[arg(long, value_enum)]
    formulation: Option<FormulationArg>,
    #[arg(long)]
    subdomains: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            zeta: self.zeta,
            nens: self.nens,
            sigma_r: self.sigma_r,
            filter: self.filter.map(|f| match f {
                FilterArg::EnkfMc => FilterKind::EnkfMc,
                FilterArg::Letkf => FilterKind::Letkf,
                FilterArg::EnkfSchur => FilterKind::EnkfSchur,
            }),
            formulation: self.formulation.map(|f| match f {
                FormulationArg::Incremental => Formulation::Incremental,
                FormulationArg::Primal => Formulation::Primal,
                FormulationArg::Dual => Formulation::Dual,
            }),
            subdomains: self.subdomains,
            out: self.out.as_ref().map(|p| p.display().to_string()),
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let (common, cmd): (&Common, fn(&enkf_mc::config::ExperimentConfig) -> Result<output::Artifacts>) =
        match &cli.command {
            Command::Run(c) => (c, commands::run),
            Command::Estimate(c) => (c, commands::estimate),
            Command::Sweep(c) => (c, commands::sweep),
            Command::Compare(c) => (c, commands::compare),
        };
    let cfg = parse_config(&common.config, &common.overrides())
        .with_context(|| format!("loading {}", common.config.display()))?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = common.workers {
        anyhow::ensure!(n >= 1, "--workers must be at least 1");
        builder = builder.num_threads(n);
    }
    let pool = builder.build().context("starting worker pool")?;
    let artifacts = pool.install(|| cmd(&cfg))?;
    let dir = PathBuf::from(&cfg.output.dir);
    for path in artifacts.commit(&dir)? {
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
