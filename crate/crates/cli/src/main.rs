use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use robustfl_cli::output::OutputSet;

/// Federated channel-estimation simulator with robust aggregation.
#[derive(Debug, Parser)]
#[command(name = "robustfl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Output directory (for `plot`: the SVG file).
    #[arg(long)]
    out: PathBuf,
    /// Overrides the master seed (for `sweep`: replaces the seed axis).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to the number of CPUs.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv.
    Run {
        /// Experiment config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Run every cell of a sweep spec.
    Sweep {
        /// Sweep spec (TOML).
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render metrics CSV files as an SVG figure.
    Plot {
        /// Input CSV files.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Figure title.
        #[arg(long, default_value = "convergence")]
        title: String,
        #[command(flatten)]
        common: Common,
    },
    /// Run the two attack-free reference experiments.
    Baselines {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Run { common, .. }
            | Command::Sweep { common, .. }
            | Command::Plot { common, .. }
            | Command::Baselines { common, .. } => common,
        }
    }
}

fn execute(cmd: &Command, out: &mut OutputSet) -> Result<()> {
    let common = cmd.common();
    match cmd {
        Command::Run { config, .. } => {
            let cfg = robustfl_cli::resolve_config(config.as_deref(), common.seed)?;
            out.ensure_dir(&common.out)?;
            let path = robustfl_cli::cmd_run(&cfg, &common.out, out)?;
            println!("{}", path.display());
        }
        Command::Baselines { config, .. } => {
            let cfg = robustfl_cli::resolve_config(config.as_deref(), common.seed)?;
            out.ensure_dir(&common.out)?;
            for p in robustfl_cli::cmd_baselines(&cfg, &common.out, out)? {
                println!("{}", p.display());
            }
        }
        Command::Sweep { config, .. } => {
            out.ensure_dir(&common.out)?;
            for p in robustfl_cli::cmd_sweep(config, common.seed, &common.out, out)? {
                println!("{}", p.display());
            }
        }
        Command::Plot { inputs, title, .. } => {
            robustfl_cli::cmd_plot(inputs, title, &common.out, out)?;
            println!("{}", common.out.display());
        }
    }
    Ok(())
}

fn install_pool(jobs: Option<usize>) -> Result<()> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        builder = builder.num_threads(j.max(1));
    }
    builder.build_global().context("starting worker threads")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut out = OutputSet::new();
    let result = install_pool(cli.command.common().jobs).and_then(|()| execute(&cli.command, &mut out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            out.rollback();
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
