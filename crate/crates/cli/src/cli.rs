//! Command-line front-end.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{load, Experiment, Overrides};
use crate::error::{CliError, EXIT_CONFIG, EXIT_PASS, EXIT_STATISTICAL};
use crate::experiments::run_experiment;
use crate::replay::{replay, ReplayArgs};

const EXIT_HELP: &str = "\
Exit status:
  0  every applicable test passed
  1  file could not be read or written
  2  config, model or CSV error (including the step-size guard)
  3  numerical guard tripped (state left the manifold, degenerate intensity)
  4  a statistical test failed
  5  other internal error";

#[derive(Debug, Parser)]
#[command(name = "qndsim", version, about = "Simulate and verify QND measurement trajectories")]
#[command(after_help = EXIT_HELP, args_conflicts_with_subcommands = true)]
pub struct Cli {
    /// Run file with a [run] section and the model.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// simulate, conditioned, filter, hitting or verify_all.
    #[arg(long)]
    pub experiment: Option<Experiment>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep every K-th grid point in stored series.
    #[arg(long)]
    pub stride: Option<usize>,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Re-run the filter on a stored trajectory CSV.
    Replay {
        #[arg(long)]
        trajectory: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated initial estimate; uniform by default.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        q_tilde0: Option<Vec<f64>>,
        #[arg(long, default_value = "qndsim-replay")]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    if let Some(Command::Replay {
        trajectory,
        model,
        q_tilde0,
        out,
        stride,
    }) = cli.command
    {
        let s = replay(&ReplayArgs {
            trajectory,
            model,
            q_tilde0,
            out: out.clone(),
            stride,
        })?;
        if let Some(w) = &s.warning {
            eprintln!("warning: {w}");
        }
        println!(
            "replayed {} steps, final trace distance {:e}, wrote {}",
            s.steps,
            s.final_trace_distance,
            out.display()
        );
        return Ok(EXIT_PASS);
    }
    let Some(path) = cli.config else {
        return Err(CliError::config("--config is required"));
    };
    let overrides = Overrides {
        experiment: cli.experiment,
        seed: cli.seed,
        out: cli.out,
        stride: cli.stride,
    };
    let (cfg, model) = load(&path, &overrides)?;
    let report = run_experiment(&cfg, &model)?;
    for t in &report.tests {
        let status = serde_json::to_value(t.status)?;
        println!("{:<24} {}", t.name, status.as_str().unwrap_or("?"));
    }
    println!("artifacts in {}", cfg.out.display());
    Ok(if report.passed { EXIT_PASS } else { EXIT_STATISTICAL })
}

/// Runs the command line on a pool of `--workers` threads and returns the exit status.
pub fn run(cli: Cli) -> i32 {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cli.workers.filter(|&w| w > 0) {
        pool = pool.num_threads(w);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_CONFIG;
        }
    };
    match pool.install(|| execute(cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
