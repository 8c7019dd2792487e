use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use tfm_core::checks::{run_check, Suite};
use tfm_core::error::ErrorKind;
use tfm_core::experiment::{run_eval, run_plot, run_sample, run_train, Metric, SampleRequest};
use tfm_core::sampling::TimeGrid;
use tfm_core::{Result, TfmError};

const EXIT_VALIDATION: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;
const EXIT_IO: u8 = 4;

#[derive(Parser)]
#[command(name = "tfm", version, about = "Few-step transition flow models on 2-D point clouds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; locked for the duration of the run.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw samples and trajectories from a checkpoint.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        schedule: Schedule,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long = "cfg-scale")]
        cfg_scale: Option<f64>,
        /// Class id for every sample (conditional models).
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint against its experiment's target.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// sliced_w2 or identity_residual
        #[arg(long, default_value = "sliced_w2")]
        metric: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5")]
        steps: Vec<usize>,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a verification suite: JVP, GRAD, THEOREM2, IDENTITY or SAMPLER.
    Check {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Side-by-side trajectory panels, one per step count.
    Plot {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,5")]
        steps: Vec<usize>,
        #[arg(long, default_value_t = 500)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// SVG file to write.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
#[group(multiple = false)]
struct Schedule {
    /// Uniform step count.
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated knots from 0 to 1, e.g. `0,0.5,1`.
    #[arg(long)]
    grid: Option<String>,
}

impl Schedule {
    fn grid(&self) -> Result<Option<TimeGrid>> {
        match (self.steps, &self.grid) {
            (Some(k), _) => TimeGrid::uniform(k).map(Some),
            (None, Some(g)) => TimeGrid::parse(g).map(Some),
            (None, None) => Ok(None),
        }
    }
}

fn print_json(value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| TfmError::Contract(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out } => print_json(&run_train(&config, &out)?)?,
        Command::Sample { ckpt, schedule, n, cfg_scale, class, seed, out } => {
            let req = SampleRequest { grid: schedule.grid()?, n, cfg_scale, class, seed };
            let res = run_sample(&ckpt, &req, &out)?;
            print_json(&json!({
                "samples": res.samples,
                "trajectory": res.trajectory,
                "panel": res.panel,
                "n": res.n,
                "grid": res.grid.knots(),
            }))?;
        }
        Command::Eval { ckpt, metric, steps, n, seed, out } => {
            let metric: Metric = metric.parse()?;
            print_json(&run_eval(&ckpt, metric, &steps, n, seed, out.as_deref())?)?;
        }
        Command::Check { suite, seed } => {
            let suite: Suite = suite.parse()?;
            let report = run_check(suite, seed)?;
            print_json(&report)?;
            if !report.passed {
                return Ok(ExitCode::from(EXIT_NUMERICAL));
            }
        }
        Command::Plot { ckpt, steps, n, seed, out } => {
            run_plot(&ckpt, &steps, n, seed, &out)?;
            print_json(&json!({ "figure": out }))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Validation => EXIT_VALIDATION,
                ErrorKind::Numerical => EXIT_NUMERICAL,
                ErrorKind::Io => EXIT_IO,
            })
        }
    }
}
