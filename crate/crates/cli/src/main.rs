//! `excess-cusum`: fit, calibrate, run, simulate and study subcommands.

mod commands;
mod config;
mod manifest;
mod rolling;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use excess_cusum::Error;
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "excess-cusum", version, about = "CUSUM monitoring of excess mortality in registry survival data")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for Monte Carlo replications (output does not depend on it).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit the in-control excess hazard model to baseline data.
    Fit(FitArgs),
    /// Calibrate a chart threshold by simulation.
    Calibrate(CalibrateArgs),
    /// Run CUSUM charts on monitoring data.
    Run(RunArgs),
    /// Simulate monitoring data.
    Simulate(SimulateArgs),
    /// Run a built-in simulation study.
    Study(StudyArgs),
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct FitArgs {
    /// Patient CSV with baseline data.
    #[arg(long)]
    pub patients: Option<PathBuf>,
    /// Life-table CSV (defaults to the built-in synthetic table).
    #[arg(long)]
    pub life_table: Option<PathBuf>,
    /// Covariate schema TOML (defaults to the built-in schema).
    #[arg(long)]
    pub schema: Option<PathBuf>,
    /// Baseline band edges, e.g. `0,1,2,3,4,5,10`.
    #[arg(long)]
    pub bands: Option<String>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Write the model and exit 0 even if the optimiser did not converge.
    #[arg(long)]
    #[serde(default)]
    pub allow_unconverged: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct CalibrateArgs {
    /// Model TOML (defaults to the built-in six-band model).
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub life_table: Option<PathBuf>,
    /// Out-of-control alternative, e.g. `proportional:0.8`, `additive:0.002`, `accelerated:1.1`.
    #[arg(long)]
    pub alternative: Option<String>,
    /// Target in-control probability of a signal by the horizon.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Number of in-control replications.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Patient arrivals per year.
    #[arg(long)]
    pub lambda_a: Option<f64>,
    /// Monitoring horizon in years.
    #[arg(long)]
    pub t_m: Option<f64>,
    #[arg(long)]
    pub censor_rate: Option<f64>,
    /// Calendar year at monitoring start.
    #[arg(long)]
    pub origin: Option<f64>,
    /// continuous, at_event, periodic_arrival or periodic_at_event (optionally `:period`).
    #[arg(long)]
    pub scheme: Option<String>,
    /// Follow-up cap in years.
    #[arg(long)]
    pub t_d: Option<f64>,
    /// Resample covariates from this patient CSV instead of the parametric distribution.
    #[arg(long)]
    pub bootstrap: Option<PathBuf>,
    /// Also write the per-replication maxima.
    #[arg(long)]
    #[serde(default)]
    pub histogram: bool,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(skip)]
    pub covariate_source: Option<commands::CovariateSourceConfig>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct RunArgs {
    /// Monitoring patient CSV (for `--rolling`, the whole registry extract).
    #[arg(long)]
    pub patients: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub life_table: Option<PathBuf>,
    /// One or more alternatives; one chart each.
    #[arg(long, num_args = 1..)]
    pub alternative: Option<Vec<String>>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Calibration report whose threshold to use.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub scheme: Option<String>,
    #[arg(long)]
    pub t_d: Option<f64>,
    /// Fit on each window and monitor the next, across the calendar range.
    #[arg(long)]
    #[serde(default)]
    pub rolling: bool,
    /// First calendar year of the rolling range.
    #[arg(long)]
    pub from: Option<f64>,
    /// End of the rolling range.
    #[arg(long)]
    pub to: Option<f64>,
    /// Window length in years.
    #[arg(long)]
    pub window: Option<f64>,
    /// Rolling mode without `--threshold`: calibrate each window at this level.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bands: Option<String>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub life_table: Option<PathBuf>,
    /// in_control, all_from:<eta> or new_from:<eta>.
    #[arg(long)]
    pub scenario: Option<String>,
    #[arg(long)]
    pub alternative: Option<String>,
    #[arg(long)]
    pub lambda_a: Option<f64>,
    #[arg(long)]
    pub t_m: Option<f64>,
    #[arg(long)]
    pub censor_rate: Option<f64>,
    #[arg(long)]
    pub origin: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub bootstrap: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(skip)]
    pub covariate_source: Option<commands::CovariateSourceConfig>,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
pub struct StudyArgs {
    /// table2, table3, table4, acc-table, fig3 or fig5.
    pub name: Option<String>,
    /// Multiplies every replication count.
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// For fig3/fig5: `true` or `bootstrap` covariates in calibration.
    #[arg(long)]
    pub covariates: Option<String>,
    #[arg(long)]
    pub life_table: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Range(_) => 2,
        Error::Parse { .. } | Error::Validation(_) | Error::Io(_) => 3,
        Error::Numeric(_) | Error::ModelInconsistency(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    if let Some(n) = cli.workers {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let result = config::ConfigFile::load_optional(cli.config.as_deref()).and_then(|file| {
        let file = file.as_ref();
        match &cli.command {
            Command::Fit(a) => commands::fit(a, file),
            Command::Calibrate(a) => commands::calibrate(a, file),
            Command::Run(a) if a.rolling || file.is_some_and(|f| f.flag("run", "rolling")) => {
                rolling::run_rolling(a, file)
            }
            Command::Run(a) => commands::run(a, file),
            Command::Simulate(a) => commands::simulate(a, file),
            Command::Study(a) => commands::study(a, file),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
