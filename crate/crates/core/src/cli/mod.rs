//! Command-line front end: `fit`, `diagnose` and `simulate`.
//!
//! Exit codes: 0 on success, 1 for usage and input errors, 2 for numerical
//! failures (singular designs, non-convergence, unstable bootstrap, ...).

mod fit;
mod ingest;
mod output;
mod simulate;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::ald::QuantileLevel;
use crate::em::SolverConfig;
use crate::error::QremError;
use crate::sim::scenario::DEFAULT_N;
use crate::sim::{ScenarioSpec, StudyKind};

pub use fit::{diagnose_command, fit_command, rebuild_fit, run_fit, DiagnoseRequest, CI_LEVEL};
pub use ingest::{ingest_csv, FitRequest, Ingested, InferenceMethod};
pub use output::{
    fmt_f64, to_json, write_atomic, FitBlock, FitProvenance, MixedBlock, ResultDocument, SimulationDocument,
    SimulationProvenance,
};
pub use simulate::{simulate, SimulateRequest};

fn parse_quantile(s: &str) -> Result<QuantileLevel, String> {
    let v: f64 = s.trim().parse().map_err(|e| format!("`{s}` is not a number: {e}"))?;
    QuantileLevel::new(v).map_err(|e| e.to_string())
}

fn parse_study(s: &str) -> Result<StudyKind, String> {
    match s {
        "estimate" => Ok(StudyKind::Estimate),
        "se-stability" => Ok(StudyKind::SeStability),
        "coverage" => Ok(StudyKind::Coverage),
        _ => Err(format!("`{s}` is not one of estimate, se-stability, coverage")),
    }
}

#[derive(Debug, Parser)]
#[command(name = "qrem", version, about = "Quantile regression by EM")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct SolverArgs {
    /// Convergence threshold on the change in conditional log-likelihood.
    #[arg(long, default_value_t = SolverConfig::default().epsilon)]
    pub epsilon: f64,
    #[arg(long, default_value_t = SolverConfig::default().max_iter)]
    pub max_iter: usize,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            ..Default::default()
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit quantile regressions to a CSV file and write a JSON result.
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        response: String,
        /// Continuous predictor columns.
        #[arg(long, value_delimiter = ',')]
        predictors: Vec<String>,
        /// Categorical predictor columns (reference coding, lexicographically first level as baseline).
        #[arg(long, value_delimiter = ',')]
        categorical: Vec<String>,
        /// Column holding random-intercept cluster labels.
        #[arg(long)]
        cluster: Option<String>,
        #[arg(long, value_delimiter = ',', value_parser = parse_quantile, default_value = "0.5")]
        quantiles: Vec<QuantileLevel>,
        /// Defaults to bahadur, or bootstrap when --cluster is given.
        #[arg(long, value_enum)]
        inference: Option<InferenceMethod>,
        #[arg(long, default_value_t = 1000)]
        bootstrap_reps: usize,
        #[arg(long, env = "QREM_SEED", default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        solver: SolverArgs,
        /// Output JSON path; without it the document goes to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        no_intercept: bool,
    },
    /// Residual diagnostics for a saved fit.
    Diagnose {
        /// Result JSON written by `fit`.
        #[arg(long)]
        fit: PathBuf,
        /// Data file; defaults to the path recorded in the fit.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continuous predictor for the QQ comparison.
        #[arg(long)]
        predictor: Option<String>,
        /// Write the flat-QQ grid (rows xi, columns q) to this CSV.
        #[arg(long)]
        flat_qq: Option<PathBuf>,
        /// Number of evaluation points for the flat-QQ grid.
        #[arg(long, default_value_t = 20)]
        levels: usize,
        /// Write the QQ pairs to this CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a Monte-Carlo study on one of the 25 simulation scenarios.
    Simulate {
        #[arg(long)]
        scenario: u32,
        /// Rows (subjects for scenario 25).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 200)]
        replications: usize,
        #[arg(long, value_delimiter = ',', value_parser = parse_quantile,
              default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
        quantiles: Vec<QuantileLevel>,
        #[arg(long, env = "QREM_SEED", default_value_t = 0)]
        seed: u64,
        /// estimate, se-stability or coverage.
        #[arg(long, value_parser = parse_study, default_value = "estimate")]
        study: StudyKind,
        #[arg(long, default_value_t = 200)]
        bootstrap_reps: usize,
        #[command(flatten)]
        solver: SolverArgs,
        /// Output path; `.csv` selects CSV, anything else JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> crate::error::Result<()> {
    match cli.command {
        Command::Fit {
            data,
            response,
            predictors,
            categorical,
            cluster,
            quantiles,
            inference,
            bootstrap_reps,
            seed,
            solver,
            out,
            no_intercept,
        } => {
            let inference = inference.unwrap_or(if cluster.is_some() {
                InferenceMethod::Bootstrap
            } else {
                InferenceMethod::Bahadur
            });
            let request = FitRequest {
                data,
                response,
                predictors,
                categorical,
                cluster,
                intercept: !no_intercept,
                quantiles,
                solver: solver.config(),
                inference,
                bootstrap_replicates: bootstrap_reps,
                seed,
            };
            fit_command(&request, out.as_deref())
        }
        Command::Diagnose {
            fit,
            data,
            predictor,
            flat_qq,
            levels,
            out,
        } => diagnose_command(&DiagnoseRequest {
            fit,
            data,
            predictor,
            levels,
            flat_qq,
            out,
        }),
        Command::Simulate {
            scenario,
            n,
            replications,
            quantiles,
            seed,
            study,
            bootstrap_reps,
            solver,
            out,
        } => {
            let spec = ScenarioSpec::new(scenario, seed)?;
            let request = SimulateRequest {
                scenario,
                n: n.unwrap_or(if spec.is_mixed() { spec.n } else { DEFAULT_N }),
                replications,
                quantiles,
                study,
                bootstrap_replicates: bootstrap_reps,
                solver: solver.config(),
                seed,
            };
            simulate(&request, out.as_ref())
        }
    }
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &QremError) -> i32 {
    if e.is_usage() {
        1
    } else {
        2
    }
}
