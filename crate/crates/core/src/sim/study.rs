//! Monte-Carlo studies over the simulation scenarios.
//!
//! Replication `r` of a study with master seed `s` draws its dataset seed and
//! its bootstrap seed from ChaCha8 keyed by `s` on stream `r`, so results do
//! not depend on how replications are scheduled across threads.

use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ald::QuantileLevel;
use crate::em::{fit, SolverConfig};
use crate::error::{QremError, Result};
use crate::inference::{
    bahadur_covariance, bootstrap_covariance, BootstrapConfig, CovarianceMethod, ResampleUnit,
};
use crate::mixed::{fit_mixed, mixed_bootstrap_covariance, MixedConfig};
use crate::sim::{generate, ScenarioSpec};
use crate::stats::{mean, normal_quantile, sd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudyKind {
    /// Bias, sampling SE and coverage with Bahadur-KDE standard errors
    /// (cluster bootstrap for the mixed scenario).
    Estimate,
    /// Spread of the Bahadur-KDE and bootstrap standard errors across replications.
    SeStability,
    /// As `Estimate`, but with bootstrap standard errors throughout.
    Coverage,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudyOptions {
    pub bootstrap_replicates: usize,
    pub solver: SolverConfig,
}

impl Default for StudyOptions {
    fn default() -> Self {
        Self {
            bootstrap_replicates: 200,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeSummary {
    pub method: CovarianceMethod,
    /// Mean of the estimated standard errors.
    pub mean: f64,
    /// Sampling standard deviation of the estimated standard errors.
    pub sd: f64,
    pub coverage_90: Option<f64>,
    pub coverage_95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    pub truth: Option<f64>,
    pub mean_estimate: f64,
    pub bias: Option<f64>,
    /// Standard deviation of the estimates across replications.
    pub empirical_se: f64,
    pub standard_errors: Vec<SeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub q: QuantileLevel,
    /// Replications whose fit or standard error failed; they are left out of
    /// the summaries.
    pub failed: usize,
    pub coefficients: Vec<CoefficientSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub scenario: u32,
    pub kind: StudyKind,
    pub n: usize,
    pub replications: usize,
    pub master_seed: u64,
    pub options: StudyOptions,
    pub quantiles: Vec<QuantileSummary>,
    /// Wall-clock time; kept out of the serialized form so reports stay
    /// byte-identical across runs.
    #[serde(skip)]
    pub runtime: Duration,
}

impl ExperimentReport {
    pub fn summary(&self, q: f64, coefficient: usize) -> Option<&CoefficientSummary> {
        self.quantiles
            .iter()
            .find(|s| s.q.value() == q)
            .and_then(|s| s.coefficients.get(coefficient))
    }
}

/// Seeds for replication `r`: (dataset, bootstrap).
pub fn replication_seeds(master_seed: u64, r: usize) -> (u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(r as u64);
    (rng.next_u64(), rng.next_u64())
}

/// One replication at one quantile: estimates and, per method, standard errors.
struct Draw {
    beta: Vec<f64>,
    ses: Vec<Vec<f64>>,
}

fn methods(kind: StudyKind, mixed: bool) -> Vec<CovarianceMethod> {
    match (kind, mixed) {
        (StudyKind::SeStability, _) => vec![CovarianceMethod::BahadurKde, CovarianceMethod::Bootstrap],
        (StudyKind::Estimate, false) => vec![CovarianceMethod::BahadurKde],
        _ => vec![CovarianceMethod::Bootstrap],
    }
}

fn one_draw(
    spec: &ScenarioSpec,
    q: QuantileLevel,
    seeds: (u64, u64),
    methods: &[CovarianceMethod],
    opts: &StudyOptions,
) -> Result<Draw> {
    let data = generate(&spec.clone().with_seed(seeds.0))?;
    let mixed = spec.is_mixed();
    let boot = BootstrapConfig {
        replicates: opts.bootstrap_replicates,
        seed: seeds.1,
        unit: if mixed { ResampleUnit::Clusters } else { ResampleUnit::Rows },
    };
    if mixed {
        let cfg = MixedConfig {
            solver: opts.solver,
            ..Default::default()
        };
        let f = fit_mixed(&data, q, &cfg)?;
        let cov = mixed_bootstrap_covariance(&data, q, &cfg, &boot)?;
        return Ok(Draw {
            beta: f.fit.beta,
            ses: vec![cov.standard_errors()],
        });
    }
    let f = fit(&data, q, &opts.solver)?;
    let ses = methods
        .iter()
        .map(|m| match m {
            CovarianceMethod::BahadurKde => bahadur_covariance(&data, &f).map(|c| c.standard_errors()),
            CovarianceMethod::Bootstrap => bootstrap_covariance(&data, q, &boot, &opts.solver).map(|c| c.standard_errors()),
        })
        .collect::<Result<_>>()?;
    Ok(Draw { beta: f.beta, ses })
}

fn coverage(draws: &[&Draw], method: usize, coef: usize, truth: Option<f64>, level: f64) -> Option<f64> {
    let t = truth?;
    let z = normal_quantile(0.5 + level / 2.0);
    let hits = draws
        .iter()
        .filter(|d| (d.beta[coef] - t).abs() <= z * d.ses[method][coef])
        .count();
    Some(hits as f64 / draws.len() as f64)
}

fn summarize(
    spec: &ScenarioSpec,
    q: QuantileLevel,
    outcomes: &[&Result<Draw>],
    methods: &[CovarianceMethod],
    names: &[String],
) -> Result<QuantileSummary> {
    let ok: Vec<&Draw> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
    if ok.len() < 2 {
        let first = outcomes.iter().find_map(|o| o.as_ref().err());
        return Err(QremError::DegenerateSample(format!(
            "only {} of {} replications succeeded at q = {}{}",
            ok.len(),
            outcomes.len(),
            q.value(),
            first.map(|e| format!(" (first error: {e})")).unwrap_or_default()
        )));
    }
    let truth = spec.true_coefficients(q);
    let coefficients = names
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let est: Vec<f64> = ok.iter().map(|d| d.beta[c]).collect();
            let t = truth.as_ref().map(|t| t[c]);
            let m = mean(&est);
            CoefficientSummary {
                name: name.clone(),
                truth: t,
                mean_estimate: m,
                bias: t.map(|t| m - t),
                empirical_se: sd(&est),
                standard_errors: methods
                    .iter()
                    .enumerate()
                    .map(|(k, &method)| {
                        let se: Vec<f64> = ok.iter().map(|d| d.ses[k][c]).collect();
                        SeSummary {
                            method,
                            mean: mean(&se),
                            sd: sd(&se),
                            coverage_90: coverage(&ok, k, c, t, 0.90),
                            coverage_95: coverage(&ok, k, c, t, 0.95),
                        }
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(QuantileSummary {
        q,
        failed: outcomes.len() - ok.len(),
        coefficients,
    })
}

/// Runs a study of the given kind.
pub fn run_study(
    spec: &ScenarioSpec,
    kind: StudyKind,
    qs: &[QuantileLevel],
    replications: usize,
    master_seed: u64,
    opts: &StudyOptions,
) -> Result<ExperimentReport> {
    if replications < 2 {
        return Err(QremError::InvalidConfig(format!(
            "a study needs at least 2 replications (got {replications})"
        )));
    }
    if qs.is_empty() {
        return Err(QremError::InvalidConfig("no quantile levels requested".into()));
    }
    if kind == StudyKind::SeStability && spec.is_mixed() {
        return Err(QremError::InvalidConfig(
            "the standard-error stability study compares Bahadur and bootstrap errors, which needs a fixed-effects scenario".into(),
        ));
    }
    opts.solver.validate()?;
    let started = Instant::now();
    let methods = methods(kind, spec.is_mixed());
    let names = generate(spec)?.column_names();

    // outcomes[r][k]: replication r at quantile k.
    let outcomes: Vec<Vec<Result<Draw>>> = (0..replications)
        .into_par_iter()
        .map(|r| {
            let seeds = replication_seeds(master_seed, r);
            qs.iter().map(|&q| one_draw(spec, q, seeds, &methods, opts)).collect()
        })
        .collect();

    let mut quantiles = Vec::with_capacity(qs.len());
    for (k, &q) in qs.iter().enumerate() {
        let column: Vec<&Result<Draw>> = outcomes.iter().map(|row| &row[k]).collect();
        quantiles.push(summarize(spec, q, &column, &methods, &names)?);
    }
    Ok(ExperimentReport {
        scenario: spec.id,
        kind,
        n: spec.n,
        replications,
        master_seed,
        options: *opts,
        quantiles,
        runtime: started.elapsed(),
    })
}

/// Bias, empirical SE, mean estimated SE and 90%/95% coverage per quantile.
pub fn run_estimation_study(
    spec: &ScenarioSpec,
    qs: &[QuantileLevel],
    replications: usize,
    master_seed: u64,
) -> Result<ExperimentReport> {
    run_study(spec, StudyKind::Estimate, qs, replications, master_seed, &StudyOptions::default())
}

/// Per-quantile sampling spread of the Bahadur-KDE and bootstrap standard errors.
pub fn run_se_stability_study(
    spec: &ScenarioSpec,
    qs: &[QuantileLevel],
    replications: usize,
    master_seed: u64,
) -> Result<ExperimentReport> {
    run_study(spec, StudyKind::SeStability, qs, replications, master_seed, &StudyOptions::default())
}
