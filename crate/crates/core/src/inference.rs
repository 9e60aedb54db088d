//! Standard errors for quantile-regression coefficients.
//!
//! The asymptotic covariance is `q(1-q) / f(0)^2 (X'X)^-1`, where `f(0)` is
//! the residual density at zero, estimated with a Gaussian kernel. The
//! bootstrap resamples rows or whole clusters and refits.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ald::QuantileLevel;
use crate::data::Dataset;
use crate::em::{self, QuantileFit, SolverConfig};
use crate::error::{QremError, Result};
use crate::linalg::PivotedQr;
use crate::stats;

/// Smallest density estimate we report; anything lower is clamped and flagged.
pub const F0_FLOOR: f64 = 1e-12;
/// Fraction of failed bootstrap replicates above which the bootstrap is rejected.
pub const MAX_SKIPPED_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceMethod {
    BahadurKde,
    Bootstrap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceEstimate {
    /// Row-major `p x p` symmetric matrix.
    pub matrix: Vec<Vec<f64>>,
    pub method: CovarianceMethod,
    /// Residual density at zero (Bahadur only).
    pub f0: Option<f64>,
    /// Kernel bandwidth (Bahadur only).
    pub bandwidth: Option<f64>,
    /// True when `f0` hit [`F0_FLOOR`].
    pub f0_floored: bool,
    /// Bootstrap replicates that produced an estimate, and those skipped.
    pub replicates_used: Option<usize>,
    pub replicates_skipped: Option<usize>,
}

impl CovarianceEstimate {
    pub fn standard_errors(&self) -> Vec<f64> {
        (0..self.matrix.len()).map(|j| self.matrix[j][j].max(0.0).sqrt()).collect()
    }

    pub fn to_matrix(&self) -> DMatrix<f64> {
        let p = self.matrix.len();
        DMatrix::from_fn(p, p, |i, j| self.matrix[i][j])
    }
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdeEstimate {
    pub f0: f64,
    pub bandwidth: f64,
    pub floored: bool,
}

/// Silverman's rule `0.9 min(sd, IQR/1.34) n^(-1/5)`, falling back to the
/// standard deviation when the IQR is zero.
pub fn silverman_bandwidth(values: &[f64]) -> Result<f64> {
    let s = stats::sorted(values);
    let sd = stats::sd(values);
    let iqr = stats::quantile_sorted(&s, 0.75) - stats::quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if !(spread > 0.0 && spread.is_finite()) {
        return Err(QremError::DegenerateSample("all residuals are identical".into()));
    }
    Ok(0.9 * spread * (values.len() as f64).powf(-0.2))
}

/// Gaussian-kernel density estimate at zero.
pub fn kde_at_zero(residuals: &[f64], bandwidth: Option<f64>) -> Result<KdeEstimate> {
    let n = residuals.len();
    if n < 10 {
        return Err(QremError::DegenerateSample(format!(
            "kernel density estimate needs at least 10 residuals (got {n})"
        )));
    }
    if residuals.iter().all(|&u| u == residuals[0]) {
        return Err(QremError::DegenerateSample("all residuals are identical".into()));
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(QremError::InvalidConfig(format!("bandwidth must be positive (got {h})"))),
        None => silverman_bandwidth(residuals)?,
    };
    let raw = residuals.iter().map(|&u| stats::normal_density(u / h)).sum::<f64>() / (n as f64 * h);
    let floored = !(raw >= F0_FLOOR);
    Ok(KdeEstimate {
        f0: if floored { F0_FLOOR } else { raw },
        bandwidth: h,
        floored,
    })
}

/// Bahadur-representation covariance `q(1-q) / f0^2 (X'X)^-1`.
pub fn bahadur_covariance(data: &Dataset, fit: &QuantileFit) -> Result<CovarianceEstimate> {
    bahadur_covariance_with(data, fit, None)
}

pub fn bahadur_covariance_with(
    data: &Dataset,
    fit: &QuantileFit,
    bandwidth: Option<f64>,
) -> Result<CovarianceEstimate> {
    if !fit.converged {
        return Err(QremError::NotConverged {
            iterations: fit.iterations,
        });
    }
    let kde = kde_at_zero(&fit.residuals, bandwidth)?;
    let gram_inv = PivotedQr::from_matrix(data.x())
        .gram_inverse()
        .map_err(|e| data.singular(&e.columns))?;
    let scale = fit.q.spread() / (kde.f0 * kde.f0);
    let m = gram_inv * scale;
    let m = (&m + m.transpose()) * 0.5;
    Ok(CovarianceEstimate {
        matrix: rows_of(&m),
        method: CovarianceMethod::BahadurKde,
        f0: Some(kde.f0),
        bandwidth: Some(kde.bandwidth),
        f0_floored: kde.floored,
        replicates_used: None,
        replicates_skipped: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResampleUnit {
    Rows,
    Clusters,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub replicates: usize,
    pub seed: u64,
    pub unit: ResampleUnit,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 1000,
            seed: 0,
            unit: ResampleUnit::Rows,
        }
    }
}

impl BootstrapConfig {
    pub fn validate(&self, data: &Dataset) -> Result<()> {
        if self.replicates < 2 {
            return Err(QremError::InvalidConfig("bootstrap needs at least 2 replicates".into()));
        }
        if self.unit == ResampleUnit::Clusters && data.clusters().is_none() {
            return Err(QremError::InvalidConfig(
                "cluster bootstrap requested but the dataset has no cluster labels".into(),
            ));
        }
        Ok(())
    }

    /// Draw indices for replicate `r`: rows, or clusters, sampled with
    /// replacement. Each replicate has its own ChaCha8 stream, so the draws do
    /// not depend on how replicates are scheduled.
    pub fn draws(&self, data: &Dataset, r: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(r as u64);
        let units = match self.unit {
            ResampleUnit::Rows => data.n(),
            ResampleUnit::Clusters => data.clusters().map_or(0, |c| c.count()),
        };
        (0..units).map(|_| rng.random_range(0..units)).collect()
    }
}

/// Empirical covariance (denominator `B - 1`) of coefficient vectors.
pub fn empirical_covariance(estimates: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let b = estimates.len();
    let p = estimates.first().map_or(0, |e| e.len());
    let mean: Vec<f64> = (0..p).map(|j| estimates.iter().map(|e| e[j]).sum::<f64>() / b as f64).collect();
    let mut m = vec![vec![0.0; p]; p];
    for i in 0..p {
        for j in i..p {
            let s = estimates.iter().map(|e| (e[i] - mean[i]) * (e[j] - mean[j])).sum::<f64>() / (b as f64 - 1.0);
            m[i][j] = s;
            m[j][i] = s;
        }
    }
    m
}

/// Runs `estimator` on each resample described by `draws` (row or cluster
/// indices, per `unit`). Replicates whose design is singular are skipped; if
/// more than 10% are skipped the whole bootstrap fails.
pub fn bootstrap_from_draws<F>(
    data: &Dataset,
    unit: ResampleUnit,
    draws: &[Vec<usize>],
    estimator: F,
) -> Result<CovarianceEstimate>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync,
{
    let outcomes: Vec<Result<Option<Vec<f64>>>> = draws
        .par_iter()
        .map(|d| {
            let sample = match unit {
                ResampleUnit::Rows => data.resample_rows(d),
                ResampleUnit::Clusters => data.resample_clusters(d),
            };
            match sample.and_then(|s| estimator(&s)) {
                Ok(beta) => Ok(Some(beta)),
                Err(QremError::SingularDesign { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect();
    let mut estimates = Vec::with_capacity(draws.len());
    let mut skipped = 0;
    for o in outcomes {
        match o? {
            Some(b) => estimates.push(b),
            None => skipped += 1,
        }
    }
    let total = draws.len();
    if skipped as f64 > MAX_SKIPPED_FRACTION * total as f64 || estimates.len() < 2 {
        return Err(QremError::UnstableBootstrap {
            skipped,
            replicates: total,
        });
    }
    Ok(CovarianceEstimate {
        matrix: empirical_covariance(&estimates),
        method: CovarianceMethod::Bootstrap,
        f0: None,
        bandwidth: None,
        f0_floored: false,
        replicates_used: Some(estimates.len()),
        replicates_skipped: Some(skipped),
    })
}

/// Bootstrap with a caller-supplied estimator (for example a mixed-model fit).
pub fn bootstrap_covariance_with<F>(data: &Dataset, cfg: &BootstrapConfig, estimator: F) -> Result<CovarianceEstimate>
where
    F: Fn(&Dataset) -> Result<Vec<f64>> + Sync,
{
    cfg.validate(data)?;
    let draws: Vec<Vec<usize>> = (0..cfg.replicates).map(|r| cfg.draws(data, r)).collect();
    bootstrap_from_draws(data, cfg.unit, &draws, estimator)
}

/// Bootstrap covariance of the fixed-effects EM estimator.
pub fn bootstrap_covariance(
    data: &Dataset,
    q: QuantileLevel,
    cfg: &BootstrapConfig,
    solver: &SolverConfig,
) -> Result<CovarianceEstimate> {
    solver.validate()?;
    bootstrap_covariance_with(data, cfg, |d| em::fit(d, q, solver).map(|f| f.beta))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }
}

/// Normal-theory intervals `beta_j +- z_{(1+level)/2} sqrt(cov_jj)`.
pub fn confidence_intervals(beta: &[f64], cov: &CovarianceEstimate, level: f64) -> Result<Vec<Interval>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(QremError::InvalidConfig(format!("confidence level must be in (0, 1) (got {level})")));
    }
    let z = stats::normal_quantile((1.0 + level) / 2.0);
    Ok(beta
        .iter()
        .zip(cov.standard_errors())
        .map(|(b, se)| Interval {
            lower: b - z * se,
            upper: b + z * se,
        })
        .collect())
}
