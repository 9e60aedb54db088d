//! Fixed-effects quantile regression by EM.
//!
//! Start from OLS, then alternate
//!
//! * E-step: `lambda_i = max(|u_i|, clamp)` (so `E[1/lambda_i | u_i] = 1/lambda_i`),
//! * M-step: weighted least squares of `y - (1-2q) lambda` on `X` with weights `1/lambda`,
//!
//! until the conditional log-likelihood of `u | lambda` stops moving or the
//! coefficients stop changing. Each EM step is a majorize-minimize step for the
//! summed check loss, so the objective trace `G = 2 sum rho_q(u_i)` never increases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ald::{latent_scale, total_check_loss, QuantileLevel};
use crate::data::Dataset;
use crate::error::{QremError, Result};
use crate::linalg::{weighted_least_squares, PivotedQr};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    /// Stop once the conditional log-likelihood changes by at most this much.
    pub epsilon: f64,
    pub max_iter: usize,
    /// Residuals smaller than this in magnitude are clamped before inversion.
    pub clamp: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-8,
            max_iter: 1000,
            clamp: 1e-10,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(QremError::InvalidConfig(format!(
                "epsilon must be positive (got {})",
                self.epsilon
            )));
        }
        if self.max_iter < 1 {
            return Err(QremError::InvalidConfig("max_iter must be at least 1".into()));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(QremError::InvalidConfig(format!(
                "clamp must be positive (got {})",
                self.clamp
            )));
        }
        Ok(())
    }
}

/// Result of one quantile fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileFit {
    pub q: QuantileLevel,
    pub beta: Vec<f64>,
    /// Latent scales `max(|u_i|, clamp)` at the final coefficients.
    pub lambda: Vec<f64>,
    pub residuals: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// `G` at the starting point followed by one entry per EM iteration.
    pub objective_trace: Vec<f64>,
    /// Final goodness of fit `2 sum rho_q(u_i)`.
    pub g: f64,
}

/// Ordinary least squares start.
pub fn ols_init(data: &Dataset) -> Result<Vec<f64>> {
    let qr = PivotedQr::from_matrix(data.x());
    qr.solve(data.y()).map_err(|e| data.singular(&e.columns))
}

/// One M-step: minimizes `sum_i (y_i - (1-2q) lambda_i - x_i' b)^2 / lambda_i`.
pub fn wls_step(data: &Dataset, lambda: &[f64], q: QuantileLevel) -> Result<Vec<f64>> {
    if lambda.len() != data.n() {
        return Err(QremError::InvalidWeights(format!(
            "{} latent scales for {} rows",
            lambda.len(),
            data.n()
        )));
    }
    if let Some(i) = lambda.iter().position(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(QremError::InvalidWeights(format!(
            "latent scale at row {i} is {} (must be positive and finite)",
            lambda[i]
        )));
    }
    let weights: Vec<f64> = lambda.iter().map(|l| 1.0 / l).collect();
    if let Some(i) = weights.iter().position(|w| !w.is_finite()) {
        return Err(QremError::InvalidWeights(format!("weight at row {i} overflows")));
    }
    let skew = q.skew();
    let rhs: Vec<f64> = data
        .y()
        .iter()
        .zip(lambda)
        .map(|(y, l)| y - skew * l)
        .collect();
    weighted_least_squares(data.x(), &weights, &rhs).map_err(|e| data.singular(&e.columns))
}

/// Log-likelihood of `u | lambda` under independent `N((1-2q) lambda_i, lambda_i)`.
pub fn conditional_loglik(residuals: &[f64], lambda: &[f64], q: QuantileLevel) -> f64 {
    let skew = q.skew();
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    residuals
        .iter()
        .zip(lambda)
        .map(|(&u, &l)| {
            let d = u - skew * l;
            -0.5 * (ln2pi + l.ln()) - d * d / (2.0 * l)
        })
        .sum()
}

pub(crate) fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub(crate) fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

/// Fits one quantile level. Hitting `max_iter` is reported through
/// `converged = false`, not as an error.
pub fn fit(data: &Dataset, q: QuantileLevel, cfg: &SolverConfig) -> Result<QuantileFit> {
    fit_from(data, q, cfg, ols_init(data)?)
}

/// Same as [`fit`] but starting from a caller-supplied coefficient vector.
pub fn fit_from(
    data: &Dataset,
    q: QuantileLevel,
    cfg: &SolverConfig,
    start: Vec<f64>,
) -> Result<QuantileFit> {
    cfg.validate()?;
    if start.len() != data.p() {
        return Err(QremError::InvalidConfig(format!(
            "starting point has {} coefficients, design has {}",
            start.len(),
            data.p()
        )));
    }
    let mut beta = start;
    let mut u = data.residuals(&beta);
    let mut g = 2.0 * total_check_loss(&u, q);
    let mut trace = vec![g];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < cfg.max_iter {
        iterations += 1;
        let lambda: Vec<f64> = u.iter().map(|&r| latent_scale(r, cfg.clamp)).collect();
        let next = wls_step(data, &lambda, q)?;
        let u_next = data.residuals(&next);

        let delta = (conditional_loglik(&u_next, &lambda, q) - conditional_loglik(&u, &lambda, q)).abs();
        let step = max_abs_diff(&next, &beta);

        beta = next;
        u = u_next;
        g = 2.0 * total_check_loss(&u, q);
        trace.push(g);

        if delta <= cfg.epsilon || step <= cfg.epsilon * (1.0 + max_abs(&beta)) {
            converged = true;
            break;
        }
    }

    let lambda = u.iter().map(|&r| latent_scale(r, cfg.clamp)).collect();
    Ok(QuantileFit {
        q,
        beta,
        lambda,
        residuals: u,
        iterations,
        converged,
        objective_trace: trace,
        g,
    })
}

/// Independent fits for several quantile levels, in input order.
pub fn fit_path(data: &Dataset, qs: &[QuantileLevel], cfg: &SolverConfig) -> Result<Vec<QuantileFit>> {
    for (i, a) in qs.iter().enumerate() {
        if qs[..i].contains(a) {
            return Err(QremError::InvalidConfig(format!("quantile level {a} listed twice")));
        }
    }
    qs.par_iter().map(|&q| fit(data, q, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;

    fn ql(q: f64) -> QuantileLevel {
        QuantileLevel::new(q).unwrap()
    }

    fn line_data() -> Dataset {
        let x = vec![0.0, 0.7, 1.3, 2.0, 2.4, 3.1, 3.9, 4.4, 5.2, 6.0, 6.3];
        let y: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, v)| 1.0 + 0.5 * v + ((i * 37 % 11) as f64 - 5.0) * 0.13)
            .collect();
        Dataset::builder(y).continuous("x", x).build().unwrap()
    }

    #[test]
    fn ols_intercept_only_is_mean() {
        let y = vec![1.0, 4.0, 2.5, 7.0, 3.0];
        let ds = Dataset::builder(y.clone()).build().unwrap();
        let b = ols_init(&ds).unwrap();
        assert_relative_eq!(b[0], y.iter().sum::<f64>() / 5.0, epsilon = 1e-14);
    }

    #[test]
    fn ols_recovers_noise_free_coefficients() {
        let x1 = vec![0.1, 0.4, 0.9, 1.3, 2.2, 2.9];
        let x2 = vec![1.0, -1.0, 0.5, 0.0, 2.0, -0.3];
        let y: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| 2.0 - 1.5 * a + 0.25 * b).collect();
        let ds = Dataset::builder(y).continuous("x1", x1).continuous("x2", x2).build().unwrap();
        let b = ols_init(&ds).unwrap();
        for (got, want) in b.iter().zip([2.0, -1.5, 0.25]) {
            assert!((got - want).abs() < 1e-10);
        }
    }

    #[test]
    fn ols_reports_collinear_columns() {
        // Dataset::new already refuses this, so build the matrix by hand via a
        // full-rank dataset and check the solver path on a raw factorization.
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 1.0, 3.0, 3.0, 1.0, 5.0, 5.0]);
        let qr = PivotedQr::from_matrix(&x);
        assert!(qr.solve(&[1.0, 2.0, 3.0, 4.0]).is_err());
    }

    #[test]
    fn wls_unit_scales_at_median_is_ols() {
        let ds = line_data();
        let ones = vec![1.0; ds.n()];
        let a = wls_step(&ds, &ones, ql(0.5)).unwrap();
        let b = ols_init(&ds).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn wls_matches_dense_normal_equations() {
        // 3 rows, 2 columns: solve the 2x2 normal equations by hand.
        let ds = Dataset::builder(vec![1.0, 3.0, 2.0])
            .continuous("x", vec![0.0, 1.0, 2.0])
            .build()
            .unwrap();
        let lambda = [0.5, 2.0, 1.0];
        let q = ql(0.3);
        let w: Vec<f64> = lambda.iter().map(|l| 1.0 / l).collect();
        let r: Vec<f64> = ds.y().iter().zip(&lambda).map(|(y, l)| y - 0.4 * l).collect();
        let xs = [0.0, 1.0, 2.0];
        let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..3 {
            s0 += w[i];
            s1 += w[i] * xs[i];
            s2 += w[i] * xs[i] * xs[i];
            t0 += w[i] * r[i];
            t1 += w[i] * xs[i] * r[i];
        }
        let det = s0 * s2 - s1 * s1;
        let b0 = (s2 * t0 - s1 * t1) / det;
        let b1 = (s0 * t1 - s1 * t0) / det;
        let got = wls_step(&ds, &lambda, q).unwrap();
        assert_relative_eq!(got[0], b0, epsilon = 1e-12);
        assert_relative_eq!(got[1], b1, epsilon = 1e-12);
    }

    #[test]
    fn wls_rejects_bad_scales() {
        let ds = line_data();
        let mut l = vec![1.0; ds.n()];
        l[3] = 0.0;
        assert!(matches!(wls_step(&ds, &l, ql(0.5)), Err(QremError::InvalidWeights(_))));
        l[3] = f64::NAN;
        assert!(matches!(wls_step(&ds, &l, ql(0.5)), Err(QremError::InvalidWeights(_))));
    }

    #[test]
    fn fit_trace_is_monotone_and_residuals_consistent() {
        let ds = line_data();
        for q in [0.1, 0.25, 0.5, 0.8] {
            let f = fit(&ds, ql(q), &SolverConfig::default()).unwrap();
            assert!(f.converged);
            for w in f.objective_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "trace increased: {w:?}");
            }
            let r = ds.residuals(&f.beta);
            assert_eq!(r, f.residuals);
            assert!(f.lambda.iter().all(|&l| l > 0.0));
        }
    }

    #[test]
    fn non_convergence_is_reported_not_raised() {
        let ds = line_data();
        let cfg = SolverConfig {
            max_iter: 1,
            ..Default::default()
        };
        let f = fit(&ds, ql(0.5), &cfg).unwrap();
        assert_eq!(f.iterations, 1);
        assert!(!f.converged);
    }

    #[test]
    fn fit_path_delegates_and_keeps_order() {
        let ds = line_data();
        let cfg = SolverConfig::default();
        assert!(fit_path(&ds, &[], &cfg).unwrap().is_empty());
        let single = fit_path(&ds, &[ql(0.5)], &cfg).unwrap();
        assert_eq!(single[0], fit(&ds, ql(0.5), &cfg).unwrap());
        let qs = [ql(0.9), ql(0.1)];
        let path = fit_path(&ds, &qs, &cfg).unwrap();
        assert_eq!(path[0].q, qs[0]);
        assert_eq!(path[1].q, qs[1]);
        assert!(fit_path(&ds, &[ql(0.5), ql(0.5)], &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let bad = [
            SolverConfig { epsilon: 0.0, ..Default::default() },
            SolverConfig { max_iter: 0, ..Default::default() },
            SolverConfig { clamp: -1.0, ..Default::default() },
        ];
        for c in bad {
            assert!(c.validate().is_err());
        }
    }
}
