//! Quantile regression with a random intercept per cluster.
//!
//! The working model adds `Z v` to the linear predictor, with
//! `v ~ N(0, sigma_v^2 I)`. Each iteration
//!
//! 1. recomputes the latent scales from the mixed residuals `y - X b - Z v`,
//! 2. solves the mixed-model (Henderson) equations for `b` and the BLUPs `v`
//!    with working response `y - (1-2q) lambda` and residual variances
//!    `s^2 lambda`,
//! 3. updates `sigma_v^2` from the BLUPs and their posterior variance, and the
//!    residual scale `s^2` from the weighted working residuals (EM-REML).
//!
//! The residual scale plays the role it has in a weighted `lmer` fit. Without
//! it the latent scales, which are of the order of `|u|`, set the noise level
//! of the working model on their own, and on data whose noise is small
//! compared with 1 the variance component shrinks towards zero.
//!
//! The Henderson system is never formed. Given `b`, the BLUP of a cluster is
//! `v_j = sum w_i r_i / (D_j + 1/sigma^2)` with `D_j = sum w_i`, and
//! substituting it back leaves a least-squares problem in `b` whose rows are
//! the weighted rows of each cluster with the rank-one shrinkage
//! `I - a s s'` applied (`s` the unit vector of root weights). That problem
//! goes through the same pivoted QR as the fixed-effects solver.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ald::{latent_scale, total_check_loss, QuantileLevel};
use crate::data::{Clusters, Dataset};
use crate::em::{conditional_loglik, max_abs, max_abs_diff, ols_init, wls_step, QuantileFit, SolverConfig};
use crate::error::{QremError, Result};
use crate::inference::{bootstrap_covariance_with, BootstrapConfig, CovarianceEstimate, ResampleUnit};
use crate::linalg::{descending_key, PivotedQr};

/// Lower bound for the starting variance component.
pub const SIGMA_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MixedConfig {
    pub solver: SolverConfig,
    /// Hold `sigma_v^2` at this value instead of estimating it.
    pub pinned_sigma_v2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomInterceptModel {
    /// Cluster labels in order of first appearance; `v[j]` belongs to `labels[j]`.
    pub labels: Vec<String>,
    pub sigma_v2: f64,
    /// Multiplier on the latent scales in the working residual variances.
    pub residual_scale: f64,
    pub v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedQuantileFit {
    /// Residuals, latent scales and `G` here use `u = y - X b - Z v`.
    pub fit: QuantileFit,
    pub model: RandomInterceptModel,
    /// `sigma_v^2` at the start and after each iteration.
    pub variance_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HendersonSolution {
    pub beta: Vec<f64>,
    pub v: Vec<f64>,
    /// Trace of the random-effect block of the inverse coefficient matrix.
    pub posterior_trace: f64,
}

fn clusters_of(data: &Dataset) -> Result<&Clusters> {
    data.clusters()
        .ok_or_else(|| QremError::InvalidConfig("mixed model needs cluster labels".into()))
}

/// Jointly solves for the fixed effects and the BLUPs given latent scales and
/// the variance component. `sigma_v2 = 0` means no random effect: the fixed
/// effects come from the plain weighted step and `v = 0`.
pub fn henderson_solve(data: &Dataset, lambda: &[f64], sigma_v2: f64, q: QuantileLevel) -> Result<HendersonSolution> {
    henderson_solve_scaled(data, lambda, 1.0, sigma_v2, q)
}

/// As [`henderson_solve`] with residual variances `residual_scale * lambda_i`.
/// The returned trace is for unit residual scale; the posterior variance
/// of the BLUPs is `residual_scale` times it.
pub fn henderson_solve_scaled(
    data: &Dataset,
    lambda: &[f64],
    residual_scale: f64,
    sigma_v2: f64,
    q: QuantileLevel,
) -> Result<HendersonSolution> {
    let clusters = clusters_of(data)?;
    let m = clusters.count();
    if !(sigma_v2 >= 0.0 && sigma_v2.is_finite()) {
        return Err(QremError::InvalidConfig(format!("variance component must be finite and >= 0 (got {sigma_v2})")));
    }
    if !(residual_scale > 0.0 && residual_scale.is_finite()) {
        return Err(QremError::InvalidConfig(format!("residual scale must be finite and > 0 (got {residual_scale})")));
    }
    if sigma_v2 == 0.0 {
        return Ok(HendersonSolution {
            beta: wls_step(data, lambda, q)?,
            v: vec![0.0; m],
            posterior_trace: 0.0,
        });
    }
    if lambda.len() != data.n() {
        return Err(QremError::InvalidWeights(format!("{} latent scales for {} rows", lambda.len(), data.n())));
    }
    if let Some(i) = lambda.iter().position(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(QremError::InvalidWeights(format!("latent scale at row {i} is {}", lambda[i])));
    }

    let (n, p) = (data.n(), data.p());
    let x = data.x();
    let skew = q.skew();
    let prec = residual_scale / sigma_v2;
    let members = clusters.members();
    let w: Vec<f64> = lambda.iter().map(|l| 1.0 / l).collect();
    let ystar: Vec<f64> = data.y().iter().zip(lambda).map(|(y, l)| y - skew * l).collect();

    // Shrunken, weighted rows [X | y*], one cluster at a time, stored flat
    // with stride p + 1 in cluster order.
    let stride = p + 1;
    let mut rows = vec![0.0; n * stride];
    let mut dsum = vec![0.0; m];
    let mut proj = vec![0.0; stride];
    let mut at = 0;
    for (j, idx) in members.iter().enumerate() {
        let d: f64 = idx.iter().map(|&i| w[i]).sum();
        dsum[j] = d;
        let norm = d.sqrt();
        let alpha = 1.0 - (prec / (d + prec)).sqrt();
        proj.iter_mut().for_each(|v| *v = 0.0);
        let start = at;
        for &i in idx {
            let s = w[i].sqrt();
            let r = &mut rows[at * stride..(at + 1) * stride];
            for c in 0..p {
                r[c] = s * x[(i, c)];
            }
            r[p] = s * ystar[i];
            let shat = s / norm;
            for (acc, v) in proj.iter_mut().zip(r.iter()) {
                *acc += shat * v;
            }
            at += 1;
        }
        for (k, &i) in idx.iter().enumerate() {
            let shat = w[i].sqrt() / norm;
            let r = &mut rows[(start + k) * stride..(start + k + 1) * stride];
            for (v, a) in r.iter_mut().zip(&proj) {
                *v -= alpha * shat * a;
            }
        }
    }
    // Largest rows first keeps Householder stable under extreme weights.
    let mut order: Vec<(u64, usize)> = rows
        .chunks_exact(stride)
        .map(|r| descending_key(r[..p].iter().map(|v| v * v).sum::<f64>()))
        .zip(0..n)
        .collect();
    order.sort_unstable();
    let mut a = vec![0.0; n * p];
    let mut rhs = vec![0.0; n];
    for (k, &(_, o)) in order.iter().enumerate() {
        let r = &rows[o * stride..(o + 1) * stride];
        for c in 0..p {
            a[c * n + k] = r[c];
        }
        rhs[k] = r[p];
    }
    let qr = PivotedQr::from_column_major(n, p, a);
    let beta = qr.solve(&rhs).map_err(|e| data.singular(&e.columns))?;

    let mut v = vec![0.0; m];
    let mut trace = 0.0;
    let (mut g, mut z) = (vec![0.0; p], vec![0.0; p]);
    for (j, idx) in members.iter().enumerate() {
        let denom = dsum[j] + prec;
        let mut num = 0.0;
        g.iter_mut().for_each(|t| *t = 0.0);
        for &i in idx {
            let fit: f64 = (0..p).map(|c| x[(i, c)] * beta[c]).sum();
            num += w[i] * (ystar[i] - fit);
            for (gc, c) in g.iter_mut().zip(0..p) {
                *gc += w[i] * x[(i, c)];
            }
        }
        v[j] = num / denom;
        qr.rt_solve_into(&g, &mut z);
        trace += 1.0 / denom + z.iter().map(|t| t * t).sum::<f64>() / (denom * denom);
    }
    Ok(HendersonSolution {
        beta,
        v,
        posterior_trace: trace,
    })
}

/// `(sum v_j^2 + trace) / m`.
pub fn update_variance(v: &[f64], posterior_trace: f64) -> Result<f64> {
    if v.len() < 2 {
        return Err(QremError::DegenerateGrouping(format!("need at least 2 clusters (got {})", v.len())));
    }
    Ok((v.iter().map(|a| a * a).sum::<f64>() + posterior_trace) / v.len() as f64)
}

fn mixed_residuals(data: &Dataset, beta: &[f64], v: &[f64], index: &[usize]) -> Vec<f64> {
    let mut u = data.residuals(beta);
    for (ui, &c) in u.iter_mut().zip(index) {
        *ui -= v[c];
    }
    u
}

/// Starting variance: sample variance of the per-cluster mean OLS residuals.
fn initial_variance(data: &Dataset, beta: &[f64], clusters: &Clusters) -> f64 {
    let u = data.residuals(beta);
    let m = clusters.count();
    let mut sum = vec![0.0; m];
    let mut cnt = vec![0usize; m];
    for (&c, r) in clusters.index().iter().zip(&u) {
        sum[c] += r;
        cnt[c] += 1;
    }
    let means: Vec<f64> = sum.iter().zip(&cnt).map(|(s, c)| s / *c as f64).collect();
    crate::stats::sd(&means).powi(2).max(SIGMA_FLOOR)
}

/// Fits the random-intercept quantile model.
pub fn fit_mixed(data: &Dataset, q: QuantileLevel, cfg: &MixedConfig) -> Result<MixedQuantileFit> {
    let solver = &cfg.solver;
    solver.validate()?;
    let clusters = clusters_of(data)?;
    let m = clusters.count();
    if m < 2 {
        return Err(QremError::DegenerateGrouping(format!("need at least 2 clusters (got {m})")));
    }
    if m == data.n() {
        return Err(QremError::DegenerateGrouping("every cluster has a single row".into()));
    }
    if let Some(s) = cfg.pinned_sigma_v2 {
        if !(s >= 0.0 && s.is_finite()) {
            return Err(QremError::InvalidConfig(format!("pinned variance must be finite and >= 0 (got {s})")));
        }
    }
    let index = clusters.index();

    let (n, p) = (data.n(), data.p());
    if n <= p {
        return Err(QremError::UnsupportedSize { p, n });
    }
    let skew = q.skew();

    let mut beta = ols_init(data)?;
    let mut v = vec![0.0; m];
    let mut sigma = cfg.pinned_sigma_v2.unwrap_or_else(|| initial_variance(data, &beta, clusters));
    let mut u = mixed_residuals(data, &beta, &v, index);
    let mut scale = {
        let lambda: Vec<f64> = u.iter().map(|&r| latent_scale(r, solver.clamp)).collect();
        (weighted_square(&u, &lambda) / (n - p) as f64).max(SIGMA_FLOOR)
    };
    let mut g = 2.0 * total_check_loss(&u, q);
    let mut trace = vec![g];
    let mut sigmas = vec![sigma];
    let mut converged = false;
    let mut iterations = 0;

    while iterations < solver.max_iter {
        iterations += 1;
        let lambda: Vec<f64> = u.iter().map(|&r| latent_scale(r, solver.clamp)).collect();
        let sol = henderson_solve_scaled(data, &lambda, scale, sigma, q)?;
        let u_next = mixed_residuals(data, &sol.beta, &sol.v, index);

        // EM-REML updates: the working-model residuals are e = u - (1-2q) lambda.
        let e: Vec<f64> = u_next.iter().zip(&lambda).map(|(r, l)| r - skew * l).collect();
        let vv: f64 = sol.v.iter().map(|a| a * a).sum();
        let shrink = if sigma > 0.0 { scale / sigma * vv } else { 0.0 };
        let next_scale = ((weighted_square(&e, &lambda) + shrink) / (n - p) as f64).max(SIGMA_FLOOR);
        let next_sigma = match cfg.pinned_sigma_v2 {
            Some(s) => s,
            None => update_variance(&sol.v, scale * sol.posterior_trace)?,
        };

        let delta = (conditional_loglik(&u_next, &lambda, q) - conditional_loglik(&u, &lambda, q)).abs();
        let step = max_abs_diff(&sol.beta, &beta).max(max_abs_diff(&sol.v, &v));
        let moved = ((next_sigma - sigma).abs() / (sigma + SIGMA_FLOOR)).max((next_scale - scale).abs() / scale);

        beta = sol.beta;
        v = sol.v;
        sigma = next_sigma;
        scale = next_scale;
        u = u_next;
        g = 2.0 * total_check_loss(&u, q);
        trace.push(g);
        sigmas.push(sigma);

        let settled = delta <= solver.epsilon || step <= solver.epsilon * (1.0 + max_abs(&beta).max(max_abs(&v)));
        if settled && moved <= solver.epsilon.sqrt() {
            converged = true;
            break;
        }
    }

    let lambda = u.iter().map(|&r| latent_scale(r, solver.clamp)).collect();
    Ok(MixedQuantileFit {
        fit: QuantileFit {
            q,
            beta,
            lambda,
            residuals: u,
            iterations,
            converged,
            objective_trace: trace,
            g,
        },
        model: RandomInterceptModel {
            labels: clusters.labels().to_vec(),
            sigma_v2: sigma,
            residual_scale: scale,
            v,
        },
        variance_trace: sigmas,
    })
}

fn weighted_square(e: &[f64], lambda: &[f64]) -> f64 {
    e.iter().zip(lambda).map(|(r, l)| r * r / l).sum()
}

/// Cluster-bootstrap covariance of the fixed effects.
pub fn mixed_bootstrap_covariance(
    data: &Dataset,
    q: QuantileLevel,
    cfg: &MixedConfig,
    boot: &BootstrapConfig,
) -> Result<CovarianceEstimate> {
    if boot.unit != ResampleUnit::Clusters {
        return Err(QremError::InvalidConfig("mixed-model bootstrap resamples clusters".into()));
    }
    bootstrap_covariance_with(data, boot, |d| fit_mixed(d, q, cfg).map(|f| f.fit.beta))
}

/// Fits several quantile levels independently, in input order.
pub fn fit_mixed_path(data: &Dataset, qs: &[QuantileLevel], cfg: &MixedConfig) -> Result<Vec<MixedQuantileFit>> {
    qs.par_iter().map(|&q| fit_mixed(data, q, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::fit;
    use crate::sim::{generate, ScenarioSpec};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn ql(q: f64) -> QuantileLevel {
        QuantileLevel::new(q).unwrap()
    }

    fn toy() -> Dataset {
        let x = vec![0.1, 0.5, 0.9, 0.2, 0.4, 1.1];
        let y = vec![1.0, 1.7, 2.2, 0.4, 0.9, 1.8];
        Dataset::builder(y)
            .continuous("x", x)
            .clusters(&["a", "a", "a", "b", "b", "b"])
            .build()
            .unwrap()
    }

    /// Dense solve of the full `(p + m)` system as an independent route.
    fn dense(data: &Dataset, lambda: &[f64], s2: f64, q: QuantileLevel) -> (Vec<f64>, Vec<f64>, f64) {
        let cl = data.clusters().unwrap();
        let (n, p, m) = (data.n(), data.p(), cl.count());
        let mut design = DMatrix::zeros(n, p + m);
        for i in 0..n {
            for c in 0..p {
                design[(i, c)] = data.x()[(i, c)];
            }
            design[(i, p + cl.index()[i])] = 1.0;
        }
        let w = DMatrix::from_diagonal(&DVector::from_iterator(n, lambda.iter().map(|l| 1.0 / l)));
        let ys = DVector::from_iterator(n, data.y().iter().zip(lambda).map(|(y, l)| y - q.skew() * l));
        let mut c = design.transpose() * &w * &design;
        for j in 0..m {
            c[(p + j, p + j)] += 1.0 / s2;
        }
        let rhs = design.transpose() * &w * ys;
        let sol = c.clone().lu().solve(&rhs).unwrap();
        let inv = c.try_inverse().unwrap();
        let tr: f64 = (0..m).map(|j| inv[(p + j, p + j)]).sum();
        (sol.rows(0, p).iter().copied().collect(), sol.rows(p, m).iter().copied().collect(), tr)
    }

    #[test]
    fn matches_dense_joint_system() {
        let ds = toy();
        let lambda = [0.3, 0.2, 0.5, 0.7, 0.1, 0.4];
        for s2 in [0.05, 1.0, 30.0] {
            let sol = henderson_solve(&ds, &lambda, s2, ql(0.3)).unwrap();
            let (b, v, tr) = dense(&ds, &lambda, s2, ql(0.3));
            for (a, e) in sol.beta.iter().zip(&b) {
                assert_relative_eq!(a, e, epsilon = 1e-10);
            }
            for (a, e) in sol.v.iter().zip(&v) {
                assert_relative_eq!(a, e, epsilon = 1e-10);
            }
            assert_relative_eq!(sol.posterior_trace, tr, max_relative = 1e-9);
        }
    }

    #[test]
    fn shrinkage_limits() {
        let ds = toy();
        let lambda = [0.3, 0.2, 0.5, 0.7, 0.1, 0.4];
        let q = ql(0.5);
        let tiny = henderson_solve(&ds, &lambda, 1e-12, q).unwrap();
        let wls = wls_step(&ds, &lambda, q).unwrap();
        assert!(tiny.v.iter().all(|v| v.abs() < 1e-9));
        for (a, b) in tiny.beta.iter().zip(&wls) {
            assert_relative_eq!(a, b, epsilon = 1e-8);
        }
        // No shrinkage: v are the per-cluster offsets of a fixed-intercept fit,
        // identified up to the intercept by the zero-sum constraint.
        let huge = henderson_solve(&ds, &lambda, 1e12, q).unwrap();
        let (b, v, _) = dense(&ds, &lambda, 1e12, q);
        assert_relative_eq!(huge.v[0] - huge.v[1], v[0] - v[1], epsilon = 1e-6);
        assert_relative_eq!(huge.beta[1], b[1], epsilon = 1e-6);
        let wide = henderson_solve(&ds, &lambda, 1e6, q).unwrap();
        assert!((wide.v[0] + wide.v[1]).abs() < 1e-8);
        let zero = henderson_solve(&ds, &lambda, 0.0, q).unwrap();
        assert_eq!(zero.v, vec![0.0, 0.0]);
        assert_eq!(zero.beta, wls);
    }

    #[test]
    fn variance_update_examples() {
        assert_eq!(update_variance(&[0.0, 0.0], 0.0).unwrap(), 0.0);
        assert_eq!(update_variance(&[1.0, -1.0], 0.0).unwrap(), 1.0);
        assert!(matches!(update_variance(&[1.0], 0.0), Err(QremError::DegenerateGrouping(_))));
    }

    #[test]
    fn pinned_zero_variance_reduces_to_fixed_effects() {
        let spec = ScenarioSpec::new(25, 8).unwrap().with_n(30);
        let ds = generate(&spec).unwrap();
        let cfg = MixedConfig {
            pinned_sigma_v2: Some(0.0),
            ..Default::default()
        };
        for qv in [0.25, 0.5] {
            let mf = fit_mixed(&ds, ql(qv), &cfg).unwrap();
            let ff = fit(&ds, ql(qv), &SolverConfig::default()).unwrap();
            assert!(max_abs_diff(&mf.fit.beta, &ff.beta) <= 1e-8);
            assert!(mf.model.v.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn blups_sum_to_zero_and_are_locally_optimal() {
        let ds = generate(&ScenarioSpec::new(25, 3).unwrap().with_n(40)).unwrap();
        let q = ql(0.5);
        let f = fit_mixed(&ds, q, &MixedConfig::default()).unwrap();
        let m = f.model.v.len() as f64;
        let s = f.model.v.iter().sum::<f64>();
        assert!(s.abs() <= 1e-6 * m * f.model.sigma_v2.sqrt(), "sum {s}");

        // Penalized working objective at the final scales, perturbing one v_j.
        let lambda: Vec<f64> = f.fit.lambda.clone();
        let scale = f.model.residual_scale;
        let sol = henderson_solve_scaled(&ds, &lambda, scale, f.model.sigma_v2, q).unwrap();
        let idx = ds.clusters().unwrap().index().to_vec();
        let objective = |v: &[f64]| -> f64 {
            let u = mixed_residuals(&ds, &sol.beta, v, &idx);
            u.iter()
                .zip(&lambda)
                .map(|(r, l)| (r - q.skew() * l).powi(2) / (scale * l))
                .sum::<f64>()
                + v.iter().map(|a| a * a).sum::<f64>() / f.model.sigma_v2
        };
        let base = objective(&sol.v);
        for j in [0, 7, 19] {
            for d in [1e-4, -1e-4] {
                let mut v = sol.v.clone();
                v[j] += d;
                assert!(objective(&v) >= base - 1e-9 * base.abs());
            }
        }
    }

    #[test]
    fn relabeling_clusters_permutes_blups() {
        let ds = generate(&ScenarioSpec::new(25, 4).unwrap().with_n(20)).unwrap();
        let labels: Vec<String> = ds.clusters().unwrap().index().iter().map(|c| format!("s{c}")).collect();
        let renamed: Vec<String> = ds.clusters().unwrap().index().iter().map(|c| format!("z{}", 100 - c)).collect();
        let a = ds.clone().with_clusters(&labels).unwrap();
        let b = ds.clone().with_clusters(&renamed).unwrap();
        let fa = fit_mixed(&a, ql(0.4), &MixedConfig::default()).unwrap();
        let fb = fit_mixed(&b, ql(0.4), &MixedConfig::default()).unwrap();
        assert_eq!(fa.fit.beta, fb.fit.beta);
        assert_eq!(fa.model.sigma_v2, fb.model.sigma_v2);
        assert_eq!(fa.model.v, fb.model.v);
        assert_eq!(fb.model.labels[0], "z100");
    }

    #[test]
    fn recovers_random_intercept_sd() {
        let cfg = MixedConfig::default();
        let sds: Vec<f64> = (0..50)
            .map(|r| {
                let ds = generate(&ScenarioSpec::new(25, 500 + r).unwrap()).unwrap();
                fit_mixed(&ds, ql(0.5), &cfg).unwrap().model.sigma_v2.sqrt()
            })
            .collect();
        let mean = crate::stats::mean(&sds);
        assert!((0.35..=0.65).contains(&mean), "mean sd {mean}");
    }

    #[test]
    fn scaled_solve_matches_rescaled_lambda() {
        // Residual variances c * lambda with prior s2 is the unit-scale
        // problem with prior s2 / c, apart from the working response.
        let ds = toy();
        let lambda = [0.3, 0.2, 0.5, 0.7, 0.1, 0.4];
        let a = henderson_solve_scaled(&ds, &lambda, 4.0, 2.0, ql(0.5)).unwrap();
        let b = henderson_solve(&ds, &lambda, 0.5, ql(0.5)).unwrap();
        for (x, y) in a.beta.iter().chain(&a.v).zip(b.beta.iter().chain(&b.v)) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn grouping_errors() {
        let ds = Dataset::builder(vec![1.0, 2.0, 3.0, 4.0])
            .continuous("x", vec![0.0, 1.0, 0.5, 0.2])
            .clusters(&["a", "b", "c", "d"])
            .build()
            .unwrap();
        assert!(matches!(
            fit_mixed(&ds, ql(0.5), &MixedConfig::default()),
            Err(QremError::DegenerateGrouping(_))
        ));
        let one = ds.clone().with_clusters(&["a"; 4]).unwrap();
        assert!(matches!(
            fit_mixed(&one, ql(0.5), &MixedConfig::default()),
            Err(QremError::DegenerateGrouping(_))
        ));
        let none = Dataset::builder(vec![1.0, 2.0, 3.0]).build().unwrap();
        assert!(fit_mixed(&none, ql(0.5), &MixedConfig::default()).is_err());
    }
}
