//! Property tests for the solver and the residual law.

mod common;

use proptest::prelude::*;
use qrem::ald::{cdf, check_loss, marginal_density, quantile, total_check_loss};
use qrem::oracle::minimize_exact;
use qrem::{fit, Dataset, QuantileLevel, SolverConfig};

fn tight() -> SolverConfig {
    SolverConfig {
        epsilon: 1e-12,
        max_iter: 20_000,
        ..Default::default()
    }
}

/// A small simple-regression dataset with continuous noise, so that ties in
/// the response are absent.
fn simple_regression() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (12usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )
    })
}

fn dataset(x: &[f64], y: &[f64]) -> Dataset {
    Dataset::builder(y.to_vec()).continuous("x", x.to_vec()).build().unwrap()
}

fn level() -> impl Strategy<Value = QuantileLevel> {
    (0.05f64..0.95).prop_map(|q| QuantileLevel::new(q).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cdf_inverts_quantile(q in level(), p in 0.001f64..0.999) {
        let u = quantile(p, q).unwrap();
        prop_assert!((cdf(u, q) - p).abs() < 1e-12);
    }

    #[test]
    fn density_is_exponentiated_check_loss(q in level(), u in -20.0f64..20.0) {
        let direct = 2.0 * q.spread() * (-2.0 * check_loss(u, q)).exp();
        prop_assert!((marginal_density(u, q) - direct).abs() <= 1e-15 * direct.max(1e-300) + 1e-300);
    }

    #[test]
    fn check_loss_is_nonnegative_and_positively_homogeneous(q in level(), u in -50.0f64..50.0, a in 0.01f64..100.0) {
        prop_assert!(check_loss(u, q) >= 0.0);
        prop_assert!((check_loss(a * u, q) - a * check_loss(u, q)).abs() <= 1e-12 * a * u.abs().max(1.0));
    }

    #[test]
    fn check_loss_reflects(q in level(), u in -50.0f64..50.0) {
        let mirrored = QuantileLevel::new(1.0 - q.value()).unwrap();
        prop_assert!((check_loss(u, q) - check_loss(-u, mirrored)).abs() < 1e-12);
    }

    #[test]
    fn em_reaches_the_exact_minimum((x, y) in simple_regression(), q in level()) {
        let data = dataset(&x, &y);
        let em = fit(&data, q, &tight()).unwrap();
        let exact = minimize_exact(&data, q).unwrap();
        let gap = total_check_loss(&em.residuals, q) - exact.objective;
        prop_assert!(gap >= -1e-9, "EM below the exact minimum by {gap}");
        prop_assert!(gap <= 1e-6 * data.n() as f64, "gap {gap}");
    }

    #[test]
    fn scale_equivariance((x, y) in simple_regression(), q in level(), a in 0.1f64..10.0) {
        let base = minimize_exact(&dataset(&x, &y), q).unwrap();
        let scaled_y: Vec<f64> = y.iter().map(|v| a * v).collect();
        let scaled = fit(&dataset(&x, &scaled_y), q, &tight()).unwrap();
        let scaled_exact = minimize_exact(&dataset(&x, &scaled_y), q).unwrap();
        prop_assert!((scaled_exact.objective - a * base.objective).abs() <= 1e-9 * a * base.objective.max(1.0));
        prop_assert!(total_check_loss(&scaled.residuals, q) - scaled_exact.objective <= 1e-6 * x.len() as f64 * a);
    }

    #[test]
    fn reflection_maps_q_to_one_minus_q((x, y) in simple_regression(), q in level()) {
        let mirrored = QuantileLevel::new(1.0 - q.value()).unwrap();
        let neg: Vec<f64> = y.iter().map(|v| -v).collect();
        let a = minimize_exact(&dataset(&x, &y), q).unwrap();
        let b = fit(&dataset(&x, &neg), mirrored, &tight()).unwrap();
        prop_assert!((total_check_loss(&b.residuals, mirrored) - a.objective).abs() <= 1e-6 * x.len() as f64);
    }

    #[test]
    fn regression_equivariance((x, y) in simple_regression(), q in level(), c0 in -5.0f64..5.0, c1 in -5.0f64..5.0) {
        let shifted: Vec<f64> = y.iter().zip(&x).map(|(v, xi)| v + c0 + c1 * xi).collect();
        let base = fit(&dataset(&x, &y), q, &tight()).unwrap();
        let moved = fit(&dataset(&x, &shifted), q, &tight()).unwrap();
        // The residual vectors attain the same minimum; when the minimizer is
        // unique the coefficients shift by exactly (c0, c1).
        let n = x.len() as f64;
        prop_assert!((total_check_loss(&base.residuals, q) - total_check_loss(&moved.residuals, q)).abs() <= 2e-6 * n);
        let exact = minimize_exact(&dataset(&x, &y), q).unwrap();
        if exact.is_unique() {
            prop_assert!((moved.beta[0] - base.beta[0] - c0).abs() < 1e-3);
            prop_assert!((moved.beta[1] - base.beta[1] - c1).abs() < 1e-3);
        }
    }

    #[test]
    fn sign_counts_bracket_nq((x, y) in simple_regression(), q in level()) {
        let data = dataset(&x, &y);
        let exact = minimize_exact(&data, q).unwrap();
        let u = data.residuals(&exact.beta);
        let scale = y.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let zero = u.iter().filter(|r| r.abs() <= 1e-9 * scale).count();
        let below = u.iter().filter(|r| **r < -1e-9 * scale).count();
        let nq = q.value() * data.n() as f64;
        prop_assert!(below as f64 <= nq + 1e-9 && nq <= (below + zero) as f64 + 1e-9,
            "below {below}, zero {zero}, nq {nq}");
    }

    #[test]
    fn fits_are_reproducible((x, y) in simple_regression(), q in level()) {
        let data = dataset(&x, &y);
        let a = fit(&data, q, &SolverConfig::default()).unwrap();
        let b = fit(&data, q, &SolverConfig::default()).unwrap();
        prop_assert_eq!(a.beta, b.beta);
        prop_assert_eq!(a.objective_trace, b.objective_trace);
    }
}

#[test]
fn mixture_sampler_matches_cdf() {
    use rand::SeedableRng;
    let q = QuantileLevel::new(0.3).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let n = 40_000;
    let mut draws: Vec<f64> = (0..n).map(|_| qrem::ald::sample_mixture(q, &mut rng)).collect();
    draws.sort_by(f64::total_cmp);
    let ks = draws
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            let f = cdf(u, q);
            (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
        })
        .fold(0.0f64, f64::max);
    // 1.95 / sqrt(n) is the 0.1% critical value of the KS statistic.
    assert!(ks < 1.95 / (n as f64).sqrt(), "KS statistic {ks}");
}

#[test]
fn quadrature_helper_integrates_polynomials() {
    let v = common::integrate(|x| 3.0 * x * x, 0.0, 2.0, 1e-12);
    assert!((v - 8.0).abs() < 1e-12);
}
