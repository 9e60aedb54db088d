//! Bahadur-KDE and bootstrap standard errors with confidence intervals.

use qrem::inference::{
    bahadur_covariance, bootstrap_covariance, confidence_intervals, BootstrapConfig, ResampleUnit,
};
use qrem::sim::{generate, ScenarioSpec};
use qrem::{fit, QuantileLevel, SolverConfig};

fn main() -> qrem::Result<()> {
    let data = generate(&ScenarioSpec::new(2, 11)?.with_n(400))?;
    let cfg = SolverConfig::default();
    let boot = BootstrapConfig {
        replicates: 300,
        seed: 7,
        unit: ResampleUnit::Rows,
    };
    for q in [0.25, 0.5, 0.75] {
        let q = QuantileLevel::new(q)?;
        let f = fit(&data, q, &cfg)?;
        let kde = bahadur_covariance(&data, &f)?;
        let bs = bootstrap_covariance(&data, q, &boot, &cfg)?;
        let ci = confidence_intervals(&f.beta, &kde, 0.95)?;
        println!(
            "q={q}: slope {:.4}  se(bahadur) {:.4}  se(bootstrap) {:.4}  95% CI [{:.4}, {:.4}]",
            f.beta[1],
            kde.standard_errors()[1],
            bs.standard_errors()[1],
            ci[1].lower,
            ci[1].upper
        );
    }
    Ok(())
}
