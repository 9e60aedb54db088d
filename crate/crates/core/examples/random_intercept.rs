//! Quantile regression with a subject-level random intercept.

use qrem::sim::{generate, ScenarioSpec};
use qrem::{fit_mixed, fit, MixedConfig, QuantileLevel, SolverConfig};

fn main() -> qrem::Result<()> {
    // 50 subjects with repeated measurements and a N(0, 0.5^2) intercept.
    let data = generate(&ScenarioSpec::new(25, 8)?)?;
    let cfg = MixedConfig::default();
    for q in [0.25, 0.5, 0.75] {
        let q = QuantileLevel::new(q)?;
        let m = fit_mixed(&data, q, &cfg)?;
        let fixed = fit(&data, q, &SolverConfig::default())?;
        println!(
            "q={q}: slope {:.4} (fixed-effects fit {:.4})  sigma_v {:.3}  G {:.2} vs {:.2}  {} iterations, converged {}",
            m.fit.beta[1],
            fixed.beta[1],
            m.model.sigma_v2.sqrt(),
            m.fit.g,
            fixed.g,
            m.fit.iterations,
            m.fit.converged
        );
    }
    let m = fit_mixed(&data, QuantileLevel::new(0.5)?, &cfg)?;
    let shown: Vec<String> = m.model.labels.iter().zip(&m.model.v).take(5).map(|(l, v)| format!("{l}: {v:+.3}")).collect();
    println!("first BLUPs at the median: {}", shown.join(", "));
    Ok(())
}
