//! Fit a family of regression quantiles and compare them with the exact
//! check-loss minimizer.

use qrem::ald::total_check_loss;
use qrem::oracle::minimize_exact;
use qrem::sim::{generate, ScenarioSpec};
use qrem::{fit_path, QuantileLevel, SolverConfig};

fn main() -> qrem::Result<()> {
    // Heteroscedastic data: the conditional quantile lines fan out.
    let data = generate(&ScenarioSpec::new(14, 3)?.with_n(300))?;
    let qs = QuantileLevel::deciles();
    let fits = fit_path(&data, &qs, &SolverConfig::default())?;
    println!("   q  intercept     slope  iterations         G   exact objective gap");
    for f in &fits {
        let exact = minimize_exact(&data, f.q)?;
        println!(
            "{:>4} {:>10.4} {:>9.4} {:>11} {:>9.3} {:>21.2e}",
            f.q,
            f.beta[0],
            f.beta[1],
            f.iterations,
            f.g,
            total_check_loss(&f.residuals, f.q) - exact.objective
        );
    }
    Ok(())
}
