//! Cross-check the EM solution against the exact vertex search and the
//! randomized descent used for wider designs.

use qrem::ald::total_check_loss;
use qrem::oracle::{minimize_exact, minimize_search, EXACT_MAX_P};
use qrem::sim::{generate, ScenarioSpec};
use qrem::{fit, QuantileLevel, SolverConfig};

fn main() -> qrem::Result<()> {
    let cfg = SolverConfig { epsilon: 1e-12, max_iter: 20_000, ..Default::default() };
    let q = QuantileLevel::new(0.3)?;
    for id in [1, 5, 12, 13] {
        let data = generate(&ScenarioSpec::new(id, 5)?.with_n(200))?;
        let em = fit(&data, q, &cfg)?;
        let (kind, oracle) = if data.p() <= EXACT_MAX_P {
            ("exact", minimize_exact(&data, q)?)
        } else {
            ("search", minimize_search(&data, q, 4, 1)?)
        };
        println!(
            "scenario {id:>2} (p={}): {kind:<6} objective gap {:.2e}, coefficient gap {:.2e}, unique {}",
            data.p(),
            total_check_loss(&em.residuals, q) - oracle.objective,
            oracle.coefficient_gap(&em.beta),
            oracle.is_unique()
        );
    }
    Ok(())
}
