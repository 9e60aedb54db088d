//! A small Monte-Carlo study: bias, spread and coverage of the slope.

use qrem::sim::{run_study, ScenarioSpec, StudyKind, StudyOptions};
use qrem::QuantileLevel;

fn main() -> qrem::Result<()> {
    let spec = ScenarioSpec::new(15, 0)?.with_n(200);
    let qs = [0.1, 0.5, 0.9].map(|q| QuantileLevel::new(q).unwrap());
    let report = run_study(&spec, StudyKind::SeStability, &qs, 40, 2024, &StudyOptions { bootstrap_replicates: 100, ..Default::default() })?;
    println!("scenario {}: {} replications in {:.1} s", report.scenario, report.replications, report.runtime.as_secs_f64());
    for s in &report.quantiles {
        let c = &s.coefficients[1];
        print!("q={} bias {:+.4} empirical sd {:.4}", s.q, c.bias.unwrap_or(f64::NAN), c.empirical_se);
        for se in &c.standard_errors {
            print!(" | {:?}: mean {:.4} sd {:.4} cover95 {:.2}", se.method, se.mean, se.sd, se.coverage_95.unwrap_or(f64::NAN));
        }
        println!();
    }
    Ok(())
}
