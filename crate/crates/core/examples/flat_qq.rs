//! The flat-QQ grid separates a correctly specified interaction model from an
//! additive one.

use qrem::diagnostics::flat_qq;
use qrem::sim::{generate, ScenarioSpec};
use qrem::{fit_path, QuantileLevel, SolverConfig};

fn main() -> qrem::Result<()> {
    let data = generate(&ScenarioSpec::new(24, 1024)?.with_n(10_000))?;
    let qs: Vec<QuantileLevel> = (1..20).map(|k| QuantileLevel::new(k as f64 / 20.0)).collect::<qrem::Result<_>>()?;
    let cfg = SolverConfig::default();
    let x1 = data.column_index("x1")?;
    let additive = data.select_columns(&[0, 1, 2])?;
    for (label, d) in [("interaction", &data), ("additive", &additive)] {
        let grid = flat_qq(d, &fit_path(d, &qs, &cfg)?, x1, 20)?;
        println!("{label}: {:.1}% of cells outside [0.9, 1.1]", 100.0 * grid.fraction_outside(0.9, 1.1));
        for (xi, row) in grid.xi.iter().zip(&grid.ratios).step_by(4) {
            let cells: Vec<String> = row.iter().step_by(3).map(|r| r.map_or("    -".into(), |v| format!("{v:5.2}"))).collect();
            println!("  xi={xi:.2} {}", cells.join(" "));
        }
    }
    Ok(())
}
