//! Sign residuals, the above/below QQ comparison and categorical balance.

use qrem::diagnostics::{categorical_balance, qq_above_below, sign_residuals};
use qrem::{fit, Dataset, QuantileLevel, SolverConfig};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn main() -> qrem::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let n = 600;
    let x: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
    let site: Vec<&str> = (0..n).map(|i| ["a", "b", "c"][i % 3]).collect();
    // The spread grows with x; at the median the above and below sets still
    // share one distribution of x, so the KS comparison should be quiet.
    let y: Vec<f64> = x.iter().map(|&xi| 1.0 + 2.0 * xi + (0.2 + 2.0 * xi) * noise.sample(&mut rng)).collect();
    let data = Dataset::builder(y).continuous("x", x).categorical("site", &site).build()?;

    let q = QuantileLevel::new(0.5)?;
    let f = fit(&data, q, &SolverConfig::default())?;
    let s = sign_residuals(&data, &f);
    println!(
        "above {} below {} on the line {}  |X'c| = {:.2e}",
        s.above.len(),
        s.below.len(),
        s.near_zero.len(),
        s.orthogonality_defect
    );

    let qq = qq_above_below(&data, &f, data.column_index("x")?, Some(9))?;
    println!("KS statistic {:.3} (p = {:.3})", qq.ks_statistic, qq.ks_p_value);
    for ((p, a), b) in qq.probabilities.iter().zip(&qq.above).zip(&qq.below) {
        println!("  p={p:.3}  above {a:.3}  below {b:.3}");
    }
    for level in categorical_balance(&data, &f, "site")? {
        println!("  site={} n={} above={}{}", level.level, level.count, level.above, if level.flagged { " flagged" } else { "" });
    }
    Ok(())
}
