//! The residual law behind the EM scheme: density, moments, quantiles and
//! the normal-exponential mixture it comes from.

use qrem::ald::{cdf, cgf, marginal_density, mean, quantile, sample_mixture, variance};
use qrem::QuantileLevel;
use rand::SeedableRng;

fn main() -> qrem::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    println!("   q     h(0)     mean  variance   Q(0.5)  K(0.1q)  sample mean");
    for q in [0.1, 0.25, 0.5, 0.75, 0.9] {
        let q = QuantileLevel::new(q)?;
        let draws: Vec<f64> = (0..100_000).map(|_| sample_mixture(q, &mut rng)).collect();
        let sample_mean = draws.iter().sum::<f64>() / draws.len() as f64;
        println!(
            "{:>4} {:>8.4} {:>8.4} {:>9.4} {:>8.4} {:>8.5} {:>12.4}",
            q,
            marginal_density(0.0, q),
            mean(q),
            variance(q),
            quantile(0.5, q)?,
            cgf(0.1 * q.value(), q)?,
            sample_mean
        );
        // Zero is the q-quantile of h.
        assert!((cdf(0.0, q) - q.value()).abs() < 1e-15);
    }
    Ok(())
}
