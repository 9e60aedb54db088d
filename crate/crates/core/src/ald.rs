//! Check loss and the asymmetric-Laplace scale mixture behind the EM scheme.
//!
//! For a quantile level `q` the residual density is
//!
//! ```text
//! h(u) = 2q(1-q) exp(-2 rho_q(u))
//! ```
//!
//! which is the marginal of `u | lambda ~ N((1-2q) lambda, lambda)` with
//! `lambda ~ Exp(rate = 2q(1-q))`. Everything here works directly from `h`
//! rather than from a three-parameter ALD convention.

use rand::Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{QremError, Result};

/// Quantile level strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(q: f64) -> Result<Self> {
        if q.is_finite() && q > 0.0 && q < 1.0 {
            Ok(Self(q))
        } else {
            Err(QremError::InvalidQuantile(q))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }

    /// `q(1-q)`, the Bernoulli variance that appears all over the place.
    #[inline]
    pub fn spread(self) -> f64 {
        self.0 * (1.0 - self.0)
    }

    /// The location offset `1 - 2q` of the conditional normal.
    #[inline]
    pub fn skew(self) -> f64 {
        1.0 - 2.0 * self.0
    }

    /// The deciles 0.1, 0.2, ..., 0.9.
    pub fn deciles() -> Vec<QuantileLevel> {
        (1..=9).map(|k| QuantileLevel(k as f64 / 10.0)).collect()
    }
}

impl TryFrom<f64> for QuantileLevel {
    type Error = QremError;
    fn try_from(q: f64) -> Result<Self> {
        QuantileLevel::new(q)
    }
}

impl From<QuantileLevel> for f64 {
    fn from(q: QuantileLevel) -> f64 {
        q.0
    }
}

impl std::fmt::Display for QuantileLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The residual law for a quantile level, expressed as an ALD with location 0,
/// scale `2 sqrt(q(1-q))` and asymmetry `sqrt(q/(1-q))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AldSpec {
    pub q: QuantileLevel,
}

impl AldSpec {
    pub fn new(q: QuantileLevel) -> Self {
        Self { q }
    }

    pub fn scale(&self) -> f64 {
        2.0 * self.q.spread().sqrt()
    }

    pub fn asymmetry(&self) -> f64 {
        let q = self.q.value();
        (q / (1.0 - q)).sqrt()
    }

    pub fn density(&self, u: f64) -> f64 {
        marginal_density(u, self.q)
    }

    pub fn cdf(&self, u: f64) -> f64 {
        cdf(u, self.q)
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        quantile(p, self.q)
    }

    pub fn mean(&self) -> f64 {
        mean(self.q)
    }

    pub fn variance(&self) -> f64 {
        variance(self.q)
    }

    /// Draws one residual through the normal/exponential mixture.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        sample_mixture(self.q, rng)
    }
}

/// `rho_q(u) = u (q - 1[u < 0])`.
#[inline]
pub fn check_loss(u: f64, q: QuantileLevel) -> f64 {
    let q = q.value();
    if u < 0.0 {
        u * (q - 1.0)
    } else {
        u * q
    }
}

/// Sum of the check loss over a residual vector.
pub fn total_check_loss(residuals: &[f64], q: QuantileLevel) -> f64 {
    residuals.iter().map(|&u| check_loss(u, q)).sum()
}

/// `h(u) = 2q(1-q) exp(-2 rho_q(u))`.
#[inline]
pub fn marginal_density(u: f64, q: QuantileLevel) -> f64 {
    2.0 * q.spread() * (-2.0 * check_loss(u, q)).exp()
}

pub fn mean(q: QuantileLevel) -> f64 {
    q.skew() / (2.0 * q.spread())
}

pub fn variance(q: QuantileLevel) -> f64 {
    let q = q.value();
    0.25 * (1.0 / (q * q) + 1.0 / ((1.0 - q) * (1.0 - q)))
}

/// Cumulant generating function `K(t) = ln 4q(1-q) - ln([2(1-q) + t][2q - t])`.
///
/// Finite only strictly between the poles `t = -2(1-q)` and `t = 2q`.
pub fn cgf(t: f64, q: QuantileLevel) -> Result<f64> {
    let qv = q.value();
    let left = 2.0 * (1.0 - qv) + t;
    let right = 2.0 * qv - t;
    if !(t.is_finite() && left > 0.0 && right > 0.0) {
        return Err(QremError::Domain {
            what: "the cumulant generating function",
            value: t,
        });
    }
    Ok((4.0 * q.spread()).ln() - (left * right).ln())
}

/// Closed-form quantile function of `h`.
pub fn quantile(p: f64, q: QuantileLevel) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(QremError::Domain {
            what: "the quantile function",
            value: p,
        });
    }
    let qv = q.value();
    Ok(if p < qv {
        (p / qv).ln() / (2.0 * (1.0 - qv))
    } else if p > qv {
        ((1.0 - qv) / (1.0 - p)).ln() / (2.0 * qv)
    } else {
        0.0
    })
}

/// Closed-form integral of `h` from minus infinity to `u`; `cdf(0, q) = q`.
pub fn cdf(u: f64, q: QuantileLevel) -> f64 {
    let qv = q.value();
    if u < 0.0 {
        qv * (2.0 * (1.0 - qv) * u).exp()
    } else if u > 0.0 {
        1.0 - (1.0 - qv) * (-2.0 * qv * u).exp()
    } else {
        qv
    }
}

/// Latent scale used by the E-step, `max(|u|, clamp)`.
#[inline]
pub fn latent_scale(u: f64, clamp: f64) -> f64 {
    u.abs().max(clamp)
}

/// `E[1/lambda | u] = 1/|u|` for the inverse-Gaussian posterior, with `|u|`
/// clamped away from zero. The posterior mean of `1/lambda` does not depend on
/// `q`; the level is taken only so call sites read like the model.
#[inline]
pub fn estep_weight(u: f64, _q: QuantileLevel, clamp: f64) -> f64 {
    1.0 / latent_scale(u, clamp)
}

/// One draw of `u` from the mixture: `lambda ~ Exp(2q(1-q))`,
/// `u = (1-2q) lambda + sqrt(lambda) Z`.
pub fn sample_mixture<R: Rng + ?Sized>(q: QuantileLevel, rng: &mut R) -> f64 {
    let exp = Exp::new(2.0 * q.spread()).expect("rate is positive for q in (0, 1)");
    let lambda: f64 = exp.sample(rng);
    let z: f64 = StandardNormal.sample(rng);
    q.skew() * lambda + lambda.sqrt() * z
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ql(q: f64) -> QuantileLevel {
        QuantileLevel::new(q).unwrap()
    }

    #[test]
    fn quantile_level_rejects_boundaries() {
        assert!(QuantileLevel::new(0.0).is_err());
        assert!(QuantileLevel::new(1.0).is_err());
        assert!(QuantileLevel::new(f64::NAN).is_err());
        assert!(QuantileLevel::new(1.5).is_err());
        assert_eq!(QuantileLevel::new(0.3).unwrap().value(), 0.3);
    }

    #[test]
    fn check_loss_examples() {
        assert_relative_eq!(check_loss(1.0, ql(0.2)), 0.2);
        assert_relative_eq!(check_loss(-1.0, ql(0.2)), 0.8);
        for q in [0.1, 0.5, 0.93] {
            assert_eq!(check_loss(0.0, ql(q)), 0.0);
        }
    }

    #[test]
    fn check_loss_matches_abs_form() {
        for &q in &[0.05, 0.3, 0.5, 0.77] {
            for &u in &[-3.2f64, -0.1, 0.0, 0.4, 12.0] {
                let alt = 0.5 * (u.abs() + (2.0 * q - 1.0) * u);
                assert_relative_eq!(check_loss(u, ql(q)), alt, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn density_examples() {
        assert_relative_eq!(marginal_density(0.0, ql(0.2)), 0.32, epsilon = 1e-15);
        assert_relative_eq!(marginal_density(0.0, ql(0.5)), 0.5, epsilon = 1e-15);
        assert_relative_eq!(
            marginal_density(-3.0, ql(0.2)),
            0.32 * (-4.8f64).exp(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn moments_examples() {
        assert_eq!(mean(ql(0.5)), 0.0);
        assert_relative_eq!(variance(ql(0.5)), 2.0);
        assert_relative_eq!(mean(ql(0.2)), 1.875, epsilon = 1e-14);
    }

    #[test]
    fn quantile_examples() {
        for q in [0.1, 0.2, 0.5, 0.9] {
            assert_eq!(quantile(q, ql(q)).unwrap(), 0.0);
        }
        assert_relative_eq!(
            quantile(0.1, ql(0.2)).unwrap(),
            0.5f64.ln() / 1.6,
            epsilon = 1e-15
        );
        assert_relative_eq!(quantile(0.1, ql(0.2)).unwrap(), -0.4332, epsilon = 1e-4);
        assert_relative_eq!(
            quantile(0.9, ql(0.2)).unwrap(),
            8f64.ln() / 0.4,
            epsilon = 1e-13
        );
        assert!(quantile(0.0, ql(0.2)).is_err());
        assert!(quantile(1.0, ql(0.2)).is_err());
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(cdf(0.0, ql(0.3)), 0.3);
        assert_relative_eq!(cdf(1e6, ql(0.3)), 1.0);
        let x = quantile(0.7, ql(0.3)).unwrap();
        assert_relative_eq!(cdf(x, ql(0.3)), 0.7, epsilon = 1e-14);
    }

    #[test]
    fn estep_weight_examples() {
        let q = ql(0.3);
        assert_eq!(estep_weight(2.0, q, 1e-10), 0.5);
        assert_relative_eq!(estep_weight(0.0, q, 1e-10), 1e10);
        assert_eq!(estep_weight(-0.25, q, 1e-10), 4.0);
    }

    #[test]
    fn cgf_domain_is_between_the_poles() {
        let q = ql(0.2);
        // poles at -2(1-q) = -1.6 and 2q = 0.4
        assert!(cgf(-1.59, q).is_ok());
        assert!(cgf(0.39, q).is_ok());
        assert!(cgf(0.4, q).is_err());
        assert!(cgf(-1.6, q).is_err());
        assert!(cgf(0.5, q).is_err());
        assert_eq!(cgf(0.0, q).unwrap(), 0.0);
    }

    #[test]
    fn ald_spec_parameters() {
        let spec = AldSpec::new(ql(0.2));
        assert_relative_eq!(spec.scale(), 0.8, epsilon = 1e-15);
        assert_relative_eq!(spec.asymmetry(), 0.5, epsilon = 1e-15);
        assert!(spec.scale().is_finite() && spec.asymmetry() > 0.0);
    }

    #[test]
    fn quantile_level_serde_round_trip() {
        let q = ql(0.35);
        let s = serde_json::to_string(&q).unwrap();
        assert_eq!(s, "0.35");
        let back: QuantileLevel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, q);
        assert!(serde_json::from_str::<QuantileLevel>("1.2").is_err());
    }
}
