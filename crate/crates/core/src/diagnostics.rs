//! Model-adequacy checks built on the signs of the residuals.
//!
//! At a check-loss optimum the scaled sign residuals
//! `c_i = sgn(u_i) - (1 - 2q)` are orthogonal to every design column, and a
//! point lies above the fitted quantile with probability `1 - q` whatever its
//! predictor values. So under a correct model the predictor distribution
//! among points above the fit (set A) matches the one below it (set B); the
//! QQ plots and the flat-QQ grid compare the two.

use serde::{Deserialize, Serialize};

use crate::ald::{check_loss, marginal_density, QuantileLevel};
use crate::data::{ColumnKind, Dataset};
use crate::em::QuantileFit;
use crate::error::{QremError, Result};
use crate::stats::{self, KsTest};

/// Residuals at most this large in magnitude have no sign.
pub const DEFAULT_CLAMP: f64 = 1e-10;
/// Minimum size of each of A and B for a QQ comparison.
pub const MIN_SPLIT: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignResiduals {
    pub q: QuantileLevel,
    /// `2q` above the fit, `2q - 2` below, `2q - 1` for near-zero residuals.
    pub c: Vec<f64>,
    pub above: Vec<usize>,
    pub below: Vec<usize>,
    pub near_zero: Vec<usize>,
    /// `max_j |sum_i x_ij c_i|`.
    pub orthogonality_defect: f64,
}

pub fn sign_residuals(data: &Dataset, fit: &QuantileFit) -> SignResiduals {
    sign_residuals_with(data, fit, DEFAULT_CLAMP)
}

pub fn sign_residuals_with(data: &Dataset, fit: &QuantileFit, clamp: f64) -> SignResiduals {
    let skew = fit.q.skew();
    let mut c = Vec::with_capacity(fit.residuals.len());
    let (mut above, mut below, mut near_zero) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &u) in fit.residuals.iter().enumerate() {
        let sign = if u.abs() <= clamp {
            near_zero.push(i);
            0.0
        } else if u > 0.0 {
            above.push(i);
            1.0
        } else {
            below.push(i);
            -1.0
        };
        c.push(sign - skew);
    }
    let x = data.x();
    let orthogonality_defect = (0..data.p())
        .map(|j| x.column(j).iter().zip(&c).map(|(a, b)| a * b).sum::<f64>().abs())
        .fold(0.0, f64::max);
    SignResiduals {
        q: fit.q,
        c,
        above,
        below,
        near_zero,
        orthogonality_defect,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QqPlotData {
    pub predictor: String,
    pub q: QuantileLevel,
    pub probabilities: Vec<f64>,
    /// Quantiles of the predictor over points above the fit.
    pub above: Vec<f64>,
    /// Quantiles of the predictor over points below the fit.
    pub below: Vec<f64>,
    /// Two-sample KS comparison of the raw predictor values in A and B.
    pub ks_statistic: f64,
    pub ks_p_value: f64,
}

fn continuous_column(data: &Dataset, predictor: usize) -> Result<&str> {
    let col = data
        .columns()
        .get(predictor)
        .ok_or_else(|| QremError::UnknownColumn(format!("#{predictor}")))?;
    if col.kind != ColumnKind::Continuous {
        return Err(QremError::NotContinuous(col.name.clone()));
    }
    Ok(&col.name)
}

/// Matched-probability quantiles of predictor `j` over A and over B at
/// `(k - 0.5) / levels`. `levels` defaults to `min(|A|, |B|)`.
pub fn qq_above_below(
    data: &Dataset,
    fit: &QuantileFit,
    predictor: usize,
    levels: Option<usize>,
) -> Result<QqPlotData> {
    let name = continuous_column(data, predictor)?.to_string();
    let signs = sign_residuals(data, fit);
    for (side, set) in [("above", &signs.above), ("below", &signs.below)] {
        if set.len() < MIN_SPLIT {
            return Err(QremError::InsufficientSplit {
                side,
                count: set.len(),
                needed: MIN_SPLIT,
            });
        }
    }
    let x = data.x().column(predictor);
    let xa: Vec<f64> = signs.above.iter().map(|&i| x[i]).collect();
    let xb: Vec<f64> = signs.below.iter().map(|&i| x[i]).collect();
    let levels = levels.unwrap_or(xa.len().min(xb.len()));
    if levels == 0 {
        return Err(QremError::InvalidConfig("QQ levels must be positive".into()));
    }
    Ok(qq_from_samples(name, fit.q, &xa, &xb, levels))
}

fn qq_from_samples(predictor: String, q: QuantileLevel, xa: &[f64], xb: &[f64], levels: usize) -> QqPlotData {
    let sa = stats::sorted(xa);
    let sb = stats::sorted(xb);
    let probabilities: Vec<f64> = (1..=levels).map(|k| (k as f64 - 0.5) / levels as f64).collect();
    let above = probabilities.iter().map(|&p| stats::quantile_sorted(&sa, p)).collect();
    let below = probabilities.iter().map(|&p| stats::quantile_sorted(&sb, p)).collect();
    let KsTest { statistic, p_value } = stats::ks_two_sample(xa, xb);
    QqPlotData {
        predictor,
        q,
        probabilities,
        above,
        below,
        ks_statistic: statistic,
        ks_p_value: p_value,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelBalance {
    pub level: String,
    /// Rows at this level with a signed residual.
    pub count: usize,
    pub above: usize,
    /// Share of `count` above the fit; `None` for an empty level.
    pub proportion: Option<f64>,
    /// Binomial standard error `sqrt(q(1-q)/count)` under the model.
    pub standard_error: Option<f64>,
    pub expected: f64,
    /// Proportion more than three standard errors from `1 - q`.
    pub flagged: bool,
}

/// Per-level share of points above the fit for a categorical predictor.
pub fn categorical_balance(data: &Dataset, fit: &QuantileFit, factor: &str) -> Result<Vec<LevelBalance>> {
    let f = data.factor(factor)?;
    let signs = sign_residuals(data, fit);
    let k = f.levels.len();
    let mut count = vec![0usize; k];
    let mut above = vec![0usize; k];
    for &i in &signs.above {
        count[f.codes[i]] += 1;
        above[f.codes[i]] += 1;
    }
    for &i in &signs.below {
        count[f.codes[i]] += 1;
    }
    let expected = 1.0 - fit.q.value();
    Ok((0..k)
        .map(|l| {
            let (proportion, standard_error) = if count[l] == 0 {
                (None, None)
            } else {
                let n = count[l] as f64;
                (Some(above[l] as f64 / n), Some((fit.q.spread() / n).sqrt()))
            };
            let flagged = match (proportion, standard_error) {
                (Some(p), Some(se)) => (p - expected).abs() > 3.0 * se,
                _ => false,
            };
            LevelBalance {
                level: f.levels[l].clone(),
                count: count[l],
                above: above[l],
                proportion,
                standard_error,
                expected,
                flagged,
            }
        })
        .collect())
}

/// `G = 2 sum rho_q(u_i)`.
///
/// Since `-log h(u) = 2 rho_q(u) - log(2q(1-q))`, this equals
/// `-sum log h(u_i) + n log(2q(1-q))`: the negative log marginal likelihood of
/// the residuals shifted by a constant that depends only on `n` and `q`.
pub fn goodness_of_fit(fit: &QuantileFit) -> f64 {
    goodness_of_fit_residuals(&fit.residuals, fit.q)
}

pub fn goodness_of_fit_residuals(residuals: &[f64], q: QuantileLevel) -> f64 {
    2.0 * residuals.iter().map(|&u| check_loss(u, q)).sum::<f64>()
}

/// `-sum log h(u_i)`.
pub fn negative_log_likelihood(residuals: &[f64], q: QuantileLevel) -> f64 {
    -residuals.iter().map(|&u| marginal_density(u, q).ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatQqGrid {
    pub predictor: String,
    /// Column labels.
    pub quantiles: Vec<QuantileLevel>,
    /// Row labels: `L` equally spaced points over the predictor's range.
    pub xi: Vec<f64>,
    /// `ratios[row][col]`; `None` where no below-set quantile is smaller than `xi`.
    pub ratios: Vec<Vec<Option<f64>>>,
}

impl FlatQqGrid {
    pub fn defined_cells(&self) -> impl Iterator<Item = f64> + '_ {
        self.ratios.iter().flatten().filter_map(|c| *c)
    }

    /// Fraction of defined cells outside `[lo, hi]`.
    pub fn fraction_outside(&self, lo: f64, hi: f64) -> f64 {
        let (mut total, mut out) = (0usize, 0usize);
        for r in self.defined_cells() {
            total += 1;
            if r < lo || r > hi {
                out += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            out as f64 / total as f64
        }
    }
}

/// Flat QQ grid: for each fit and each `xi`, the ratio of above-set ("empirical")
/// to below-set ("theoretical") QQ quantiles that are strictly less than `xi`.
pub fn flat_qq(data: &Dataset, fits: &[QuantileFit], predictor: usize, l: usize) -> Result<FlatQqGrid> {
    if l < 2 {
        return Err(QremError::InvalidConfig(format!("flat QQ needs at least 2 evaluation points (got {l})")));
    }
    if let Some(f) = fits.iter().find(|f| !f.converged) {
        return Err(QremError::NotConverged {
            iterations: f.iterations,
        });
    }
    let name = continuous_column(data, predictor)?.to_string();
    let x = data.x().column(predictor);
    let (lo, hi) = x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let xi: Vec<f64> = (0..l).map(|k| lo + (hi - lo) * k as f64 / (l - 1) as f64).collect();

    let mut columns = Vec::with_capacity(fits.len());
    for fit in fits {
        let qq = qq_above_below(data, fit, predictor, None)?;
        columns.push(ratio_column(&qq.above, &qq.below, &xi));
    }
    let ratios = (0..l).map(|r| columns.iter().map(|c| c[r]).collect()).collect();
    Ok(FlatQqGrid {
        predictor: name,
        quantiles: fits.iter().map(|f| f.q).collect(),
        xi,
        ratios,
    })
}

/// `n_e(xi) / n_t(xi)` with strict less-than counts; `None` when `n_t = 0`.
pub fn ratio_column(empirical: &[f64], theoretical: &[f64], xi: &[f64]) -> Vec<Option<f64>> {
    xi.iter()
        .map(|&t| {
            let ne = empirical.iter().filter(|&&v| v < t).count();
            let nt = theoretical.iter().filter(|&&v| v < t).count();
            (nt > 0).then(|| ne as f64 / nt as f64)
        })
        .collect()
}
