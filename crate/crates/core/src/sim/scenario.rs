//! The 25 simulation scenarios.
//!
//! Every dataset is a pure function of `(id, n, seed)`. Draws come from
//! ChaCha8 seeded with `seed`; within a row the predictors are drawn first,
//! in column order, then the error. Normal variates use the ziggurat sampler
//! of `rand_distr`, log-normal errors are `exp(sdlog * Z)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::ald::QuantileLevel;
use crate::data::Dataset;
use crate::error::{QremError, Result};

pub const SCENARIO_COUNT: u32 = 25;
pub const DEFAULT_N: usize = 500;
pub const DEFAULT_SUBJECTS: usize = 100;
pub const MIXED_TIMES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MeanModel {
    InterceptOnly,
    /// `b0 + b1 x1 + ... + bk xk`.
    Linear,
    /// `b0 + b1 x + b2 x^2`.
    Quadratic,
    /// `b0 + b1 x1 + b2 x2 + b3 x1 x2`.
    Interaction,
    /// `b0 + b1 x_it + v_i` with `v_i ~ N(0, sd^2)` over `times` visits per subject.
    RandomIntercept { sd: f64, times: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PredictorLaw {
    Uniform { lo: f64, hi: f64 },
    /// `x_it ~ N(t / 4, sd^2)` for visit `t = 1..=times`.
    VisitNormal { sd: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorFamily {
    Normal,
    /// `exp(s Z)`; the scale is the sdlog.
    LogNormal,
}

/// Error scale as a function of the first predictor `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScaleModel {
    Constant(f64),
    Linear { a: f64, b: f64 },
    /// `a + b x^3`.
    Cubic { a: f64, b: f64 },
    /// `|a + b x|`; used where `a + b x` changes sign over the predictor range.
    AbsLinear { a: f64, b: f64 },
}

impl ScaleModel {
    pub fn at(&self, x: f64) -> f64 {
        match *self {
            ScaleModel::Constant(s) => s,
            ScaleModel::Linear { a, b } => a + b * x,
            ScaleModel::Cubic { a, b } => a + b * x * x * x,
            ScaleModel::AbsLinear { a, b } => (a + b * x).abs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub id: u32,
    pub description: String,
    pub mean: MeanModel,
    /// Coefficients on the design produced by [`generate`], intercept first.
    pub coefficients: Vec<f64>,
    /// Sampling law of each raw predictor.
    pub predictors: Vec<PredictorLaw>,
    pub family: ErrorFamily,
    pub scale: ScaleModel,
    /// Rows, or subjects for the random-intercept scenario.
    pub n: usize,
    pub seed: u64,
}

fn uniform(lo: f64, hi: f64, k: usize) -> Vec<PredictorLaw> {
    vec![PredictorLaw::Uniform { lo, hi }; k]
}

impl ScenarioSpec {
    /// The table row `id` with the default size and the given seed.
    pub fn new(id: u32, seed: u64) -> Result<Self> {
        use ErrorFamily::*;
        use MeanModel::*;
        use ScaleModel as S;
        let five = vec![1.0, -3.0, 2.0, 2.0, -1.0, -2.0];
        let (description, mean, coefficients, predictors, family, scale) = match id {
            1 => ("intercept only", InterceptOnly, vec![3.0], vec![], Normal, S::Constant(0.25)),
            2..=11 => (
                "simple linear model",
                Linear,
                vec![5.0, -1.0],
                uniform(0.0, 1.0, 1),
                Normal,
                S::Constant(0.1 * (id - 1) as f64),
            ),
            12 => (
                "two predictors",
                Linear,
                vec![1.0, -3.0, 2.0],
                vec![PredictorLaw::Uniform { lo: 0.0, hi: 1.0 }, PredictorLaw::Uniform { lo: -3.0, hi: 3.0 }],
                Normal,
                S::Constant(0.1),
            ),
            13 => ("five predictors", Linear, five, uniform(-1.0, 1.0, 5), Normal, S::Constant(0.1)),
            14 => ("s.d. increases linearly", Linear, vec![3.0, 2.0], uniform(0.0, 1.0, 1), Normal, S::Linear { a: 0.1, b: 0.2 }),
            15 => ("s.d. increases linearly", Linear, vec![5.0, 1.0], uniform(0.0, 1.0, 1), Normal, S::Linear { a: 0.1, b: 0.5 }),
            16 => ("s.d. increases linearly", Linear, vec![3.0, 0.5], uniform(0.0, 1.0, 1), Normal, S::Linear { a: 0.5, b: 0.7 }),
            17 => ("polynomially increasing s.d.", Linear, vec![1.0, -2.0], uniform(0.0, 1.0, 1), Normal, S::Cubic { a: 0.1, b: 0.2 }),
            18 => ("linearly decreasing s.d.", Linear, vec![7.0, 3.0], uniform(-1.0, 1.0, 1), Normal, S::Linear { a: 1.0, b: -0.5 }),
            19 => ("intercept only, log-normal errors", InterceptOnly, vec![5.0], vec![], LogNormal, S::Constant(0.75)),
            20 => ("simple linear model, log-normal errors", Linear, vec![3.0, -1.0], uniform(-1.0, 1.0, 1), LogNormal, S::Constant(0.75)),
            21 => ("five predictors, log-normal errors", Linear, five, uniform(-1.0, 1.0, 5), LogNormal, S::Constant(0.75)),
            22 => (
                "linearly increasing log s.d.",
                Linear,
                vec![2.0, -2.0],
                uniform(-1.0, 1.0, 1),
                LogNormal,
                S::Linear { a: 0.5, b: 0.5 },
            ),
            23 => (
                "quadratic, increasing variance",
                Quadratic,
                vec![120.0, 1.0, 6.0],
                uniform(-5.0, 5.0, 1),
                Normal,
                S::AbsLinear { a: 0.2, b: 1.0 },
            ),
            24 => (
                "interaction, increasing variance",
                Interaction,
                vec![0.0, 0.0, 0.0, 4.0],
                uniform(0.0, 1.0, 2),
                Normal,
                S::Linear { a: 0.1, b: 0.2 },
            ),
            25 => (
                "mixed model",
                RandomIntercept { sd: 0.5, times: MIXED_TIMES },
                vec![2.0, 1.0],
                vec![PredictorLaw::VisitNormal { sd: 0.1 }],
                Normal,
                S::Constant(0.1),
            ),
            other => return Err(QremError::UnknownScenario(other)),
        };
        let n = if id == 25 { DEFAULT_SUBJECTS } else { DEFAULT_N };
        Ok(Self {
            id,
            description: description.to_string(),
            mean,
            coefficients,
            predictors,
            family,
            scale,
            n,
            seed,
        })
    }

    /// All 25 rows in order.
    pub fn all(seed: u64) -> Vec<Self> {
        (1..=SCENARIO_COUNT).map(|id| Self::new(id, seed).expect("ids in range")).collect()
    }

    pub fn with_n(mut self, n: usize) -> Self {
        self.n = n;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn is_mixed(&self) -> bool {
        matches!(self.mean, MeanModel::RandomIntercept { .. })
    }

    /// Number of data rows `generate` will produce.
    pub fn rows(&self) -> usize {
        match self.mean {
            MeanModel::RandomIntercept { times, .. } => self.n * times,
            _ => self.n,
        }
    }

    /// Design column names after the intercept.
    pub fn column_names(&self) -> Vec<String> {
        match self.mean {
            MeanModel::InterceptOnly => vec![],
            MeanModel::Linear if self.predictors.len() == 1 => vec!["x".into()],
            MeanModel::Linear => (1..=self.predictors.len()).map(|j| format!("x{j}")).collect(),
            MeanModel::Quadratic => vec!["x".into(), "x^2".into()],
            MeanModel::Interaction => vec!["x1".into(), "x2".into(), "x1:x2".into()],
            MeanModel::RandomIntercept { .. } => vec!["x".into()],
        }
    }

    /// The `q`-th conditional quantile coefficients on the generated design
    /// (for the random-intercept scenario, conditional on the subject effect).
    /// `None` when that quantile is not linear in the design columns.
    pub fn true_coefficients(&self, q: QuantileLevel) -> Option<Vec<f64>> {
        let z = NormalDist::standard().inverse_cdf(q.value());
        let mut beta = self.coefficients.clone();
        match (self.family, self.scale) {
            (ErrorFamily::Normal, ScaleModel::Constant(s)) => beta[0] += s * z,
            (ErrorFamily::LogNormal, ScaleModel::Constant(s)) => beta[0] += (s * z).exp(),
            (ErrorFamily::Normal, ScaleModel::Linear { a, b }) => {
                beta[0] += a * z;
                beta[1] += b * z;
            }
            _ => return None,
        }
        Some(beta)
    }
}

/// Draws the dataset for `spec`.
pub fn generate(spec: &ScenarioSpec) -> Result<Dataset> {
    if spec.n == 0 {
        return Err(QremError::InvalidConfig("scenario size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.predictors.len();
    let rows = spec.rows();
    let mut raw: Vec<Vec<f64>> = vec![Vec::with_capacity(rows); k];
    let mut y = Vec::with_capacity(rows);
    let mut labels = Vec::new();

    let draw_error = |rng: &mut ChaCha8Rng, x1: f64| -> f64 {
        let s = spec.scale.at(x1);
        let z: f64 = StandardNormal.sample(rng);
        match spec.family {
            ErrorFamily::Normal => s * z,
            ErrorFamily::LogNormal => (s * z).exp(),
        }
    };
    let b = &spec.coefficients;

    match spec.mean {
        MeanModel::RandomIntercept { sd, times } => {
            let PredictorLaw::VisitNormal { sd: xsd } = spec.predictors[0] else {
                return Err(QremError::InvalidConfig("random-intercept scenario needs visit predictors".into()));
            };
            let effect = Normal::new(0.0, sd).map_err(|e| QremError::InvalidConfig(e.to_string()))?;
            for subject in 0..spec.n {
                let v = effect.sample(&mut rng);
                for t in 1..=times {
                    let xz: f64 = StandardNormal.sample(&mut rng);
                    let x = t as f64 / 4.0 + xsd * xz;
                    let e = draw_error(&mut rng, x);
                    raw[0].push(x);
                    y.push(b[0] + b[1] * x + v + e);
                    labels.push(format!("s{}", subject + 1));
                }
            }
        }
        _ => {
            let mut x = vec![0.0; k];
            for _ in 0..rows {
                for (j, law) in spec.predictors.iter().enumerate() {
                    x[j] = match *law {
                        PredictorLaw::Uniform { lo, hi } => rng.random_range(lo..hi),
                        PredictorLaw::VisitNormal { .. } => {
                            return Err(QremError::InvalidConfig("visit predictors need the random-intercept model".into()))
                        }
                    };
                    raw[j].push(x[j]);
                }
                let x1 = x.first().copied().unwrap_or(0.0);
                let mu = match spec.mean {
                    MeanModel::InterceptOnly => b[0],
                    MeanModel::Linear => b[0] + x.iter().zip(&b[1..]).map(|(a, c)| a * c).sum::<f64>(),
                    MeanModel::Quadratic => b[0] + b[1] * x1 + b[2] * x1 * x1,
                    MeanModel::Interaction => b[0] + b[1] * x[0] + b[2] * x[1] + b[3] * x[0] * x[1],
                    MeanModel::RandomIntercept { .. } => unreachable!(),
                };
                y.push(mu + draw_error(&mut rng, x1));
            }
        }
    }

    let names = spec.column_names();
    let mut columns: Vec<Vec<f64>> = match spec.mean {
        MeanModel::Quadratic => vec![raw[0].clone(), raw[0].iter().map(|v| v * v).collect()],
        MeanModel::Interaction => {
            let prod = raw[0].iter().zip(&raw[1]).map(|(a, c)| a * c).collect();
            vec![raw[0].clone(), raw[1].clone(), prod]
        }
        _ => raw,
    };
    let mut builder = Dataset::builder(y);
    for (name, col) in names.iter().zip(columns.drain(..)) {
        builder = builder.continuous(name, col);
    }
    if !labels.is_empty() {
        builder = builder.clusters(&labels);
    }
    builder.build()
}
