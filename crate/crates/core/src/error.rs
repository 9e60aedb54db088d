use thiserror::Error;

pub type Result<T> = std::result::Result<T, QremError>;

#[derive(Debug, Error)]
pub enum QremError {
    #[error("quantile level {0} is outside the open interval (0, 1)")]
    InvalidQuantile(f64),

    #[error("value {value} is outside the domain of {what}")]
    Domain { what: &'static str, value: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    /// The design (possibly after weighting) is rank deficient. Lists the
    /// columns that fell below the rank threshold of the pivoted factorization.
    #[error("singular design: columns {columns:?} are linearly dependent on the others")]
    SingularDesign { columns: Vec<String> },

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("oracle vertex enumeration supports p <= 3 and n <= 500 (got p = {p}, n = {n}); use minimize_search")]
    UnsupportedSize { p: usize, n: usize },

    #[error("degenerate sample: {0}")]
    DegenerateSample(String),

    #[error("fit did not converge after {iterations} iterations")]
    NotConverged { iterations: usize },

    #[error("bootstrap unstable: {skipped} of {replicates} replicates were skipped")]
    UnstableBootstrap { skipped: usize, replicates: usize },

    #[error("too few points {side} the fitted line ({count}, need at least {needed})")]
    InsufficientSplit {
        side: &'static str,
        count: usize,
        needed: usize,
    },

    #[error("column `{0}` is not a continuous predictor")]
    NotContinuous(String),

    #[error("unknown column `{0}`")]
    UnknownColumn(String),

    #[error("degenerate grouping: {0}")]
    DegenerateGrouping(String),

    #[error("unknown simulation scenario {0} (valid ids are 1..=25)")]
    UnknownScenario(u32),

    #[error("fit is stale: {0}")]
    StaleFit(String),

    #[error("parse error at row {row}, column `{column}`: {message}")]
    Parse {
        row: usize,
        column: String,
        message: String,
    },

    #[error("no usable rows in {0}")]
    EmptyData(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl QremError {
    /// Whether the failure is a usage problem (bad input or flags) rather than
    /// a numerical failure of a well-posed request.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            QremError::InvalidQuantile(_)
                | QremError::InvalidConfig(_)
                | QremError::UnknownColumn(_)
                | QremError::NotContinuous(_)
                | QremError::UnknownScenario(_)
                | QremError::StaleFit(_)
                | QremError::Parse { .. }
                | QremError::EmptyData(_)
                | QremError::InvalidData(_)
                | QremError::Io(_)
                | QremError::Csv(_)
                | QremError::Json(_)
        )
    }
}
