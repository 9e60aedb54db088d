//! Quantile regression fitted by EM.
//!
//! The check loss `rho_q` is, up to constants, the negative log-density of an
//! asymmetric Laplace distribution, and that distribution is a normal
//! variance-mean mixture over an exponential latent scale. Treating the
//! scales as missing data turns quantile regression into a sequence of
//! weighted least-squares problems. The same device carries over to models
//! with a random intercept per cluster.
//!
//! ```
//! use qrem::{fit, Dataset, QuantileLevel, SolverConfig};
//!
//! let x: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
//! let y: Vec<f64> = x.iter().enumerate().map(|(i, v)| 1.0 + 2.0 * v + 0.1 * ((i * 7 % 11) as f64 - 5.0)).collect();
//! let data = Dataset::builder(y).continuous("x", x).build()?;
//! let median = fit(&data, QuantileLevel::new(0.5)?, &SolverConfig::default())?;
//! assert!(median.converged);
//! assert!((median.beta[1] - 2.0).abs() < 0.3);
//! # Ok::<(), qrem::QremError>(())
//! ```
//!
//! Modules:
//! - [`ald`]: check loss and the asymmetric Laplace density.
//! - [`em`]: the fixed-effects solver.
//! - [`oracle`]: exact and search-based check-loss minimizers for testing.
//! - [`inference`]: Bahadur-KDE and bootstrap covariances.
//! - [`diagnostics`]: sign residuals, above/below QQ comparisons, flat-QQ grids.
//! - [`mixed`]: random-intercept quantile regression.
//! - [`sim`]: the 25 simulation scenarios and Monte-Carlo studies.
//! - [`cli`]: CSV ingestion, result documents and the `qrem` commands.

pub mod ald;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod em;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod mixed;
pub mod oracle;
pub mod sim;
pub mod stats;

pub use ald::QuantileLevel;
pub use data::Dataset;
pub use em::{fit, fit_path, QuantileFit, SolverConfig};
pub use error::{QremError, Result};
pub use mixed::{fit_mixed, MixedConfig, MixedQuantileFit};
