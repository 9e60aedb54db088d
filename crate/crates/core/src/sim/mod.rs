pub mod scenario;
pub mod study;

pub use scenario::{generate, ScenarioSpec};
pub use study::{run_estimation_study, run_se_stability_study, run_study, ExperimentReport, StudyKind, StudyOptions};
