//! Kalman analysis step and numerical checks that the closed-form Kalman gain
//! minimizes the trace, the log-determinant and the Gaussian differential
//! entropy of the analysis error covariance.

pub mod error;
pub mod experiment;
pub mod kalman_update;
pub mod matrix_core;
pub mod objectives;
pub mod optimizer;

pub use error::{GainError, Result};
pub use kalman_update::{
    analytic_gain, innovation_covariance, joseph_update, FilterProblem, GainMatrix,
    ObservationOperator,
};
pub use matrix_core::{CovarianceMatrix, Matrix};
pub use objectives::{GradientMatrix, ObjectiveKind};
pub use optimizer::{
    cross_objective_equivalence, minimize_objective, stationarity_residual, EquivalenceReport,
    InitialGain, OptimizationReport, OptimizerConfig, StepRule,
};
