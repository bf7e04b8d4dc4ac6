//! Gradient descent over the gain matrix with Armijo backtracking.
//!
//! The descent direction is always the negative analytic gradient of the
//! selected objective. The trial step handed to the backtracking loop is
//! either a constant or a Barzilai-Borwein step built from the last two
//! iterates; either way a step is only accepted once the Armijo sufficient
//! decrease condition holds, so the objective is monotone along accepted
//! iterates.

use serde::{Deserialize, Serialize};

use crate::error::{GainError, Result};
use crate::kalman_update::{analytic_gain, FilterProblem, GainMatrix};
use crate::matrix_core::Matrix;
use crate::objectives::{
    objective_change, stationarity_matrix, value_and_gradient, GradientMatrix, ObjectiveKind,
};

/// Backtracking gives up once the step falls below this.
pub const MIN_STEP: f64 = 1e-16;

/// Starting point of the descent.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialGain {
    /// `K = 0`, for which `P^a = P^f`.
    Zero,
    /// The closed-form Kalman gain.
    Analytic,
    Given(GainMatrix),
}

/// How the first trial step of each line search is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRule {
    /// Every line search starts from `initial_step`.
    Constant,
    /// Short Barzilai-Borwein step `<s, y> / <y, y>` from the last two iterates.
    /// The first iteration, and any iteration with `<s, y> <= 0`, tries a move
    /// of Frobenius length `initial_step` instead.
    BarzilaiBorwein,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerConfig {
    pub max_iters: usize,
    pub grad_tol: f64,
    pub armijo_c: f64,
    pub backtrack_factor: f64,
    pub initial_step: f64,
    pub init_gain: InitialGain,
    pub step_rule: StepRule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            grad_tol: 1e-9,
            armijo_c: 1e-4,
            backtrack_factor: 0.5,
            initial_step: 1.0,
            init_gain: InitialGain::Zero,
            step_rule: StepRule::BarzilaiBorwein,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if self.max_iters == 0 {
            return Err(GainError::InvalidParameter("max_iters must be positive".into()));
        }
        if !(self.grad_tol > 0.0) || !self.grad_tol.is_finite() {
            return Err(GainError::InvalidParameter(format!(
                "grad_tol must be positive, got {}",
                self.grad_tol
            )));
        }
        if !open_unit(self.armijo_c) {
            return Err(GainError::InvalidParameter(format!(
                "armijo_c must lie in (0, 1), got {}",
                self.armijo_c
            )));
        }
        if !open_unit(self.backtrack_factor) {
            return Err(GainError::InvalidParameter(format!(
                "backtrack_factor must lie in (0, 1), got {}",
                self.backtrack_factor
            )));
        }
        if !(self.initial_step > 0.0) || !self.initial_step.is_finite() {
            return Err(GainError::InvalidParameter(format!(
                "initial_step must be positive, got {}",
                self.initial_step
            )));
        }
        Ok(())
    }
}

/// Outcome of one minimization run.
#[derive(Debug, Clone)]
pub struct OptimizationReport {
    pub objective_kind: ObjectiveKind,
    pub final_gain: GainMatrix,
    pub final_objective: f64,
    /// Number of accepted steps.
    pub iterations: usize,
    pub converged: bool,
    /// Gradient norm at the start and after every accepted step.
    pub gradient_norm_trajectory: Vec<f64>,
    /// Objective value at the start and after every accepted step.
    pub objective_trajectory: Vec<f64>,
    /// Accepted step lengths (multipliers of the negative gradient).
    pub step_trajectory: Vec<f64>,
    /// Objective change of every accepted step, evaluated without cancellation.
    pub change_trajectory: Vec<f64>,
    /// `|| K H P^f H^T + K R - P^f H^T ||_F` at the final gain.
    pub stationarity_residual: f64,
}

impl OptimizationReport {
    pub fn final_gradient_norm(&self) -> f64 {
        *self
            .gradient_norm_trajectory
            .last()
            .expect("trajectory always holds the starting point")
    }
}

/// Frobenius norm of `K H P^f H^T + K R - P^f H^T`.
pub fn stationarity_residual(p: &FilterProblem, k: &GainMatrix) -> Result<f64> {
    p.check_gain(k, "stationarity_residual gain")?;
    Ok(stationarity_matrix(p, k.matrix().as_dmatrix()).norm())
}

struct Iterate {
    gain: GainMatrix,
    value: f64,
    grad: GradientMatrix,
    grad_norm: f64,
}

impl Iterate {
    fn at(kind: ObjectiveKind, p: &FilterProblem, gain: GainMatrix) -> Result<Self> {
        let (value, grad) = value_and_gradient(kind, p, &gain)?;
        let grad_norm = grad.frobenius_norm();
        Ok(Self {
            gain,
            value,
            grad,
            grad_norm,
        })
    }
}

fn is_rejection(err: &GainError) -> bool {
    matches!(
        err,
        GainError::NotPositiveDefinite { .. } | GainError::NonFinite { .. }
    )
}

fn barzilai_borwein(prev: &Iterate, cur: &Iterate) -> Option<f64> {
    let s = cur.gain.matrix().as_dmatrix() - prev.gain.matrix().as_dmatrix();
    let y = cur.grad.matrix().as_dmatrix() - prev.grad.matrix().as_dmatrix();
    let sy = s.dot(&y);
    let step = sy / y.dot(&y);
    (sy > 0.0 && step.is_finite()).then_some(step)
}

/// Minimizes `objective` over the gain.
pub fn minimize_objective(
    p: &FilterProblem,
    objective: ObjectiveKind,
    config: &OptimizerConfig,
) -> Result<OptimizationReport> {
    config.validate()?;
    let start = match &config.init_gain {
        InitialGain::Zero => GainMatrix::zeros(p.state_dim(), p.obs_dim()),
        InitialGain::Analytic => analytic_gain(p)?,
        InitialGain::Given(k) => {
            p.check_gain(k, "initial gain")?;
            k.clone()
        }
    };

    let mut cur = Iterate::at(objective, p, start)?;
    let mut prev: Option<Iterate> = None;
    let mut gradient_norm_trajectory = vec![cur.grad_norm];
    let mut objective_trajectory = vec![cur.value];
    let mut step_trajectory = Vec::new();
    let mut change_trajectory = Vec::new();
    let mut iterations = 0;

    while cur.grad_norm > config.grad_tol && iterations < config.max_iters {
        let mut step = match (config.step_rule, &prev) {
            (StepRule::Constant, _) => config.initial_step,
            (StepRule::BarzilaiBorwein, Some(prev)) => barzilai_borwein(prev, &cur)
                .unwrap_or(config.initial_step / cur.grad_norm),
            (StepRule::BarzilaiBorwein, None) => config.initial_step / cur.grad_norm,
        };
        let required_rate = config.armijo_c * cur.grad_norm * cur.grad_norm;
        let (next, change) = loop {
            if step < MIN_STEP {
                return Err(GainError::LineSearchFailed {
                    iteration: iterations,
                    min_step: MIN_STEP,
                });
            }
            match try_step(objective, p, &cur, step, required_rate) {
                Ok(Some(found)) => break found,
                Ok(None) => {}
                Err(e) if is_rejection(&e) => {}
                Err(e) => return Err(e),
            }
            step *= config.backtrack_factor;
        };
        iterations += 1;
        gradient_norm_trajectory.push(next.grad_norm);
        objective_trajectory.push(next.value);
        step_trajectory.push(step);
        change_trajectory.push(change);
        prev = Some(std::mem::replace(&mut cur, next));
    }

    let stationarity_residual = stationarity_residual(p, &cur.gain)?;
    Ok(OptimizationReport {
        objective_kind: objective,
        converged: cur.grad_norm <= config.grad_tol,
        final_objective: cur.value,
        final_gain: cur.gain,
        iterations,
        gradient_norm_trajectory,
        objective_trajectory,
        step_trajectory,
        change_trajectory,
        stationarity_residual,
    })
}

/// One Armijo trial. `Ok(None)` means the sufficient decrease test failed.
fn try_step(
    objective: ObjectiveKind,
    p: &FilterProblem,
    cur: &Iterate,
    step: f64,
    required_rate: f64,
) -> Result<Option<(Iterate, f64)>> {
    let delta = GainMatrix::new(Matrix::from_dmatrix(
        cur.grad.matrix().as_dmatrix() * -step,
    )?);
    let change = objective_change(objective, p, &cur.gain, &delta)?;
    if !(change <= -step * required_rate) {
        return Ok(None);
    }
    let gain = GainMatrix::new(cur.gain.matrix().add(delta.matrix())?);
    Ok(Some((Iterate::at(objective, p, gain)?, change)))
}

/// Minimizers of all three objectives from `K = 0`, compared against each
/// other and against the closed-form gain.
#[derive(Debug, Clone)]
pub struct EquivalenceReport {
    pub analytic_gain: GainMatrix,
    pub trace: OptimizationReport,
    pub logdet: OptimizationReport,
    pub entropy: OptimizationReport,
    pub distance_trace_logdet: f64,
    pub distance_trace_entropy: f64,
    pub distance_logdet_entropy: f64,
}

impl EquivalenceReport {
    pub fn run(&self, kind: ObjectiveKind) -> &OptimizationReport {
        match kind {
            ObjectiveKind::TotalVariance => &self.trace,
            ObjectiveKind::LogGeneralizedVariance => &self.logdet,
            ObjectiveKind::DifferentialEntropy => &self.entropy,
        }
    }

    pub fn distance_to_analytic(&self, kind: ObjectiveKind) -> f64 {
        self.run(kind)
            .final_gain
            .distance(&self.analytic_gain)
            .expect("runs share the problem shape")
    }

    pub fn max_distance_to_analytic(&self) -> f64 {
        ObjectiveKind::ALL
            .iter()
            .map(|&k| self.distance_to_analytic(k))
            .fold(0.0, f64::max)
    }

    pub fn max_pairwise_distance(&self) -> f64 {
        self.distance_trace_logdet
            .max(self.distance_trace_entropy)
            .max(self.distance_logdet_entropy)
    }

    pub fn all_converged(&self) -> bool {
        self.trace.converged && self.logdet.converged && self.entropy.converged
    }
}

pub fn cross_objective_equivalence(
    p: &FilterProblem,
    config: &OptimizerConfig,
) -> Result<EquivalenceReport> {
    let config = OptimizerConfig {
        init_gain: InitialGain::Zero,
        ..config.clone()
    };
    let analytic = analytic_gain(p)?;
    let trace = minimize_objective(p, ObjectiveKind::TotalVariance, &config)?;
    let logdet = minimize_objective(p, ObjectiveKind::LogGeneralizedVariance, &config)?;
    let entropy = minimize_objective(p, ObjectiveKind::DifferentialEntropy, &config)?;
    let dist = |a: &OptimizationReport, b: &OptimizationReport| {
        a.final_gain
            .distance(&b.final_gain)
            .expect("runs share the problem shape")
    };
    Ok(EquivalenceReport {
        distance_trace_logdet: dist(&trace, &logdet),
        distance_trace_entropy: dist(&trace, &entropy),
        distance_logdet_entropy: dist(&logdet, &entropy),
        analytic_gain: analytic,
        trace,
        logdet,
        entropy,
    })
}
