//! Scalar dispersion objectives of the analysis covariance as functions of the
//! gain, with their differentials and gradients.
//!
//! Writing `C = P^f H^T` and `S = H P^f H^T + R`, the Joseph update is
//! `P^a(K) = P^f - K C^T - C K^T + K S K^T`, so every objective here is a
//! smooth function of `K` whose stationary points satisfy `K S = C`.

use std::f64::consts::{E, PI};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::kalman_update::{joseph_raw, joseph_update, FilterProblem, GainMatrix};
use crate::matrix_core::{log_det, log_det_identity_plus, symmetrized, CovarianceMatrix, Matrix};

/// Which dispersion measure of `P^a` is being minimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    /// `tr(P^a)`.
    TotalVariance,
    /// `log det(P^a)`.
    LogGeneralizedVariance,
    /// Gaussian differential entropy `(N/2) log(2 pi e) + (1/2) log det(P^a)`, in nats.
    DifferentialEntropy,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 3] = [
        ObjectiveKind::TotalVariance,
        ObjectiveKind::LogGeneralizedVariance,
        ObjectiveKind::DifferentialEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::TotalVariance => "trace",
            ObjectiveKind::LogGeneralizedVariance => "logdet",
            ObjectiveKind::DifferentialEntropy => "entropy",
        }
    }
}

/// Partial derivatives of an objective with respect to each gain entry.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientMatrix(Matrix);

impl GradientMatrix {
    pub fn new(inner: Matrix) -> Self {
        Self(inner)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.frobenius_norm()
    }

    /// Frobenius inner product with a gain direction.
    pub fn inner(&self, dk: &GainMatrix) -> Result<f64> {
        self.0.frobenius_inner(dk.matrix())
    }
}

/// `tr(P^a)`. Defined for every gain; no positive-definiteness check is needed.
pub fn total_variance(p: &FilterProblem, k: &GainMatrix) -> Result<f64> {
    p.check_gain(k, "total_variance gain")?;
    Ok(joseph_raw(p, k.matrix().as_dmatrix()).trace())
}

pub fn log_generalized_variance(p: &FilterProblem, k: &GainMatrix) -> Result<f64> {
    Ok(log_det(&joseph_update(p, k)?))
}

pub fn differential_entropy(p: &FilterProblem, k: &GainMatrix) -> Result<f64> {
    Ok(entropy_from_log_det(
        p.state_dim(),
        log_generalized_variance(p, k)?,
    ))
}

fn entropy_from_log_det(dim: usize, log_det: f64) -> f64 {
    0.5 * dim as f64 * (2.0 * PI * E).ln() + 0.5 * log_det
}

pub fn evaluate(kind: ObjectiveKind, p: &FilterProblem, k: &GainMatrix) -> Result<f64> {
    match kind {
        ObjectiveKind::TotalVariance => total_variance(p, k),
        ObjectiveKind::LogGeneralizedVariance => log_generalized_variance(p, k),
        ObjectiveKind::DifferentialEntropy => differential_entropy(p, k),
    }
}

/// First-order change of `P^a` along `dk`:
///
/// `-P^f H^T dK^T - dK H P^f + dK H P^f H^T K^T + K H P^f H^T dK^T + dK R K^T + K R dK^T`
pub fn analysis_cov_differential(
    p: &FilterProblem,
    k: &GainMatrix,
    dk: &GainMatrix,
) -> Result<Matrix> {
    p.check_gain(k, "analysis_cov_differential gain")?;
    p.check_gain(dk, "analysis_cov_differential direction")?;
    let k = k.matrix().as_dmatrix();
    let dk = dk.matrix().as_dmatrix();
    let h = p.obs_op().matrix().as_dmatrix();
    let pf = p.prior().matrix().as_dmatrix();
    let r = p.obs_noise().matrix().as_dmatrix();
    let pf_ht = pf * h.transpose();
    let h_pf = h * pf;
    let h_pf_ht = h * &pf_ht;
    let terms = -(&pf_ht * dk.transpose()) - dk * &h_pf
        + dk * &h_pf_ht * k.transpose()
        + k * &h_pf_ht * dk.transpose()
        + dk * r * k.transpose()
        + k * r * dk.transpose();
    Matrix::from_dmatrix(terms)
}

/// `d log det(P^a) = tr((P^a)^{-1} dP^a)` along `dk`.
pub fn directional_logdet_differential(
    p: &FilterProblem,
    k: &GainMatrix,
    dk: &GainMatrix,
) -> Result<f64> {
    let pa = joseph_update(p, k)?;
    let d_pa = analysis_cov_differential(p, k, dk)?;
    Ok(pa.factor().solve(d_pa.as_dmatrix())?.trace())
}

/// `K S - P^f H^T`, half the trace gradient. Zero exactly at the Kalman gain.
pub(crate) fn stationarity_matrix(p: &FilterProblem, k: &DMatrix<f64>) -> DMatrix<f64> {
    k * p.innovation_matrix() - p.cross_covariance().as_dmatrix()
}

/// `(P^a)^{-1} (2 K H P^f H^T + 2 K R - 2 P^f H^T)`.
///
/// The left factor is kept as is; the expression is generally not symmetric.
pub fn logdet_gradient(p: &FilterProblem, k: &GainMatrix) -> Result<GradientMatrix> {
    let pa = joseph_update(p, k)?;
    logdet_gradient_with(p, k, &pa)
}

fn logdet_gradient_with(
    p: &FilterProblem,
    k: &GainMatrix,
    pa: &CovarianceMatrix,
) -> Result<GradientMatrix> {
    let inner = stationarity_matrix(p, k.matrix().as_dmatrix()) * 2.0;
    let grad = pa.factor().solve(&inner)?;
    Ok(GradientMatrix(Matrix::from_dmatrix(grad)?))
}

/// `2 K (H P^f H^T + R) - 2 P^f H^T`.
///
/// This is the log-det gradient without the `(P^a)^{-1}` prefactor, so both
/// objectives vanish on the same stationarity condition `K S = P^f H^T`.
pub fn trace_gradient(p: &FilterProblem, k: &GainMatrix) -> Result<GradientMatrix> {
    p.check_gain(k, "trace_gradient gain")?;
    let grad = stationarity_matrix(p, k.matrix().as_dmatrix()) * 2.0;
    Ok(GradientMatrix(Matrix::from_dmatrix(grad)?))
}

/// Analytic gradient of the chosen objective.
pub fn gradient(kind: ObjectiveKind, p: &FilterProblem, k: &GainMatrix) -> Result<GradientMatrix> {
    Ok(value_and_gradient(kind, p, k)?.1)
}

/// Objective value and analytic gradient sharing one Joseph update.
pub fn value_and_gradient(
    kind: ObjectiveKind,
    p: &FilterProblem,
    k: &GainMatrix,
) -> Result<(f64, GradientMatrix)> {
    match kind {
        ObjectiveKind::TotalVariance => Ok((total_variance(p, k)?, trace_gradient(p, k)?)),
        ObjectiveKind::LogGeneralizedVariance => {
            let pa = joseph_update(p, k)?;
            Ok((log_det(&pa), logdet_gradient_with(p, k, &pa)?))
        }
        ObjectiveKind::DifferentialEntropy => {
            let pa = joseph_update(p, k)?;
            let grad = logdet_gradient_with(p, k, &pa)?;
            Ok((
                entropy_from_log_det(p.state_dim(), log_det(&pa)),
                GradientMatrix(grad.0.scale(0.5)),
            ))
        }
    }
}

/// Central differences `[f(K + h E_ij) - f(K - h E_ij)] / 2h` with
/// `h = 1e-6 (1 + |K_ij|)`. Entries are evaluated independently in parallel.
pub fn finite_difference_gradient(
    p: &FilterProblem,
    k: &GainMatrix,
    objective: ObjectiveKind,
) -> Result<GradientMatrix> {
    p.check_gain(k, "finite_difference_gradient gain")?;
    let (n, m) = (p.state_dim(), p.obs_dim());
    let base = k.matrix().as_dmatrix();
    let entries = (0..n * m)
        .into_par_iter()
        .map(|idx| {
            let (i, j) = (idx / m, idx % m);
            let h = 1e-6 * (1.0 + base[(i, j)].abs());
            let shifted = |delta: f64| -> Result<f64> {
                let mut kk = base.clone();
                kk[(i, j)] += delta;
                evaluate(objective, p, &GainMatrix::new(Matrix::from_dmatrix(kk)?))
            };
            Ok((shifted(h)? - shifted(-h)?) / (2.0 * h))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(GradientMatrix(Matrix::from_row_slice(n, m, &entries)?))
}

/// `f(K + D) - f(K)` evaluated without cancellation.
///
/// Since `P^a` is quadratic in `K`, `P^a(K + D) - P^a(K) = D G^T + G D^T + D S D^T`
/// with `G = K S - P^f H^T`. The log-det change is then `log det(I + M)` for the
/// whitened increment `M = L^{-1} (P^a(K + D) - P^a(K)) L^{-T}`, which stays
/// accurate long after the plain difference of two log-determinants has
/// dissolved into rounding noise.
pub fn objective_change(
    kind: ObjectiveKind,
    p: &FilterProblem,
    k: &GainMatrix,
    step: &GainMatrix,
) -> Result<f64> {
    p.check_gain(k, "objective_change gain")?;
    p.check_gain(step, "objective_change step")?;
    let kd = k.matrix().as_dmatrix();
    let d = step.matrix().as_dmatrix();
    let g = stationarity_matrix(p, kd);
    let ds = d * p.innovation_matrix();
    let increment = symmetrized(&(d * g.transpose() + &g * d.transpose() + ds * d.transpose()));
    match kind {
        ObjectiveKind::TotalVariance => Ok(increment.trace()),
        ObjectiveKind::LogGeneralizedVariance | ObjectiveKind::DifferentialEntropy => {
            let pa = joseph_update(p, k)?;
            let whitened = pa.factor().whiten(&increment)?;
            let change = log_det_identity_plus(&Matrix::from_dmatrix(whitened)?)?;
            Ok(if kind == ObjectiveKind::DifferentialEntropy {
                0.5 * change
            } else {
                change
            })
        }
    }
}
