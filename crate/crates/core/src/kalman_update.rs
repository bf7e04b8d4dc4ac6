//! Kalman analysis step: the analytic gain and the Joseph-form covariance update.

use nalgebra::DMatrix;

use crate::error::{shape_mismatch, Result};
use crate::matrix_core::{symmetrized, CovarianceMatrix, Matrix};

/// Linearized observation operator `H` (obs_dim x state_dim).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationOperator(Matrix);

impl ObservationOperator {
    pub fn new(inner: Matrix) -> Self {
        Self(inner)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Ok(Self(Matrix::from_rows(rows)?))
    }

    pub fn obs_dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }
}

/// Gain matrix `K` (state_dim x obs_dim). Any finite matrix is a valid gain.
#[derive(Debug, Clone, PartialEq)]
pub struct GainMatrix(Matrix);

impl GainMatrix {
    pub fn new(inner: Matrix) -> Self {
        Self(inner)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Ok(Self(Matrix::from_rows(rows)?))
    }

    pub fn zeros(state_dim: usize, obs_dim: usize) -> Self {
        Self(Matrix::zeros(state_dim, obs_dim))
    }

    pub fn state_dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    /// Frobenius distance to another gain of the same shape.
    pub fn distance(&self, other: &GainMatrix) -> Result<f64> {
        Ok(self.0.sub(&other.0)?.frobenius_norm())
    }
}

/// The triple `(P^f, H, R)` with consistent dimensions.
///
/// Construction also caches `P^f H^T` and the innovation covariance, which
/// every objective and gradient evaluation needs.
#[derive(Debug, Clone)]
pub struct FilterProblem {
    prior: CovarianceMatrix,
    obs_op: ObservationOperator,
    obs_noise: CovarianceMatrix,
    cross_cov: Matrix,
    innovation: CovarianceMatrix,
}

impl FilterProblem {
    pub fn new(
        prior: CovarianceMatrix,
        obs_op: ObservationOperator,
        obs_noise: CovarianceMatrix,
    ) -> Result<Self> {
        let (n, m) = (prior.dim(), obs_noise.dim());
        if obs_op.matrix().shape() != (m, n) {
            return Err(shape_mismatch(
                "FilterProblem observation operator",
                (m, n),
                obs_op.matrix().shape(),
            ));
        }
        let h = obs_op.matrix().as_dmatrix();
        let cross = prior.matrix().as_dmatrix() * h.transpose();
        let s = symmetrized(&(h * &cross + obs_noise.matrix().as_dmatrix()));
        let innovation = CovarianceMatrix::new(Matrix::from_dmatrix(s)?)?;
        Ok(Self {
            prior,
            obs_op,
            obs_noise,
            cross_cov: Matrix::from_dmatrix(cross)?,
            innovation,
        })
    }

    pub fn prior(&self) -> &CovarianceMatrix {
        &self.prior
    }

    pub fn obs_op(&self) -> &ObservationOperator {
        &self.obs_op
    }

    pub fn obs_noise(&self) -> &CovarianceMatrix {
        &self.obs_noise
    }

    pub fn state_dim(&self) -> usize {
        self.prior.dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_noise.dim()
    }

    /// `P^f H^T`.
    pub fn cross_covariance(&self) -> &Matrix {
        &self.cross_cov
    }

    pub(crate) fn innovation_matrix(&self) -> &DMatrix<f64> {
        self.innovation.matrix().as_dmatrix()
    }

    pub(crate) fn check_gain(&self, k: &GainMatrix, context: &'static str) -> Result<()> {
        let expected = (self.state_dim(), self.obs_dim());
        if k.matrix().shape() != expected {
            return Err(shape_mismatch(context, expected, k.matrix().shape()));
        }
        Ok(())
    }
}

/// `H P^f H^T + R`, symmetrized.
pub fn innovation_covariance(p: &FilterProblem) -> CovarianceMatrix {
    p.innovation.clone()
}

/// `P^f H^T (H P^f H^T + R)^{-1}`, computed by solving `S X = H P^f` and
/// transposing rather than forming `S^{-1}`.
pub fn analytic_gain(p: &FilterProblem) -> Result<GainMatrix> {
    let h_pf = p.obs_op.matrix().as_dmatrix() * p.prior.matrix().as_dmatrix();
    let x = p.innovation.factor().solve(&h_pf)?;
    Ok(GainMatrix(Matrix::from_dmatrix(x.transpose())?))
}

/// Joseph form `(I - K H) P^f (I - K H)^T + K R K^T`, valid for any gain.
pub fn joseph_update(p: &FilterProblem, k: &GainMatrix) -> Result<CovarianceMatrix> {
    p.check_gain(k, "joseph_update gain")?;
    let pa = joseph_raw(p, k.matrix().as_dmatrix());
    CovarianceMatrix::new(Matrix::from_dmatrix(pa)?)
}

pub(crate) fn joseph_raw(p: &FilterProblem, k: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p.state_dim();
    let a = DMatrix::<f64>::identity(n, n) - k * p.obs_op.matrix().as_dmatrix();
    let pf = p.prior.matrix().as_dmatrix();
    let r = p.obs_noise.matrix().as_dmatrix();
    symmetrized(&(&a * pf * a.transpose() + k * r * k.transpose()))
}
