//! Dense real matrices and symmetric positive-definite covariance matrices.
//!
//! Everything that needs positive-definiteness (determinants, inverses,
//! linear solves, validation) goes through a single Cholesky factorization,
//! which a [`CovarianceMatrix`] computes once at construction and keeps.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_mismatch, GainError, Result};

/// Relative tolerance for the symmetry check.
pub const SYMMETRY_TOL: f64 = 1e-9;
/// Absolute floor on Cholesky pivots.
pub const PD_TOL: f64 = 1e-12;

/// Dense real matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix(DMatrix<f64>);

impl Matrix {
    /// Builds a matrix from row-major entries.
    pub fn from_row_slice(rows: usize, cols: usize, entries: &[f64]) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(GainError::InvalidParameter(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if entries.len() != rows * cols {
            return Err(GainError::DimensionMismatch {
                context: "Matrix::from_row_slice",
                expected: format!("{} entries", rows * cols),
                actual: format!("{} entries", entries.len()),
            });
        }
        Self::from_dmatrix(DMatrix::from_row_slice(rows, cols, entries))
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut entries = Vec::with_capacity(nrows * ncols);
        for row in rows {
            let row = row.as_ref();
            if row.len() != ncols {
                return Err(GainError::DimensionMismatch {
                    context: "Matrix::from_rows",
                    expected: format!("rows of length {ncols}"),
                    actual: format!("row of length {}", row.len()),
                });
            }
            entries.extend_from_slice(row);
        }
        Self::from_row_slice(nrows, ncols, &entries)
    }

    /// Wraps an nalgebra matrix, rejecting empty shapes and non-finite entries.
    pub fn from_dmatrix(inner: DMatrix<f64>) -> Result<Self> {
        if inner.nrows() == 0 || inner.ncols() == 0 {
            return Err(GainError::InvalidParameter(
                "matrix dimensions must be positive".into(),
            ));
        }
        for j in 0..inner.ncols() {
            for i in 0..inner.nrows() {
                if !inner[(i, j)].is_finite() {
                    return Err(GainError::NonFinite { row: i, col: j });
                }
            }
        }
        Ok(Self(inner))
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self(DMatrix::zeros(rows, cols))
    }

    pub fn identity(dim: usize) -> Self {
        Self(DMatrix::identity(dim, dim))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        Self::from_dmatrix(m)
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn is_square(&self) -> bool {
        self.0.is_square()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    pub fn as_dmatrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_dmatrix(self) -> DMatrix<f64> {
        self.0
    }

    /// Row-major copy of the entries.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.transpose().as_slice().to_vec()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Self> {
        if self.ncols() != rhs.nrows() {
            return Err(shape_mismatch(
                "matmul",
                (self.ncols(), rhs.ncols()),
                rhs.shape(),
            ));
        }
        Ok(Self(&self.0 * &rhs.0))
    }

    pub fn add(&self, rhs: &Matrix) -> Result<Self> {
        self.check_same_shape(rhs, "add")?;
        Ok(Self(&self.0 + &rhs.0))
    }

    pub fn sub(&self, rhs: &Matrix) -> Result<Self> {
        self.check_same_shape(rhs, "sub")?;
        Ok(Self(&self.0 - &rhs.0))
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self(&self.0 * factor)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Frobenius inner product `sum_ij a_ij * b_ij`.
    pub fn frobenius_inner(&self, rhs: &Matrix) -> Result<f64> {
        self.check_same_shape(rhs, "frobenius_inner")?;
        Ok(self.0.dot(&rhs.0))
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.nrows().min(self.ncols()))
            .map(|i| self.0[(i, i)])
            .collect()
    }

    fn check_same_shape(&self, rhs: &Matrix, context: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(shape_mismatch(context, self.shape(), rhs.shape()));
        }
        Ok(())
    }
}

/// Sum of the diagonal entries of a square matrix.
pub fn trace(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(shape_mismatch("trace", (m.nrows(), m.nrows()), m.shape()));
    }
    Ok(m.0.trace())
}

/// `(m + m^T) / 2`.
pub fn symmetrize(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(shape_mismatch(
            "symmetrize",
            (m.nrows(), m.nrows()),
            m.shape(),
        ));
    }
    Ok(Matrix(symmetrized(&m.0)))
}

pub(crate) fn symmetrized(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Lower-triangular Cholesky factor `L` with `L * L^T = A`.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    lower: DMatrix<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    pub fn lower(&self) -> Matrix {
        Matrix(self.lower.clone())
    }

    /// `L * L^T`.
    pub fn reconstruct(&self) -> Matrix {
        Matrix(&self.lower * self.lower.transpose())
    }

    /// `2 * sum_i log(L_ii)`.
    pub fn log_det(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.lower[(i, i)].ln()).sum::<f64>()
    }

    /// Solves `A X = B` column by column with forward then backward substitution.
    pub fn solve(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let mut x = self.solve_lower(rhs)?;
        let n = self.dim();
        for c in 0..x.ncols() {
            for i in (0..n).rev() {
                let mut acc = x[(i, c)];
                for k in i + 1..n {
                    acc -= self.lower[(k, i)] * x[(k, c)];
                }
                x[(i, c)] = acc / self.lower[(i, i)];
            }
        }
        Ok(x)
    }

    /// Solves `L Y = B`.
    pub fn solve_lower(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let n = self.dim();
        if rhs.nrows() != n {
            return Err(shape_mismatch(
                "cholesky solve",
                (n, rhs.ncols()),
                rhs.shape(),
            ));
        }
        let mut y = rhs.clone();
        for c in 0..y.ncols() {
            for i in 0..n {
                let mut acc = y[(i, c)];
                for k in 0..i {
                    acc -= self.lower[(i, k)] * y[(k, c)];
                }
                y[(i, c)] = acc / self.lower[(i, i)];
            }
        }
        Ok(y)
    }

    /// `L^{-1} S L^{-T}` for a symmetric `S`, symmetrized.
    pub(crate) fn whiten(&self, s: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let left = self.solve_lower(s)?;
        let both = self.solve_lower(&left.transpose())?;
        Ok(symmetrized(&both))
    }
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let gap = (m[(i, j)] - m[(j, i)]).abs();
            if gap > SYMMETRY_TOL * m[(i, j)].abs().max(1.0) || gap.is_nan() {
                return Err(GainError::NotSymmetric {
                    row: i,
                    col: j,
                    gap,
                });
            }
        }
    }
    Ok(())
}

/// Factors a symmetric positive-definite matrix.
///
/// Only the lower triangle is read once the symmetry check has passed.
pub fn cholesky(m: &Matrix) -> Result<CholeskyFactor> {
    if !m.is_square() {
        return Err(shape_mismatch(
            "cholesky",
            (m.nrows(), m.nrows()),
            m.shape(),
        ));
    }
    check_symmetric(&m.0)?;
    factor_lower(&m.0, 0.0)
}

/// Cholesky of `shift * I + a` reading the lower triangle of `a`.
///
/// Pivots are accumulated relative to `shift`, so with `shift = 1` and a
/// small `a` the returned log-determinant keeps full relative precision.
fn factor_lower(a: &DMatrix<f64>, shift: f64) -> Result<CholeskyFactor> {
    let (lower, _) = factor_with_excess(a, shift)?;
    Ok(CholeskyFactor { lower })
}

fn factor_with_excess(a: &DMatrix<f64>, shift: f64) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = a.nrows();
    let mut lower = DMatrix::<f64>::zeros(n, n);
    let mut excess = Vec::with_capacity(n);
    for j in 0..n {
        let mut e = a[(j, j)];
        for k in 0..j {
            e -= lower[(j, k)] * lower[(j, k)];
        }
        let pivot = shift + e;
        if !(pivot > PD_TOL) || !pivot.is_finite() {
            return Err(GainError::NotPositiveDefinite { index: j, pivot });
        }
        let ljj = pivot.sqrt();
        lower[(j, j)] = ljj;
        for i in j + 1..n {
            let mut acc = a[(i, j)];
            for k in 0..j {
                acc -= lower[(i, k)] * lower[(j, k)];
            }
            lower[(i, j)] = acc / ljj;
        }
        excess.push(e);
    }
    Ok((lower, excess))
}

/// `log det(I + m)` for symmetric `m`, accurate when `m` is small.
pub fn log_det_identity_plus(m: &Matrix) -> Result<f64> {
    if !m.is_square() {
        return Err(shape_mismatch(
            "log_det_identity_plus",
            (m.nrows(), m.nrows()),
            m.shape(),
        ));
    }
    check_symmetric(&m.0)?;
    let (_, excess) = factor_with_excess(&m.0, 1.0)?;
    Ok(excess.iter().map(|e| e.ln_1p()).sum())
}

/// Symmetric positive-definite matrix together with its Cholesky factor.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceMatrix {
    inner: Matrix,
    factor: CholeskyFactor,
}

impl CovarianceMatrix {
    /// Validates symmetry and positive-definiteness.
    pub fn new(inner: Matrix) -> Result<Self> {
        let factor = cholesky(&inner)?;
        Ok(Self { inner, factor })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(Matrix::from_diagonal(diag)?)
    }

    pub fn identity(dim: usize) -> Self {
        Self::new(Matrix::identity(dim)).expect("identity is positive definite")
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.inner
    }

    pub fn factor(&self) -> &CholeskyFactor {
        &self.factor
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.inner.get(row, col)
    }

    /// Product of the diagonal entries, the Hadamard upper bound on `det`.
    pub fn diagonal_product(&self) -> f64 {
        self.inner.diagonal().iter().product()
    }
}

/// Lower Cholesky factor of an already validated covariance.
pub fn cholesky_factor(m: &CovarianceMatrix) -> &CholeskyFactor {
    m.factor()
}

pub fn log_det(m: &CovarianceMatrix) -> f64 {
    m.factor.log_det()
}

pub fn det(m: &CovarianceMatrix) -> f64 {
    log_det(m).exp()
}

/// Inverse through the Cholesky factor, symmetrized and revalidated.
pub fn inverse(m: &CovarianceMatrix) -> Result<CovarianceMatrix> {
    let n = m.dim();
    let inv = m.factor.solve(&DMatrix::identity(n, n))?;
    CovarianceMatrix::new(Matrix(symmetrized(&inv)))
}

/// Seeded SPD matrix `Q diag(lambda) Q^T` with log-evenly spaced eigenvalues in
/// `[1/sqrt(cond_target), sqrt(cond_target)]` and `Q` from the QR decomposition
/// of a standard Gaussian matrix.
pub fn random_spd(dim: usize, seed: u64, cond_target: f64) -> Result<CovarianceMatrix> {
    if dim == 0 {
        return Err(GainError::InvalidParameter("dim must be at least 1".into()));
    }
    if !(cond_target >= 1.0) || !cond_target.is_finite() {
        return Err(GainError::InvalidParameter(format!(
            "cond_target must be a finite value >= 1, got {cond_target}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = DMatrix::<f64>::from_fn(dim, dim, |_, _| StandardNormal.sample(&mut rng));
    let q = gaussian.qr().q();
    let log_cond = cond_target.ln();
    let eigenvalues: Vec<f64> = (0..dim)
        .map(|i| {
            if dim == 1 {
                1.0
            } else {
                let t = i as f64 / (dim - 1) as f64;
                (log_cond * (t - 0.5)).exp()
            }
        })
        .collect();
    let scaled = DMatrix::from_fn(dim, dim, |i, j| q[(i, j)] * eigenvalues[j]);
    let spd = symmetrized(&(scaled * q.transpose()));
    CovarianceMatrix::new(Matrix::from_dmatrix(spd)?)
}
