//! Small dense helpers on top of `nalgebra`.

use core::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{bail, Result};
use crate::math;

/// Eigenvalue floor applied before inverting correlation matrices.
pub const EIGEN_FLOOR: f64 = 1e-10;
/// Largest condition number accepted for a correlation matrix.
pub const MAX_CONDITION: f64 = 1e12;

static EIGEN_CLAMPS: AtomicU64 = AtomicU64::new(0);

/// Number of times an eigenvalue was raised to [`EIGEN_FLOOR`] since process start.
pub fn eigen_clamp_count() -> u64 {
    EIGEN_CLAMPS.load(Ordering::Relaxed)
}

/// Apply a scalar function to the spectrum of a symmetric matrix.
pub fn sym_apply(a: &DMatrix<f64>, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let q = &eig.eigenvectors;
    let mut scaled = q.clone();
    for (mut col, &lam) in scaled.column_iter_mut().zip(eig.eigenvalues.iter()) {
        col *= f(lam);
    }
    scaled * q.transpose()
}

pub fn sym_exp(a: &DMatrix<f64>) -> DMatrix<f64> {
    sym_apply(a, math::exp)
}

pub fn sym_log(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(a.clone());
    if eig.eigenvalues.iter().any(|&l| l <= 0.0 || !l.is_finite()) {
        bail!(Numerical, "matrix logarithm of a non positive definite matrix");
    }
    Ok(sym_apply(a, math::ln))
}

/// Inverse and log-determinant of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdInverse {
    pub inverse: DMatrix<f64>,
    pub log_det: f64,
}

impl SpdInverse {
    /// Eigen-decomposition based inverse with eigenvalues floored at
    /// [`EIGEN_FLOOR`]; fails when the condition number exceeds [`MAX_CONDITION`].
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let eig = SymmetricEigen::new(a.clone());
        let max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        if !(max > 0.0) || !max.is_finite() || !min.is_finite() || min < max / MAX_CONDITION {
            bail!(Numerical, "matrix is numerically singular (eigenvalues in [{min:e}, {max:e}])");
        }
        let q = &eig.eigenvectors;
        let mut scaled = q.clone();
        let mut log_det = 0.0;
        for (mut col, &lam) in scaled.column_iter_mut().zip(eig.eigenvalues.iter()) {
            let lam = if lam < EIGEN_FLOOR {
                EIGEN_CLAMPS.fetch_add(1, Ordering::Relaxed);
                EIGEN_FLOOR
            } else {
                lam
            };
            log_det += math::ln(lam);
            col /= lam;
        }
        let mut inverse = scaled * q.transpose();
        symmetrize(&mut inverse);
        Ok(Self { inverse, log_det })
    }
}

pub fn symmetrize(a: &mut DMatrix<f64>) {
    let n = a.nrows();
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Dense Cholesky factor `L` with `A = L L^T`.
pub fn cholesky(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    match a.clone().cholesky() {
        Some(c) => Ok(c.l()),
        None => bail!(Numerical, "Cholesky factorization failed: matrix not positive definite"),
    }
}

/// Ridge regression coefficients `(F^T F + ridge I)^{-1} F^T Y` for every column of `y`.
pub fn ridge(f: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let mut gram = f.transpose() * f;
    for i in 0..gram.nrows() {
        gram[(i, i)] += ridge;
    }
    let rhs = f.transpose() * y;
    match gram.cholesky() {
        Some(c) => Ok(c.solve(&rhs)),
        None => bail!(Numerical, "ridge system is not positive definite"),
    }
}

pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Multivariate normal log density given the Cholesky factor `L` of the covariance.
pub fn mvn_ln_pdf_chol(x: &DVector<f64>, mean: &DVector<f64>, l: &DMatrix<f64>) -> f64 {
    let d = x.len();
    let diff = x - mean;
    let sol = l
        .solve_lower_triangular(&diff)
        .unwrap_or_else(|| DVector::from_element(d, f64::NAN));
    let log_det: f64 = (0..d).map(|i| math::ln(l[(i, i)])).sum::<f64>() * 2.0;
    -0.5 * (d as f64 * math::LN_2PI + log_det + sol.norm_squared())
}
