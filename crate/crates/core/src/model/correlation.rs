//! The two parameterizations of the cross-equation correlation matrix.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::error::{bail, Result};
use crate::linalg;
use crate::math;

/// Stopping tolerance on the largest diagonal correction of the fixed-point recursion.
pub const MATRIX_LOG_TOL: f64 = 1e-12;
pub const MATRIX_LOG_MAX_ITER: usize = 200;
/// Central-difference step of the matrix-logarithm Jacobian.
pub const FD_JACOBIAN_STEP: f64 = 1e-6;

const POLISH_TOL: f64 = 1e-14;

/// Strict lower triangle of a square matrix in column-major order.
pub fn vecl(a: &DMatrix<f64>) -> Vec<f64> {
    let p = a.nrows();
    let mut out = Vec::with_capacity(p * (p.saturating_sub(1)) / 2);
    for c in 0..p {
        for r in c + 1..p {
            out.push(a[(r, c)]);
        }
    }
    out
}

fn log_matrix(v: &[f64], d: &[f64]) -> DMatrix<f64> {
    let p = d.len();
    let mut a = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(d));
    let mut idx = 0;
    for c in 0..p {
        for r in c + 1..p {
            a[(r, c)] = v[idx];
            a[(c, r)] = v[idx];
            idx += 1;
        }
    }
    a
}

/// Converged state of the diagonal fixed-point recursion.
#[derive(Debug, Clone)]
pub struct MatrixLogSolution {
    pub sigma: DMatrix<f64>,
    pub diag: Vec<f64>,
    pub iterations: usize,
}

enum Stop {
    Strict,
    Polish,
}

fn solve(v: &[f64], start: Vec<f64>, stop: Stop) -> Result<MatrixLogSolution> {
    let p = start.len();
    let mut d = start;
    let mut previous = f64::INFINITY;
    for it in 1..=MATRIX_LOG_MAX_ITER {
        let e = linalg::sym_exp(&log_matrix(v, &d));
        let mut drift: f64 = 0.0;
        for (i, di) in d.iter_mut().enumerate() {
            let step = math::ln(e[(i, i)]);
            *di -= step;
            drift = drift.max(step.abs());
        }
        if !drift.is_finite() {
            break;
        }
        let done = match stop {
            Stop::Strict => drift < MATRIX_LOG_TOL,
            Stop::Polish => drift < POLISH_TOL || (drift < 1e-12 && drift >= previous),
        };
        if done {
            let mut sigma = linalg::sym_exp(&log_matrix(v, &d));
            let scale: Vec<f64> = (0..p).map(|i| 1.0 / math::sqrt(sigma[(i, i)])).collect();
            for c in 0..p {
                for r in 0..p {
                    sigma[(r, c)] *= scale[r] * scale[c];
                }
                sigma[(c, c)] = 1.0;
            }
            linalg::symmetrize(&mut sigma);
            return Ok(MatrixLogSolution { sigma, diag: d, iterations: it });
        }
        previous = drift;
    }
    bail!(
        Numerical,
        "matrix-logarithm recursion did not converge in {MATRIX_LOG_MAX_ITER} iterations for v = {v:?}"
    )
}

fn check_len(v: &[f64], p: usize) -> Result<()> {
    if v.len() != p * (p.saturating_sub(1)) / 2 {
        bail!(Input, "expected {} off-diagonal entries for p = {p}, got {}", p * (p - 1) / 2, v.len());
    }
    if v.iter().any(|x| !x.is_finite()) {
        bail!(Input, "non-finite off-diagonal log-correlation entry");
    }
    Ok(())
}

/// Correlation matrix whose matrix logarithm has strict lower triangle `v`.
pub fn corr_from_v(v: &[f64], p: usize) -> Result<MatrixLogSolution> {
    check_len(v, p)?;
    solve(v, alloc::vec![0.0; p], Stop::Strict)
}

pub(crate) fn corr_from_v_warm(v: &[f64], start: &[f64]) -> Result<MatrixLogSolution> {
    solve(v, start.to_vec(), Stop::Polish)
}

/// `vecl(log Sigma)` for a correlation matrix.
pub fn v_from_corr(sigma: &DMatrix<f64>) -> Result<Vec<f64>> {
    let p = sigma.nrows();
    if sigma.ncols() != p {
        bail!(Input, "correlation matrix must be square");
    }
    for i in 0..p {
        if (sigma[(i, i)] - 1.0).abs() > 1e-8 {
            bail!(Input, "diagonal entry {i} equals {}, expected 1", sigma[(i, i)]);
        }
        for j in 0..i {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-10 {
                bail!(Input, "correlation matrix is not symmetric at ({i}, {j})");
            }
        }
    }
    Ok(vecl(&linalg::sym_log(sigma)?))
}

/// Central-difference Jacobian `d vecl(Sigma) / d v` (rows index `vecl(Sigma)`).
pub fn v_jacobian(v: &[f64], p: usize) -> Result<DMatrix<f64>> {
    let centre = corr_from_v(v, p)?;
    jacobian_at(v, &centre, FD_JACOBIAN_STEP)
}

pub(crate) fn jacobian_at(v: &[f64], centre: &MatrixLogSolution, step: f64) -> Result<DMatrix<f64>> {
    let dim = v.len();
    let mut jac = DMatrix::zeros(dim, dim);
    let mut probe = v.to_vec();
    for b in 0..dim {
        probe[b] = v[b] + step;
        let plus = vecl(&corr_from_v_warm(&probe, &centre.diag)?.sigma);
        probe[b] = v[b] - step;
        let minus = vecl(&corr_from_v_warm(&probe, &centre.diag)?.sigma);
        probe[b] = v[b];
        for a in 0..dim {
            jac[(a, b)] = (plus[a] - minus[a]) / (2.0 * step);
        }
    }
    Ok(jac)
}

/// Lower-trapezoidal `p x k` loading matrix with positive diagonal.
pub fn factor_loadings(p: usize, k: usize, lower: &[f64], log_diag: &[f64]) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(p, k);
    let mut idx = 0;
    for c in 0..k {
        g[(c, c)] = math::exp(log_diag[c]);
        for r in c + 1..p {
            g[(r, c)] = lower[idx];
            idx += 1;
        }
    }
    g
}

/// `diag(U)^{-1/2} U diag(U)^{-1/2}` with `U = G G^T + I`.
pub fn corr_from_factors(p: usize, k: usize, lower: &[f64], log_diag: &[f64]) -> DMatrix<f64> {
    let g = factor_loadings(p, k, lower, log_diag);
    let mut u = &g * g.transpose();
    for i in 0..p {
        u[(i, i)] += 1.0;
    }
    let scale: Vec<f64> = (0..p).map(|i| 1.0 / math::sqrt(u[(i, i)])).collect();
    for c in 0..p {
        for r in 0..p {
            u[(r, c)] *= scale[r] * scale[c];
        }
        u[(c, c)] = 1.0;
    }
    u
}
