//! Parameter layout, the horseshoe-scaled SUR prior and the augmented posterior.

mod correlation;
mod posterior;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use nalgebra::DMatrix;

use crate::error::{bail, Result};
use crate::math;

pub use correlation::{
    corr_from_factors, corr_from_v, factor_loadings, v_from_corr, v_jacobian, vecl, MatrixLogSolution,
    FD_JACOBIAN_STEP, MATRIX_LOG_MAX_ITER, MATRIX_LOG_TOL,
};
pub use posterior::{
    log_half_cauchy_log_scale, log_prior_copula, CopulaPosterior, LogTerms, GDP_SHAPE, GDP_SCALE,
    SIGMA_V_SHAPE, SIGMA_V_SCALE,
};

/// Which prior and parameterization is placed on the cross-equation correlation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    /// Strict lower triangle of the matrix logarithm with a ridge prior.
    MatrixLog,
    /// Lower-triangular factor loadings with a generalized double Pareto prior.
    Factor { factors: usize },
}

/// Horseshoe hyperparameters of one equation on the log scale.
#[derive(Debug, Clone, PartialEq)]
pub struct HorseshoeParams {
    pub log_xi: Vec<f64>,
    pub log_tau: f64,
}

impl HorseshoeParams {
    /// Prior variances `xi^2` of the coefficients of this equation.
    pub fn precision_inv(&self) -> Vec<f64> {
        horseshoe_precision_inv(self)
    }
}

/// Unconstrained correlation parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum CorrelationParam {
    MatrixLog {
        v: Vec<f64>,
        log_sigma_v2: f64,
    },
    Factor {
        factors: usize,
        /// Entries strictly below the diagonal, column-major.
        lower: Vec<f64>,
        /// Logarithms of the leading diagonal.
        log_diag: Vec<f64>,
    },
}

impl CorrelationParam {
    /// Correlation matrix implied by the parameters.
    pub fn sigma(&self, p: usize) -> Result<DMatrix<f64>> {
        match self {
            CorrelationParam::MatrixLog { v, .. } => Ok(corr_from_v(v, p)?.sigma),
            CorrelationParam::Factor { factors, lower, log_diag } => {
                Ok(corr_from_factors(p, *factors, lower, log_diag))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CopulaParams {
    pub horseshoe: Vec<HorseshoeParams>,
    pub correlation: CorrelationParam,
}

/// Decoded augmented state: coefficients (`q x p`, column `j` is equation `j`) and copula parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub beta: DMatrix<f64>,
    pub copula: CopulaParams,
}

/// Fixed coordinate layout of the unconstrained vector.
///
/// Order: all coefficients (`beta_1`, then `beta_2`, ...), then for every
/// equation its `q` log local scales followed by its log global scale, then
/// the correlation block (`v` and `log sigma_v^2`, or the strictly lower
/// factor entries followed by the log diagonal).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub responses: usize,
    pub columns: usize,
    pub prior: PriorKind,
}

impl Layout {
    pub fn new(responses: usize, columns: usize, prior: PriorKind) -> Result<Self> {
        if responses == 0 || columns == 0 {
            bail!(Input, "layout needs at least one response and one column");
        }
        if let PriorKind::Factor { factors } = prior {
            if factors == 0 || factors > responses {
                bail!(Input, "factor count {factors} must lie in 1..={responses}");
            }
        }
        Ok(Self { responses, columns, prior })
    }

    pub fn dim(&self) -> usize {
        self.correlation_range().end
    }

    pub fn beta_range(&self) -> Range<usize> {
        0..self.responses * self.columns
    }

    pub fn beta_index(&self, equation: usize, column: usize) -> usize {
        equation * self.columns + column
    }

    pub fn log_xi_index(&self, equation: usize, column: usize) -> usize {
        self.responses * self.columns + equation * (self.columns + 1) + column
    }

    pub fn log_tau_index(&self, equation: usize) -> usize {
        self.log_xi_index(equation, self.columns)
    }

    pub fn horseshoe_range(&self) -> Range<usize> {
        let start = self.responses * self.columns;
        start..start + self.responses * (self.columns + 1)
    }

    /// Number of strictly lower entries of the correlation block.
    pub fn lower_len(&self) -> usize {
        let p = self.responses;
        match self.prior {
            PriorKind::MatrixLog => p * (p - 1) / 2,
            PriorKind::Factor { factors } => (0..factors).map(|c| p - 1 - c).sum(),
        }
    }

    pub fn correlation_range(&self) -> Range<usize> {
        let start = self.horseshoe_range().end;
        let len = match self.prior {
            PriorKind::MatrixLog => self.lower_len() + 1,
            PriorKind::Factor { factors } => self.lower_len() + factors,
        };
        start..start + len
    }

    /// Human-readable coordinate names, one per unconstrained coordinate.
    pub fn names(&self) -> Vec<String> {
        let (p, q) = (self.responses, self.columns);
        let mut out = Vec::with_capacity(self.dim());
        for j in 0..p {
            for k in 0..q {
                out.push(format!("beta[{j},{k}]"));
            }
        }
        for j in 0..p {
            for k in 0..q {
                out.push(format!("log_xi[{j},{k}]"));
            }
            out.push(format!("log_tau[{j}]"));
        }
        match self.prior {
            PriorKind::MatrixLog => {
                for c in 0..p {
                    for r in c + 1..p {
                        out.push(format!("v[{r},{c}]"));
                    }
                }
                out.push(String::from("log_sigma_v2"));
            }
            PriorKind::Factor { factors } => {
                for c in 0..factors {
                    for r in c + 1..p {
                        out.push(format!("g[{r},{c}]"));
                    }
                }
                for c in 0..factors {
                    out.push(format!("log_g[{c},{c}]"));
                }
            }
        }
        out
    }

    pub fn decode(&self, eta: &[f64]) -> Result<AugmentedState> {
        if eta.len() != self.dim() {
            bail!(Input, "state has {} coordinates, layout expects {}", eta.len(), self.dim());
        }
        let (p, q) = (self.responses, self.columns);
        let beta = DMatrix::from_column_slice(q, p, &eta[self.beta_range()]);
        let horseshoe = (0..p)
            .map(|j| {
                let start = self.log_xi_index(j, 0);
                HorseshoeParams { log_xi: eta[start..start + q].to_vec(), log_tau: eta[start + q] }
            })
            .collect();
        let block = &eta[self.correlation_range()];
        let lower = self.lower_len();
        let correlation = match self.prior {
            PriorKind::MatrixLog => {
                CorrelationParam::MatrixLog { v: block[..lower].to_vec(), log_sigma_v2: block[lower] }
            }
            PriorKind::Factor { factors } => CorrelationParam::Factor {
                factors,
                lower: block[..lower].to_vec(),
                log_diag: block[lower..].to_vec(),
            },
        };
        Ok(AugmentedState { beta, copula: CopulaParams { horseshoe, correlation } })
    }

    pub fn encode(&self, state: &AugmentedState) -> Result<Vec<f64>> {
        let (p, q) = (self.responses, self.columns);
        if state.beta.shape() != (q, p) || state.copula.horseshoe.len() != p {
            bail!(Input, "state dimensions do not match the layout");
        }
        let mut out = Vec::with_capacity(self.dim());
        out.extend_from_slice(state.beta.as_slice());
        for h in &state.copula.horseshoe {
            if h.log_xi.len() != q {
                bail!(Input, "horseshoe block has {} local scales, expected {q}", h.log_xi.len());
            }
            out.extend_from_slice(&h.log_xi);
            out.push(h.log_tau);
        }
        let lower = self.lower_len();
        match (&state.copula.correlation, self.prior) {
            (CorrelationParam::MatrixLog { v, log_sigma_v2 }, PriorKind::MatrixLog) if v.len() == lower => {
                out.extend_from_slice(v);
                out.push(*log_sigma_v2);
            }
            (CorrelationParam::Factor { factors, lower: g, log_diag }, PriorKind::Factor { factors: k })
                if *factors == k && g.len() == lower && log_diag.len() == k =>
            {
                out.extend_from_slice(g);
                out.extend_from_slice(log_diag);
            }
            _ => bail!(Input, "correlation parameters do not match the layout"),
        }
        Ok(out)
    }
}

/// `Sigma * D = U^T (Sigma kron I_q) U` for blocks `D_j = U_j^T U_j`.
pub fn star_product(sigma: &DMatrix<f64>, blocks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let p = sigma.nrows();
    if sigma.ncols() != p || blocks.len() != p {
        bail!(Input, "star product needs a square p x p matrix and p blocks");
    }
    let q = blocks.first().map_or(0, |b| b.nrows());
    if crate::linalg::cholesky(sigma).is_err() {
        bail!(Numerical, "star product: correlation matrix is not positive definite");
    }
    let mut factors = Vec::with_capacity(p);
    for (j, b) in blocks.iter().enumerate() {
        if b.shape() != (q, q) {
            bail!(Input, "star product: block {j} has shape {:?}, expected ({q}, {q})", b.shape());
        }
        match crate::linalg::cholesky(b) {
            Ok(l) => factors.push(l),
            Err(_) => bail!(Numerical, "star product: block {j} is not positive definite"),
        }
    }
    let mut out = DMatrix::zeros(p * q, p * q);
    for j in 0..p {
        for l in 0..p {
            let blk = &factors[j] * factors[l].transpose() * sigma[(j, l)];
            out.view_mut((j * q, l * q), (q, q)).copy_from(&blk);
        }
    }
    Ok(out)
}

/// Diagonal of `P_j^{-1}`, that is `xi_{j,k}^2`.
pub fn horseshoe_precision_inv(theta: &HorseshoeParams) -> Vec<f64> {
    theta.log_xi.iter().map(|&l| math::exp(2.0 * l)).collect()
}

/// `(1 + x^T P_j^{-1} x)^{-1/2}` given the diagonal of `P_j^{-1}`.
pub fn scale_factor(x: &[f64], precision_inv: &[f64]) -> f64 {
    let quad: f64 = x.iter().zip(precision_inv).map(|(v, w)| v * v * w).sum();
    1.0 / math::sqrt(1.0 + quad)
}

/// Scale factors for every row of `f` and every equation (`n x p`).
pub fn scale_matrix(f: &DMatrix<f64>, horseshoe: &[HorseshoeParams]) -> DMatrix<f64> {
    let f_sq = f.map(|v| v * v);
    scale_matrix_sq(&f_sq, horseshoe)
}

pub(crate) fn scale_matrix_sq(f_sq: &DMatrix<f64>, horseshoe: &[HorseshoeParams]) -> DMatrix<f64> {
    let q = f_sq.ncols();
    let mut xi2 = DMatrix::zeros(q, horseshoe.len());
    for (j, h) in horseshoe.iter().enumerate() {
        for (k, w) in horseshoe_precision_inv(h).into_iter().enumerate() {
            xi2[(k, j)] = w;
        }
    }
    (f_sq * xi2).map(|v| 1.0 / math::sqrt(1.0 + v))
}

#[cfg(test)]
mod tests;
