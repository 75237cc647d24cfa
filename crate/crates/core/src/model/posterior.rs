//! Augmented log posterior `log h` and its analytic gradient.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use super::correlation::{corr_from_factors, corr_from_v, factor_loadings, jacobian_at, MatrixLogSolution};
use super::{scale_matrix_sq, AugmentedState, CorrelationParam, Layout, PriorKind, FD_JACOBIAN_STEP};
use crate::error::{bail, Result};
use crate::linalg::SpdInverse;
use crate::math;

pub const GDP_SHAPE: f64 = 3.0;
pub const GDP_SCALE: f64 = 1.0;
/// Inverse-gamma hyperprior on the ridge variance of the matrix-logarithm prior.
pub const SIGMA_V_SHAPE: f64 = 0.001;
pub const SIGMA_V_SCALE: f64 = 0.001;

const LN_2_OVER_PI: f64 = -0.451_582_705_289_454_9;

/// Separate additive pieces of `log h`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogTerms {
    /// Pseudo-response likelihood given the coefficients.
    pub gaussian: f64,
    /// Conditional prior of the coefficients.
    pub beta_prior: f64,
    pub horseshoe_prior: f64,
    pub correlation_prior: f64,
}

impl LogTerms {
    pub fn total(&self) -> f64 {
        self.gaussian + self.beta_prior + self.horseshoe_prior + self.correlation_prior
    }
}

/// Log density of `log x` where `x ~ HalfCauchy(0, exp(log_scale))`.
pub fn log_half_cauchy_log_scale(log_x: f64, log_scale: f64) -> f64 {
    LN_2_OVER_PI - log_scale - math::softplus(2.0 * (log_x - log_scale)) + log_x
}

fn d_half_cauchy(log_x: f64, log_scale: f64) -> f64 {
    1.0 - 2.0 * math::sigmoid(2.0 * (log_x - log_scale))
}

fn gdp_ln_pdf(g: f64) -> f64 {
    math::ln(GDP_SHAPE / (2.0 * GDP_SCALE)) - (GDP_SHAPE + 1.0) * math::ln1p(g.abs() / GDP_SCALE)
}

fn gdp_d(g: f64) -> f64 {
    let sign = if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    };
    -(GDP_SHAPE + 1.0) * sign / (GDP_SCALE + g.abs())
}

fn horseshoe_prior(state: &AugmentedState) -> f64 {
    state
        .copula
        .horseshoe
        .iter()
        .map(|h| {
            h.log_xi.iter().map(|&l| log_half_cauchy_log_scale(l, h.log_tau)).sum::<f64>()
                + log_half_cauchy_log_scale(h.log_tau, 0.0)
        })
        .sum()
}

fn correlation_prior(corr: &CorrelationParam) -> f64 {
    match corr {
        CorrelationParam::MatrixLog { v, log_sigma_v2 } => {
            let dim = v.len() as f64;
            let s = *log_sigma_v2;
            let ss: f64 = v.iter().map(|x| x * x).sum();
            -0.5 * dim * (math::LN_2PI + s) - 0.5 * ss * math::exp(-s) + SIGMA_V_SHAPE * math::ln(SIGMA_V_SCALE)
                - math::lgamma(SIGMA_V_SHAPE)
                - SIGMA_V_SHAPE * s
                - SIGMA_V_SCALE * math::exp(-s)
        }
        CorrelationParam::Factor { lower, log_diag, .. } => {
            lower.iter().map(|&g| gdp_ln_pdf(g)).sum::<f64>()
                + log_diag.iter().map(|&l| gdp_ln_pdf(math::exp(l)) + l).sum::<f64>()
        }
    }
}

/// Log prior of the copula parameters (horseshoe and correlation blocks) on the unconstrained scale.
pub fn log_prior_copula(layout: &Layout, eta: &[f64]) -> Result<f64> {
    let state = layout.decode(eta)?;
    Ok(horseshoe_prior(&state) + correlation_prior(&state.copula.correlation))
}

/// Data context of the augmented posterior: normal scores `z` (`n x p`) and design `F` (`n x q`).
#[derive(Debug, Clone)]
pub struct CopulaPosterior {
    layout: Layout,
    z: DMatrix<f64>,
    f: DMatrix<f64>,
    f_sq: DMatrix<f64>,
}

struct Evaluation {
    state: AugmentedState,
    terms: LogTerms,
    s: DMatrix<f64>,
    w: DMatrix<f64>,
    b: DMatrix<f64>,
    xi: DMatrix<f64>,
    xi2: DMatrix<f64>,
    sigma: DMatrix<f64>,
    inv: SpdInverse,
    gram: DMatrix<f64>,
    matrix_log: Option<MatrixLogSolution>,
}

impl CopulaPosterior {
    pub fn new(z: DMatrix<f64>, f: DMatrix<f64>, prior: PriorKind) -> Result<Self> {
        if z.nrows() != f.nrows() {
            bail!(Input, "scores have {} rows but the design has {}", z.nrows(), f.nrows());
        }
        if z.iter().chain(f.iter()).any(|v| !v.is_finite()) {
            bail!(Input, "scores and design must be finite");
        }
        let layout = Layout::new(z.ncols(), f.ncols(), prior)?;
        let f_sq = f.map(|v| v * v);
        Ok(Self { layout, z, f, f_sq })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn scores(&self) -> &DMatrix<f64> {
        &self.z
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.f
    }

    fn evaluate(&self, eta: &[f64]) -> Result<Evaluation> {
        let state = self.layout.decode(eta)?;
        if eta.iter().any(|v| !v.is_finite()) {
            bail!(Numerical, "non-finite state coordinate");
        }
        let (n, p, q) = (self.z.nrows(), self.layout.responses, self.layout.columns);
        let (sigma, matrix_log) = match &state.copula.correlation {
            CorrelationParam::MatrixLog { v, .. } => {
                let sol = corr_from_v(v, p)?;
                (sol.sigma.clone(), Some(sol))
            }
            CorrelationParam::Factor { factors, lower, log_diag } => {
                (corr_from_factors(p, *factors, lower, log_diag), None)
            }
        };
        let inv = SpdInverse::new(&sigma)?;
        let s = scale_matrix_sq(&self.f_sq, &state.copula.horseshoe);
        let w = self.z.component_div(&s) - &self.f * &state.beta;
        let mut xi = DMatrix::zeros(q, p);
        let mut log_xi_sum = 0.0;
        for (j, h) in state.copula.horseshoe.iter().enumerate() {
            for (k, &l) in h.log_xi.iter().enumerate() {
                xi[(k, j)] = math::exp(l);
                log_xi_sum += l;
            }
        }
        let b = state.beta.component_div(&xi);
        let xi2 = xi.map(|v| v * v);
        let wm = w.transpose() * &w;
        let bm = b.transpose() * &b;
        let a = &inv.inverse;
        let log_s_sum: f64 = s.iter().map(|&v| math::ln(v)).sum();
        let gaussian = -0.5 * a.component_mul(&wm).sum()
            - 0.5 * n as f64 * inv.log_det
            - log_s_sum
            - 0.5 * (n * p) as f64 * math::LN_2PI;
        let beta_prior = -0.5 * a.component_mul(&bm).sum()
            - 0.5 * q as f64 * inv.log_det
            - log_xi_sum
            - 0.5 * (p * q) as f64 * math::LN_2PI;
        let terms = LogTerms {
            gaussian,
            beta_prior,
            horseshoe_prior: horseshoe_prior(&state),
            correlation_prior: correlation_prior(&state.copula.correlation),
        };
        if !terms.total().is_finite() {
            bail!(Numerical, "log posterior is not finite");
        }
        Ok(Evaluation { state, terms, s, w, b, xi, xi2, sigma, inv, gram: wm + bm, matrix_log })
    }

    pub fn log_terms(&self, eta: &[f64]) -> Result<LogTerms> {
        Ok(self.evaluate(eta)?.terms)
    }

    /// `log h(eta)` excluding the data-only change-of-variables term.
    pub fn log_h(&self, eta: &[f64]) -> Result<f64> {
        Ok(self.evaluate(eta)?.terms.total())
    }

    pub fn grad_log_h(&self, eta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.log_h_and_grad(eta)?.1)
    }

    pub fn log_h_and_grad(&self, eta: &[f64]) -> Result<(f64, Vec<f64>)> {
        let ev = self.evaluate(eta)?;
        let layout = &self.layout;
        let (n, p, q) = (self.z.nrows(), layout.responses, layout.columns);
        let a = &ev.inv.inverse;
        let mut grad = vec![0.0; layout.dim()];

        let r = &ev.w * a;
        let ba = &ev.b * a;
        let d_beta = self.f.transpose() * &r - ba.component_div(&ev.xi);
        grad[layout.beta_range()].copy_from_slice(d_beta.as_slice());

        let mut c = ev.s.map(|v| v * v);
        for j in 0..p {
            for i in 0..n {
                c[(i, j)] -= r[(i, j)] * self.z[(i, j)] * ev.s[(i, j)];
            }
        }
        let fc = self.f_sq.transpose() * c;
        for (j, h) in ev.state.copula.horseshoe.iter().enumerate() {
            let t = h.log_tau;
            let mut d_tau = 0.0;
            for (k, &l) in h.log_xi.iter().enumerate() {
                let prior = d_half_cauchy(l, t);
                grad[layout.log_xi_index(j, k)] = ev.xi2[(k, j)] * fc[(k, j)] - 1.0 + ev.b[(k, j)] * ba[(k, j)] + prior;
                d_tau -= prior;
            }
            grad[layout.log_tau_index(j)] = d_tau + d_half_cauchy(t, 0.0);
        }

        let mut g_sigma = a * &ev.gram * a * 0.5 - a * (0.5 * (n + q) as f64);
        crate::linalg::symmetrize(&mut g_sigma);
        let block = layout.correlation_range();
        match &ev.state.copula.correlation {
            CorrelationParam::MatrixLog { v, log_sigma_v2 } => {
                let sol = ev.matrix_log.as_ref().expect("matrix-log solution present");
                let jac = jacobian_at(v, sol, FD_JACOBIAN_STEP)?;
                let gv: Vec<f64> = super::vecl(&g_sigma).into_iter().map(|x| 2.0 * x).collect();
                let e = math::exp(-log_sigma_v2);
                let mut ss = 0.0;
                for bidx in 0..v.len() {
                    let chain: f64 = (0..v.len()).map(|aidx| jac[(aidx, bidx)] * gv[aidx]).sum();
                    grad[block.start + bidx] = chain - v[bidx] * e;
                    ss += v[bidx] * v[bidx];
                }
                grad[block.end - 1] =
                    -0.5 * v.len() as f64 + 0.5 * ss * e - SIGMA_V_SHAPE + SIGMA_V_SCALE * e;
            }
            CorrelationParam::Factor { factors, lower, log_diag } => {
                let k = *factors;
                let g = factor_loadings(p, k, lower, log_diag);
                let mut ups = &g * g.transpose();
                for i in 0..p {
                    ups[(i, i)] += 1.0;
                }
                let d: Vec<f64> = (0..p).map(|i| 1.0 / math::sqrt(ups[(i, i)])).collect();
                let gs = &g_sigma * &ev.sigma;
                let mut g_ups = g_sigma.clone();
                for cidx in 0..p {
                    for ridx in 0..p {
                        g_ups[(ridx, cidx)] *= d[ridx] * d[cidx];
                    }
                    g_ups[(cidx, cidx)] -= d[cidx] * d[cidx] * gs[(cidx, cidx)];
                }
                let d_load = 2.0 * g_ups * &g;
                let mut idx = block.start;
                for cidx in 0..k {
                    for ridx in cidx + 1..p {
                        grad[idx] = d_load[(ridx, cidx)] + gdp_d(g[(ridx, cidx)]);
                        idx += 1;
                    }
                }
                for cidx in 0..k {
                    let gd = g[(cidx, cidx)];
                    grad[idx] = (d_load[(cidx, cidx)] + gdp_d(gd)) * gd + 1.0;
                    idx += 1;
                }
            }
        }
        if grad.iter().any(|v| !v.is_finite()) {
            bail!(Numerical, "gradient of the log posterior is not finite");
        }
        Ok((ev.terms.total(), grad))
    }
}
