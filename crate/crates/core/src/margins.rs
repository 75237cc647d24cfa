//! Invariant marginal distributions `G_j` and the normal-score map.
//!
//! The nonparametric estimator is a Gaussian-kernel density estimate with a
//! Silverman pilot bandwidth, Abramson square-root local bandwidth factors and
//! reflection at finite support bounds, tabulated on a uniform grid.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::math;

/// Number of tabulation points of a fitted kernel margin.
pub const KDE_GRID_POINTS: usize = 2048;
/// Grid extension beyond the extreme samples, in pilot bandwidths.
pub const KDE_TAIL_BANDWIDTHS: f64 = 4.0;
/// Probabilities are clamped to `[eps, 1 - eps]` before the normal quantile.
pub const Z_CLAMP: f64 = 1e-12;
/// Minimum sample size accepted by [`fit_margin`].
pub const MIN_KDE_SAMPLES: usize = 30;

/// Support interval; infinite ends are encoded as `f64::INFINITY` / `NEG_INFINITY`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub const UNBOUNDED: Bounds = Bounds { lower: f64::NEG_INFINITY, upper: f64::INFINITY };

    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        if lower.is_nan() || upper.is_nan() || lower >= upper {
            bail!(Input, "invalid support bounds [{lower}, {upper}]");
        }
        Ok(Self { lower, upper })
    }

    pub fn lower_bounded(lower: f64) -> Self {
        Self { lower, upper: f64::INFINITY }
    }

    pub fn contains(&self, y: f64) -> bool {
        y >= self.lower && y <= self.upper
    }
}

/// A tabulated density with its cumulative distribution on a fixed grid.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeMargin {
    pub bounds: Bounds,
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub cdf: Vec<f64>,
}

impl KdeMargin {
    /// Largest index `k` with `grid[k] <= y`, clamped to a valid cell.
    fn cell(&self, y: f64) -> usize {
        let n = self.grid.len();
        let k = self.grid.partition_point(|&g| g <= y);
        k.saturating_sub(1).min(n - 2)
    }

    pub fn cdf(&self, y: f64) -> f64 {
        let n = self.grid.len();
        if y <= self.grid[0] {
            return 0.0;
        }
        if y >= self.grid[n - 1] {
            return 1.0;
        }
        let k = self.cell(y);
        let t = (y - self.grid[k]) / (self.grid[k + 1] - self.grid[k]);
        self.cdf[k] + t * (self.cdf[k + 1] - self.cdf[k])
    }

    pub fn pdf(&self, y: f64) -> f64 {
        let n = self.grid.len();
        if y < self.grid[0] || y > self.grid[n - 1] {
            return 0.0;
        }
        let k = self.cell(y);
        let t = (y - self.grid[k]) / (self.grid[k + 1] - self.grid[k]);
        self.density[k] + t * (self.density[k + 1] - self.density[k])
    }

    /// Generalized inverse `inf { y : G(y) >= u }` of the interpolated CDF.
    pub fn quantile(&self, u: f64) -> f64 {
        let k = self.cdf.partition_point(|&c| c < u);
        if k == 0 {
            return self.grid[0];
        }
        if k >= self.grid.len() {
            return self.grid[self.grid.len() - 1];
        }
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        self.grid[k - 1] + (u - c0) / (c1 - c0) * (self.grid[k] - self.grid[k - 1])
    }
}

/// Marginal distribution of one response.
#[derive(Debug, Clone, PartialEq)]
pub enum Margin {
    Tabulated(KdeMargin),
    Normal { mean: f64, sd: f64 },
    LogNormal { meanlog: f64, sdlog: f64 },
    Exponential { rate: f64 },
    /// Law of `ln X` for `X ~ InverseGamma(shape, scale)`.
    LogInverseGamma { shape: f64, scale: f64 },
    /// `G(y) = 1 - (1 - y^a)^b` on `[0, 1]`.
    Kumaraswamy { a: f64, b: f64 },
}

impl Margin {
    pub fn normal(mean: f64, sd: f64) -> Result<Self> {
        if !(sd > 0.0) || !mean.is_finite() {
            bail!(Input, "normal margin needs a finite mean and sd > 0");
        }
        Ok(Margin::Normal { mean, sd })
    }

    pub fn support(&self) -> Bounds {
        match self {
            Margin::Tabulated(k) => k.bounds,
            Margin::LogNormal { .. } | Margin::Exponential { .. } => Bounds::lower_bounded(0.0),
            Margin::Kumaraswamy { .. } => Bounds { lower: 0.0, upper: 1.0 },
            Margin::Normal { .. } | Margin::LogInverseGamma { .. } => Bounds::UNBOUNDED,
        }
    }

    pub fn cdf(&self, y: f64) -> f64 {
        match *self {
            Margin::Tabulated(ref k) => k.cdf(y),
            Margin::Normal { mean, sd } => math::norm_cdf((y - mean) / sd),
            Margin::LogNormal { meanlog, sdlog } => {
                if y <= 0.0 {
                    0.0
                } else {
                    math::norm_cdf((math::ln(y) - meanlog) / sdlog)
                }
            }
            Margin::Exponential { rate } => {
                if y <= 0.0 {
                    0.0
                } else {
                    -math::expm1(-rate * y)
                }
            }
            Margin::LogInverseGamma { shape, scale } => math::gamma_q(shape, scale * math::exp(-y)),
            Margin::Kumaraswamy { a, b } => {
                if y <= 0.0 {
                    0.0
                } else if y >= 1.0 {
                    1.0
                } else {
                    -math::expm1(b * math::ln1p(-math::powf(y, a)))
                }
            }
        }
    }

    pub fn pdf(&self, y: f64) -> f64 {
        match *self {
            Margin::Tabulated(ref k) => k.pdf(y),
            Margin::Normal { mean, sd } => math::norm_pdf((y - mean) / sd) / sd,
            Margin::LogNormal { meanlog, sdlog } => {
                if y <= 0.0 {
                    0.0
                } else {
                    math::norm_pdf((math::ln(y) - meanlog) / sdlog) / (sdlog * y)
                }
            }
            Margin::Exponential { rate } => {
                if y < 0.0 {
                    0.0
                } else {
                    rate * math::exp(-rate * y)
                }
            }
            Margin::LogInverseGamma { shape, scale } => math::exp(
                shape * math::ln(scale) - math::lgamma(shape) - shape * y - scale * math::exp(-y),
            ),
            Margin::Kumaraswamy { a, b } => {
                if y <= 0.0 || y >= 1.0 {
                    0.0
                } else {
                    let ya = math::powf(y, a);
                    a * b * ya / y * math::powf(1.0 - ya, b - 1.0)
                }
            }
        }
    }

    /// Quantile function; `u` must lie in `[0, 1]`.
    pub fn quantile(&self, u: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&u) {
            bail!(Input, "probability {u} outside [0, 1]");
        }
        Ok(match *self {
            Margin::Tabulated(ref k) => k.quantile(u),
            Margin::Normal { mean, sd } => mean + sd * math::norm_quantile(u),
            Margin::LogNormal { meanlog, sdlog } => math::exp(meanlog + sdlog * math::norm_quantile(u)),
            Margin::Exponential { rate } => -math::ln1p(-u) / rate,
            Margin::Kumaraswamy { a, b } => {
                math::powf(-math::expm1(math::ln1p(-u) / b), 1.0 / a)
            }
            Margin::LogInverseGamma { .. } => {
                if u == 0.0 {
                    f64::NEG_INFINITY
                } else if u == 1.0 {
                    f64::INFINITY
                } else {
                    self.invert_smooth(u)
                }
            }
        })
    }

    /// Safeguarded Newton inversion for smooth margins without a closed-form quantile.
    fn invert_smooth(&self, u: f64) -> f64 {
        let (mut lo, mut hi) = (-1.0, 1.0);
        if let Margin::LogInverseGamma { shape, scale } = *self {
            let centre = math::ln(scale / shape);
            lo = centre - 1.0;
            hi = centre + 1.0;
        }
        let mut step = 1.0;
        while self.cdf(lo) > u {
            step *= 2.0;
            lo -= step;
        }
        step = 1.0;
        while self.cdf(hi) < u {
            step *= 2.0;
            hi += step;
        }
        let mut y = 0.5 * (lo + hi);
        for _ in 0..200 {
            let f = self.cdf(y) - u;
            if f > 0.0 {
                hi = y;
            } else {
                lo = y;
            }
            let d = self.pdf(y);
            let mut next = if d > 0.0 { y - f / d } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - y).abs() <= 1e-14 * (1.0 + y.abs()) || hi - lo <= 1e-14 * (1.0 + y.abs()) {
                return next;
            }
            y = next;
        }
        y
    }

    /// Normal score `Phi^{-1}(G(y))` with `G(y)` clamped to `[Z_CLAMP, 1 - Z_CLAMP]`.
    pub fn to_z(&self, y: f64) -> f64 {
        math::norm_quantile(self.cdf(y).clamp(Z_CLAMP, 1.0 - Z_CLAMP))
    }

    /// Inverse of [`Margin::to_z`]: `G^{-1}(Phi(z))`, using the same clamp.
    pub fn from_z(&self, z: f64) -> f64 {
        let u = math::norm_cdf(z).clamp(Z_CLAMP, 1.0 - Z_CLAMP);
        self.quantile(u).expect("clamped probability lies in [0, 1]")
    }
}

fn kernel_sum(y: f64, samples: &[f64], bandwidths: &[f64], bounds: Bounds) -> f64 {
    let lower = bounds.lower.is_finite();
    let upper = bounds.upper.is_finite();
    let mut acc = 0.0;
    for (&x, &h) in samples.iter().zip(bandwidths) {
        let mut term = gauss_kernel((y - x) / h);
        if lower {
            term += gauss_kernel((y - (2.0 * bounds.lower - x)) / h);
        }
        if upper {
            term += gauss_kernel((y - (2.0 * bounds.upper - x)) / h);
        }
        acc += term / h;
    }
    acc / samples.len() as f64
}

#[inline]
fn gauss_kernel(u: f64) -> f64 {
    if u.abs() > 12.0 {
        0.0
    } else {
        math::norm_pdf(u)
    }
}

/// Fit a bounded adaptive kernel density estimate to `samples`.
pub fn fit_margin(samples: &[f64], bounds: Bounds) -> Result<KdeMargin> {
    let n = samples.len();
    if n < MIN_KDE_SAMPLES {
        bail!(Input, "kernel margin needs at least {MIN_KDE_SAMPLES} samples, got {n}");
    }
    if let Some(bad) = samples.iter().find(|v| !v.is_finite()) {
        bail!(Input, "non-finite sample {bad}");
    }
    if let Some(out) = samples.iter().find(|&&v| !bounds.contains(v)) {
        bail!(Input, "sample {out} outside support [{}, {}]", bounds.lower, bounds.upper);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) {
        bail!(Estimation, "samples have zero variance");
    }
    let sd = math::sqrt(var);
    let iqr = math::quantile_sorted(&sorted, 0.75) - math::quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    let h = 0.9 * spread * math::powf(n as f64, -0.2);

    let lo = bounds.lower.max(sorted[0] - KDE_TAIL_BANDWIDTHS * h);
    let hi = bounds.upper.min(sorted[n - 1] + KDE_TAIL_BANDWIDTHS * h);
    let m = KDE_GRID_POINTS;
    let step = (hi - lo) / (m - 1) as f64;
    let mut grid: Vec<f64> = (0..m).map(|k| lo + step * k as f64).collect();
    grid[m - 1] = hi;

    let pilot_bw = vec![h; n];
    let pilot: Vec<f64> = grid.iter().map(|&y| kernel_sum(y, samples, &pilot_bw, bounds)).collect();
    let pilot_at = |x: f64| {
        let k = (((x - lo) / step) as usize).min(m - 2);
        let t = (x - grid[k]) / step;
        pilot[k] + t * (pilot[k + 1] - pilot[k])
    };
    let at_samples: Vec<f64> = samples.iter().map(|&x| pilot_at(x)).collect();
    if at_samples.iter().any(|v| !(*v > 0.0)) {
        bail!(Estimation, "pilot density vanished at a sample");
    }
    let log_geo = at_samples.iter().map(|&v| math::ln(v)).sum::<f64>() / n as f64;
    let bandwidths: Vec<f64> =
        at_samples.iter().map(|&v| h * math::exp(-0.5 * (math::ln(v) - log_geo))).collect();

    let mut density: Vec<f64> = grid.iter().map(|&y| kernel_sum(y, samples, &bandwidths, bounds)).collect();
    let mut cdf = vec![0.0; m];
    for k in 1..m {
        cdf[k] = cdf[k - 1] + 0.5 * (density[k - 1] + density[k]) * (grid[k] - grid[k - 1]);
    }
    let total = cdf[m - 1];
    if !(total > 0.0) || !total.is_finite() {
        bail!(Estimation, "kernel density has no mass on the grid");
    }
    for (g, c) in density.iter_mut().zip(cdf.iter_mut()) {
        *g /= total;
        *c /= total;
    }
    cdf[m - 1] = 1.0;
    Ok(KdeMargin { bounds, grid, density, cdf })
}
