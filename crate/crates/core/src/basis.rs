//! Covariate basis expansions: cubic thin-plate radial functions over k-means
//! knots plus low-degree polynomial terms, and the simpler additive and linear
//! variants used for benchmarking.
//!
//! Polynomial terms are ordered by total degree, then lexicographically by
//! exponent vector in descending order, so with covariates `(a, b)` and degree
//! two the block is `a, b, a^2, ab, b^2`. The constant monomial is never
//! included.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use rand::Rng as _;

use crate::error::{bail, Result};
use crate::math;
use crate::rng;

/// Lloyd iterations before giving up on an assignment fixpoint.
pub const KMEANS_MAX_ITER: usize = 300;

/// Per-column centring and scaling applied before any basis evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

impl Standardization {
    pub fn apply(&self, column: usize, value: f64) -> f64 {
        (value - self.means[column]) / self.sds[column]
    }
}

/// Raw covariate matrix (`n` rows by `d` columns) with its standardization.
#[derive(Debug, Clone)]
pub struct RawCovariates {
    data: DMatrix<f64>,
    names: Vec<String>,
    standardization: Standardization,
}

impl RawCovariates {
    pub fn new(data: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        let (n, d) = data.shape();
        if n < 2 {
            bail!(Input, "need at least two covariate rows, got {n}");
        }
        if d == 0 {
            bail!(Input, "covariate matrix has no columns");
        }
        if names.len() != d {
            bail!(Input, "{} column names for {d} covariate columns", names.len());
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            bail!(Input, "non-finite covariate at row {}, column {}", pos % n, pos / n);
        }
        let mut means = Vec::with_capacity(d);
        let mut sds = Vec::with_capacity(d);
        for (c, col) in data.column_iter().enumerate() {
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
            if !(var > 0.0) {
                bail!(Input, "covariate column '{}' has zero variance", names[c]);
            }
            means.push(mean);
            sds.push(math::sqrt(var));
        }
        Ok(Self { data, names, standardization: Standardization { means, sds } })
    }

    /// Wrap unnamed columns, naming them `x1..xd`.
    pub fn unnamed(data: DMatrix<f64>) -> Result<Self> {
        let names = (1..=data.ncols()).map(|i| alloc::format!("x{i}")).collect();
        Self::new(data, names)
    }

    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn standardization(&self) -> &Standardization {
        &self.standardization
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.data.row(i).iter().copied().collect()
    }

    pub fn standardized(&self) -> DMatrix<f64> {
        let mut out = self.data.clone();
        for (c, mut col) in out.column_iter_mut().enumerate() {
            for v in col.iter_mut() {
                *v = self.standardization.apply(c, *v);
            }
        }
        out
    }

    /// Subset of rows; the standardization is recomputed on the subset.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Self::new(self.data.select_rows(rows), self.names.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    /// Multivariate polynomial block plus radial `r^m` terms at k-means knots.
    ThinPlate,
    /// Per-covariate linear term plus univariate radial terms.
    Additive,
    /// Linear terms only.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    pub kind: BasisKind,
    /// Knot count (per covariate for [`BasisKind::Additive`]).
    pub knots: usize,
    /// Maximum total polynomial degree (thin-plate only).
    pub max_degree: u32,
    /// Exponent `m` of the radial function `phi(r) = r^m`.
    pub radial_exponent: i32,
    /// Seed of the k-means initialisation.
    pub seed: u64,
}

impl BasisSpec {
    pub fn thin_plate(knots: usize, seed: u64) -> Self {
        Self { kind: BasisKind::ThinPlate, knots, max_degree: 2, radial_exponent: 3, seed }
    }

    pub fn additive(knots: usize, seed: u64) -> Self {
        Self { kind: BasisKind::Additive, knots, max_degree: 1, radial_exponent: 3, seed }
    }

    pub fn linear() -> Self {
        Self { kind: BasisKind::Linear, knots: 0, max_degree: 1, radial_exponent: 3, seed: 0 }
    }

    /// Number of design columns `q` for `d` covariates.
    pub fn columns(&self, d: usize) -> usize {
        match self.kind {
            BasisKind::ThinPlate => monomial_count(d, self.max_degree) + self.knots,
            BasisKind::Additive => d * (1 + self.knots),
            BasisKind::Linear => d,
        }
    }

    fn validate(&self) -> Result<()> {
        match self.kind {
            BasisKind::ThinPlate => {
                if self.knots == 0 {
                    bail!(Input, "thin-plate basis needs at least one knot");
                }
            }
            BasisKind::Additive => {
                if self.knots == 0 {
                    bail!(Input, "additive basis needs at least one knot per covariate");
                }
            }
            BasisKind::Linear => {}
        }
        if self.radial_exponent < 1 {
            bail!(Input, "radial exponent must be positive, got {}", self.radial_exponent);
        }
        Ok(())
    }
}

/// `C(d + degree, degree) - 1`: monomials of total degree `1..=degree` in `d` variables.
pub fn monomial_count(d: usize, degree: u32) -> usize {
    let mut c: usize = 1;
    for i in 1..=degree as usize {
        c = c * (d + i) / i;
    }
    c - 1
}

/// Exponent vectors of every monomial with total degree `1..=max_degree`, in
/// canonical order.
pub fn monomial_exponents(d: usize, max_degree: u32) -> Vec<Vec<u32>> {
    fn fill(pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
        if pos + 1 == cur.len() {
            cur[pos] = left;
            out.push(cur.clone());
            return;
        }
        for e in (0..=left).rev() {
            cur[pos] = e;
            fill(pos + 1, left - e, cur, out);
        }
    }
    let mut out = Vec::new();
    for deg in 1..=max_degree {
        let mut cur = vec![0; d];
        fill(0, deg, &mut cur, &mut out);
    }
    out
}

/// Everything needed to evaluate a design row for new covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Basis {
    pub spec: BasisSpec,
    pub standardization: Standardization,
    /// Thin-plate knots (`k x d`); univariate knots stacked column-wise
    /// (`k x d`) for the additive basis; empty for linear.
    pub knots: DMatrix<f64>,
    pub monomials: Vec<Vec<u32>>,
}

impl Basis {
    pub fn dim(&self) -> usize {
        self.standardization.means.len()
    }

    pub fn columns(&self) -> usize {
        self.spec.columns(self.dim())
    }

    /// Design row for one raw covariate vector.
    pub fn row(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if x.len() != d {
            bail!(Input, "covariate vector has {} entries, basis expects {d}", x.len());
        }
        if x.iter().any(|v| !v.is_finite()) {
            bail!(Input, "non-finite covariate value");
        }
        let z: Vec<f64> = x.iter().enumerate().map(|(c, &v)| self.standardization.apply(c, v)).collect();
        let mut out = Vec::with_capacity(self.columns());
        let m = self.spec.radial_exponent;
        match self.spec.kind {
            BasisKind::ThinPlate => {
                for exps in &self.monomials {
                    let mut prod = 1.0;
                    for (v, &e) in z.iter().zip(exps) {
                        if e > 0 {
                            prod *= math::powi(*v, e as i32);
                        }
                    }
                    out.push(prod);
                }
                for knot in self.knots.row_iter() {
                    let mut ss = 0.0;
                    for (v, k) in z.iter().zip(knot.iter()) {
                        ss += (v - k) * (v - k);
                    }
                    out.push(radial(math::sqrt(ss), m));
                }
            }
            BasisKind::Additive => {
                for (c, v) in z.iter().enumerate() {
                    out.push(*v);
                    for r in 0..self.knots.nrows() {
                        out.push(radial((v - self.knots[(r, c)]).abs(), m));
                    }
                }
            }
            BasisKind::Linear => out.extend_from_slice(&z),
        }
        Ok(out)
    }
}

#[inline]
fn radial(r: f64, exponent: i32) -> f64 {
    math::powi(r, exponent)
}

/// Design matrix `F` together with the basis that produced it.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub matrix: DMatrix<f64>,
    pub basis: Basis,
}

/// Result of Lloyd's k-means.
#[derive(Debug, Clone)]
pub struct KMeans {
    pub centroids: DMatrix<f64>,
    pub assignment: Vec<usize>,
    /// Within-cluster sum of squares after every assignment step.
    pub wcss_history: Vec<f64>,
    pub converged: bool,
}

fn sq_dist(points: &DMatrix<f64>, i: usize, centroids: &DMatrix<f64>, c: usize) -> f64 {
    let mut s = 0.0;
    for col in 0..points.ncols() {
        let d = points[(i, col)] - centroids[(c, col)];
        s += d * d;
    }
    s
}

fn distinct_rows(points: &DMatrix<f64>) -> usize {
    let mut rows: Vec<Vec<u64>> =
        points.row_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len()
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic for a given seed.
///
/// An empty cluster has its centroid moved to the point farthest from its
/// current centroid.
pub fn kmeans(points: &DMatrix<f64>, k: usize, seed: u64, max_iter: usize) -> Result<KMeans> {
    let (n, d) = points.shape();
    if k == 0 {
        bail!(Input, "k-means needs k >= 1");
    }
    let distinct = distinct_rows(points);
    if k > distinct {
        bail!(Precondition, "requested {k} knots but only {distinct} distinct covariate rows");
    }
    let mut rng = rng::seeded(seed);
    let mut centroids = DMatrix::zeros(k, d);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from(&points.row(first));
    let mut best = vec![f64::INFINITY; n];
    for c in 1..k {
        let mut total = 0.0;
        for i in 0..n {
            best[i] = best[i].min(sq_dist(points, i, &centroids, c - 1));
            total += best[i];
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for i in 0..n {
            if best[i] > 0.0 {
                acc += best[i];
                pick = Some(i);
                if acc >= target {
                    break;
                }
            }
        }
        let pick = pick.expect("distinct-row check guarantees a positive distance");
        centroids.row_mut(c).copy_from(&points.row(pick));
    }

    let mut assignment = vec![usize::MAX; n];
    let mut history = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let mut changed = false;
        let mut wcss = 0.0;
        for i in 0..n {
            let mut arg = 0;
            let mut dist = f64::INFINITY;
            for c in 0..k {
                let dc = sq_dist(points, i, &centroids, c);
                if dc < dist {
                    dist = dc;
                    arg = c;
                }
            }
            if assignment[i] != arg {
                assignment[i] = arg;
                changed = true;
            }
            wcss += dist;
        }
        history.push(wcss);
        if !changed {
            converged = true;
            break;
        }
        let mut sums = DMatrix::<f64>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignment[i]] += 1;
            for col in 0..d {
                sums[(assignment[i], col)] += points[(i, col)];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for col in 0..d {
                    centroids[(c, col)] = sums[(c, col)] / counts[c] as f64;
                }
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                let mut far = 0;
                let mut far_d = -1.0;
                for i in 0..n {
                    let di = sq_dist(points, i, &centroids, assignment[i]);
                    if di > far_d {
                        far_d = di;
                        far = i;
                    }
                }
                centroids.row_mut(c).copy_from(&points.row(far));
                // force a fresh assignment pass
                assignment[far] = usize::MAX;
            }
        }
    }
    Ok(KMeans { centroids, assignment, wcss_history: history, converged })
}

/// Knots for the thin-plate basis: final k-means centroids of the standardized covariates.
pub fn select_knots(x: &RawCovariates, k: usize, seed: u64) -> Result<DMatrix<f64>> {
    Ok(kmeans(&x.standardized(), k, seed, KMEANS_MAX_ITER)?.centroids)
}

/// Build the design matrix `F` (`n x q`) for the given basis.
pub fn build_design(x: &RawCovariates, spec: &BasisSpec) -> Result<DesignMatrix> {
    spec.validate()?;
    let d = x.ncols();
    let std_x = x.standardized();
    let knots = match spec.kind {
        BasisKind::ThinPlate => kmeans(&std_x, spec.knots, spec.seed, KMEANS_MAX_ITER)?.centroids,
        BasisKind::Additive => {
            let mut knots = DMatrix::zeros(spec.knots, d);
            for c in 0..d {
                let col = DMatrix::from_column_slice(std_x.nrows(), 1, std_x.column(c).as_slice());
                let mut centres: Vec<f64> =
                    kmeans(&col, spec.knots, spec.seed.wrapping_add(c as u64), KMEANS_MAX_ITER)?
                        .centroids
                        .iter()
                        .copied()
                        .collect();
                centres.sort_by(|a, b| a.total_cmp(b));
                for (r, v) in centres.into_iter().enumerate() {
                    knots[(r, c)] = v;
                }
            }
            knots
        }
        BasisKind::Linear => DMatrix::zeros(0, d),
    };
    let monomials = match spec.kind {
        BasisKind::ThinPlate => monomial_exponents(d, spec.max_degree),
        _ => Vec::new(),
    };
    let basis = Basis { spec: spec.clone(), standardization: x.standardization().clone(), knots, monomials };
    let n = x.nrows();
    let q = basis.columns();
    let mut matrix = DMatrix::zeros(n, q);
    for i in 0..n {
        let row = basis.row(&x.row(i))?;
        for (c, v) in row.into_iter().enumerate() {
            matrix[(i, c)] = v;
        }
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        bail!(Numerical, "design matrix contains non-finite entries");
    }
    Ok(DesignMatrix { matrix, basis })
}

/// Design row for new raw covariates; identical to the training-row path.
pub fn design_row(x_new: &[f64], basis: &Basis) -> Result<Vec<f64>> {
    basis.row(x_new)
}
