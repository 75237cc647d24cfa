use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::*;
use crate::linalg;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

fn random_corr(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
    let a = random_matrix(rng, p, p + 2);
    let cov = &a * a.transpose();
    DMatrix::from_fn(p, p, |i, j| cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt())
}

fn dense_v(sigma: &DMatrix<f64>, f: &DMatrix<f64>, xi2: &[Vec<f64>]) -> DMatrix<f64> {
    let (n, p) = (f.nrows(), sigma.nrows());
    let blocks: Vec<DMatrix<f64>> =
        xi2.iter().map(|d| DMatrix::from_diagonal(&DVector::from_column_slice(d))).collect();
    let prior = star_product(sigma, &blocks).unwrap();
    let x = DMatrix::<f64>::identity(p, p).kronecker(f);
    sigma.kronecker(&DMatrix::<f64>::identity(n, n)) + &x * prior * x.transpose()
}

fn mvn_ln_pdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    linalg::mvn_ln_pdf_chol(x, mean, &linalg::cholesky(cov).unwrap())
}

struct Instance {
    post: CopulaPosterior,
    eta: Vec<f64>,
}

fn instance(rng: &mut ChaCha8Rng, n: usize, p: usize, q: usize, prior: PriorKind) -> Instance {
    let f = random_matrix(rng, n, q);
    let z = random_matrix(rng, n, p);
    let post = CopulaPosterior::new(z, f, prior).unwrap();
    let dim = post.layout().dim();
    let eta: Vec<f64> = (0..dim).map(|_| 0.5 * normal(rng)).collect();
    Instance { post, eta }
}

fn dense_log_h(post: &CopulaPosterior, eta: &[f64]) -> f64 {
    let layout = post.layout();
    let st = layout.decode(eta).unwrap();
    let (n, p) = (post.scores().nrows(), layout.responses);
    let f = post.design();
    let sigma = st.copula.correlation.sigma(p).unwrap();
    let xi2: Vec<Vec<f64>> = st.copula.horseshoe.iter().map(|h| h.precision_inv()).collect();
    let v = dense_v(&sigma, f, &xi2);
    let s = DMatrix::from_diagonal(&v.diagonal().map(|d| 1.0 / d.sqrt()));
    let x = DMatrix::<f64>::identity(p, p).kronecker(f);
    let zvec = DVector::from_column_slice(post.scores().as_slice());
    let bvec = DVector::from_column_slice(st.beta.as_slice());
    let mean = &s * &x * &bvec;
    let cov = &s * sigma.kronecker(&DMatrix::<f64>::identity(n, n)) * &s;
    let blocks: Vec<DMatrix<f64>> =
        xi2.iter().map(|d| DMatrix::from_diagonal(&DVector::from_column_slice(d))).collect();
    let prior_cov = star_product(&sigma, &blocks).unwrap();
    mvn_ln_pdf(&zvec, &mean, &cov)
        + mvn_ln_pdf(&bvec, &DVector::zeros(bvec.len()), &prior_cov)
        + log_prior_copula(layout, eta).unwrap()
}

#[test]
fn layout_is_exact_and_round_trips() {
    let layout = Layout::new(3, 4, PriorKind::MatrixLog).unwrap();
    assert_eq!(layout.dim(), 12 + 15 + 3 + 1);
    assert_eq!(layout.names().len(), layout.dim());
    let eta: Vec<f64> = (0..layout.dim()).map(|i| i as f64 * 0.01).collect();
    let st = layout.decode(&eta).unwrap();
    assert_eq!(layout.encode(&st).unwrap(), eta);
    let mut longer = eta.clone();
    longer.push(0.0);
    assert!(layout.decode(&longer).is_err());
    let fac = Layout::new(4, 2, PriorKind::Factor { factors: 2 }).unwrap();
    assert_eq!(fac.correlation_range().len(), 3 + 2 + 2);
    assert_eq!(fac.names().len(), fac.dim());
    assert!(Layout::new(2, 2, PriorKind::Factor { factors: 3 }).is_err());
}

#[test]
fn star_product_trivial_and_single_block() {
    let eye = star_product(&DMatrix::identity(2, 2), &[DMatrix::identity(3, 3), DMatrix::identity(3, 3)]).unwrap();
    assert_eq!(eye, DMatrix::identity(6, 6));
    let d = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
    let one = star_product(&DMatrix::from_element(1, 1, 0.7), &[d.clone()]).unwrap();
    assert!(linalg::max_abs_diff(&one, &(d * 0.7)) < 1e-14);
}

#[test]
fn star_product_matches_kronecker_construction() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let p = rng.random_range(1..=4);
        let q = rng.random_range(1..=4);
        let sigma = random_corr(&mut rng, p);
        let blocks: Vec<DMatrix<f64>> = (0..p)
            .map(|_| {
                let a = random_matrix(&mut rng, q, q);
                &a * a.transpose() + DMatrix::identity(q, q) * 0.1
            })
            .collect();
        let mut u = DMatrix::zeros(p * q, p * q);
        for (j, b) in blocks.iter().enumerate() {
            let upper = linalg::cholesky(b).unwrap().transpose();
            u.view_mut((j * q, j * q), (q, q)).copy_from(&upper);
        }
        let dense = u.transpose() * sigma.kronecker(&DMatrix::<f64>::identity(q, q)) * &u;
        assert!(linalg::max_abs_diff(&star_product(&sigma, &blocks).unwrap(), &dense) < 1e-10);
    }
}

#[test]
fn star_product_reports_bad_block() {
    let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    let err = star_product(&DMatrix::identity(2, 2), &[DMatrix::identity(2, 2), bad]).unwrap_err();
    assert!(alloc::format!("{err}").contains("block 1"));
}

#[test]
fn horseshoe_variances() {
    let h = HorseshoeParams { log_xi: vec![0.0, 2f64.ln(), -0.3], log_tau: 0.0 };
    let w = h.precision_inv();
    assert_eq!(w[0], 1.0);
    assert!((w[1] - 4.0).abs() < 1e-14);
    assert!((w[2] - (-0.3f64).exp().powi(2)).abs() < 1e-15);
}

#[test]
fn scale_factor_spot_values() {
    assert_eq!(scale_factor(&[0.0, 0.0], &[3.0, 1.0]), 1.0);
    assert!((scale_factor(&[1.0, 1.0], &[2.0, 1.0]) - 0.5).abs() < 1e-15);
}

#[test]
fn scale_factor_matches_dense_v() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, p, q) = (10, 2, 3);
    let f = random_matrix(&mut rng, n, q);
    let sigma = random_corr(&mut rng, p);
    let hs: Vec<HorseshoeParams> = (0..p)
        .map(|_| HorseshoeParams { log_xi: (0..q).map(|_| 0.5 * normal(&mut rng)).collect(), log_tau: 0.0 })
        .collect();
    let xi2: Vec<Vec<f64>> = hs.iter().map(|h| h.precision_inv()).collect();
    let v = dense_v(&sigma, &f, &xi2);
    let s = scale_matrix(&f, &hs);
    for j in 0..p {
        for i in 0..n {
            assert!((s[(i, j)] - 1.0 / v[(j * n + i, j * n + i)].sqrt()).abs() < 1e-10);
        }
    }
}

#[test]
fn matrix_log_closed_form_two_by_two() {
    let sol = corr_from_v(&[0.5f64.atanh()], 2).unwrap();
    assert!((sol.sigma[(1, 0)] - 0.5).abs() < 1e-10);
    for rho in [-0.9, -0.5, 0.0, 0.5, 0.9] {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]);
        assert!((v_from_corr(&s).unwrap()[0] - f64::atanh(rho)).abs() < 1e-10);
    }
    assert_eq!(corr_from_v(&[0.0; 3], 3).unwrap().sigma, DMatrix::identity(3, 3));
    assert!(v_from_corr(&DMatrix::identity(4, 4)).unwrap().iter().all(|v| v.abs() < 1e-15));
}

#[test]
fn matrix_log_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for p in 2..=8 {
        for _ in 0..20 {
            let s = random_corr(&mut rng, p);
            let v = v_from_corr(&s).unwrap();
            let sol = corr_from_v(&v, p).unwrap();
            assert!(sol.iterations <= 60, "p={p} took {} iterations", sol.iterations);
            assert!(linalg::max_abs_diff(&sol.sigma, &s) < 1e-8);
        }
    }
}

#[test]
fn matrix_log_rejects_bad_input() {
    assert!(corr_from_v(&[0.1, 0.2], 3).is_err());
    assert!(v_from_corr(&DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0])).is_err());
    assert!(v_from_corr(&DMatrix::from_row_slice(2, 2, &[1.0, 1.5, 1.5, 1.0])).is_err());
}

#[test]
fn matrix_log_jacobian() {
    let j0 = v_jacobian(&[0.0], 2).unwrap();
    assert!((j0[(0, 0)] - 1.0).abs() < 1e-8);
    let j1 = v_jacobian(&[1.0], 2).unwrap();
    let sech2 = 1.0 / 1f64.cosh().powi(2);
    assert!((j1[(0, 0)] - sech2).abs() < 1e-8);
    assert!((sech2 - 0.419_974).abs() < 1e-6);
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let v = v_from_corr(&random_corr(&mut rng, 4)).unwrap();
    let centre = correlation::corr_from_v(&v, 4).unwrap();
    let full = correlation::jacobian_at(&v, &centre, FD_JACOBIAN_STEP).unwrap();
    let half = correlation::jacobian_at(&v, &centre, FD_JACOBIAN_STEP / 2.0).unwrap();
    for (a, b) in full.iter().zip(half.iter()) {
        assert!((a - b).abs() <= 1e-5 * (1.0 + a.abs()));
    }
}

#[test]
fn factor_correlation() {
    assert_eq!(corr_from_factors(3, 2, &[0.0, 0.0, 0.0], &[f64::NEG_INFINITY; 2]), DMatrix::identity(3, 3));
    let s = corr_from_factors(2, 1, &[1.0], &[0.0]);
    assert!((s[(1, 0)] - 0.5).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for _ in 0..50 {
        let lower: Vec<f64> = (0..7).map(|_| normal(&mut rng)).collect();
        let diag: Vec<f64> = (0..2).map(|_| normal(&mut rng)).collect();
        let s = corr_from_factors(5, 2, &lower, &diag);
        assert!(s.diagonal().iter().all(|d| (d - 1.0).abs() < 1e-14));
        assert!(linalg::cholesky(&s).is_ok());
    }
}

#[test]
fn prior_spot_values() {
    assert!((gdp_value(0.0) - 1.5f64.ln()).abs() < 1e-12);
    assert!(gdp_value(0.5) > gdp_value(1.0) && gdp_value(-0.5) > gdp_value(-1.0));
    // half-Cauchy(0, 1) density at 0 is 2 / pi; on the log scale density(log x) = x f(x)
    let x: f64 = 1e-8;
    let f0 = (log_half_cauchy_log_scale(x.ln(), 0.0) - x.ln()).exp();
    assert!((f0 - 0.636_620).abs() < 1e-6);
}

fn gdp_value(g: f64) -> f64 {
    // single free loading with p = 2, K = 1: lower entry g, diagonal fixed
    let layout = Layout::new(2, 1, PriorKind::Factor { factors: 1 }).unwrap();
    let mut eta = vec![0.0; layout.dim()];
    let start = layout.correlation_range().start;
    eta[start] = g;
    let base = log_prior_copula(&layout, &eta).unwrap();
    eta[start] = 0.0;
    base - log_prior_copula(&layout, &eta).unwrap() + (1.5f64).ln()
}

#[test]
fn log_h_matches_dense_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    for prior in [PriorKind::MatrixLog, PriorKind::Factor { factors: 1 }, PriorKind::Factor { factors: 2 }] {
        for _ in 0..5 {
            let inst = instance(&mut rng, 8, 2, 3, prior);
            let fast = inst.post.log_h(&inst.eta).unwrap();
            let dense = dense_log_h(&inst.post, &inst.eta);
            assert!((fast - dense).abs() < 1e-8, "{fast} vs {dense}");
        }
    }
}

#[test]
fn log_h_identity_specialisation() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let inst = instance(&mut rng, 8, 2, 3, PriorKind::MatrixLog);
    let layout = *inst.post.layout();
    let eta = vec![0.0; layout.dim()];
    let terms = inst.post.log_terms(&eta).unwrap();
    let hs: Vec<HorseshoeParams> = (0..2).map(|_| HorseshoeParams { log_xi: vec![0.0; 3], log_tau: 0.0 }).collect();
    let s = scale_matrix(inst.post.design(), &hs);
    let z = inst.post.scores();
    let mut expected = -8.0 * math::LN_2PI;
    for (zv, sv) in z.iter().zip(s.iter()) {
        expected += -0.5 * (zv / sv).powi(2) - sv.ln();
    }
    assert!((terms.gaussian - expected).abs() < 1e-10);
    assert!((terms.total() - dense_log_h(&inst.post, &eta)).abs() < 1e-8);
}

fn fd_check(post: &CopulaPosterior, eta: &[f64]) {
    let grad = post.grad_log_h(eta).unwrap();
    let names = post.layout().names();
    let mut probe = eta.to_vec();
    for t in 0..eta.len() {
        let h = 1e-5;
        probe[t] = eta[t] + h;
        let up = post.log_h(&probe).unwrap();
        probe[t] = eta[t] - h;
        let down = post.log_h(&probe).unwrap();
        probe[t] = eta[t];
        let fd = (up - down) / (2.0 * h);
        let tol = 1e-4 * fd.abs().max(1.0);
        assert!((grad[t] - fd).abs() <= tol, "{}: analytic {} vs fd {fd}", names[t], grad[t]);
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for prior in [PriorKind::MatrixLog, PriorKind::Factor { factors: 2 }, PriorKind::Factor { factors: 3 }] {
        for _ in 0..4 {
            let inst = instance(&mut rng, 12, 3, 4, prior);
            fd_check(&inst.post, &inst.eta);
        }
    }
}

#[test]
fn beta_gradient_at_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(19);
    let inst = instance(&mut rng, 10, 2, 3, PriorKind::MatrixLog);
    let layout = *inst.post.layout();
    let eta = vec![0.0; layout.dim()];
    let grad = inst.post.grad_log_h(&eta).unwrap();
    let hs: Vec<HorseshoeParams> = (0..2).map(|_| HorseshoeParams { log_xi: vec![0.0; 3], log_tau: 0.0 }).collect();
    let s = scale_matrix(inst.post.design(), &hs);
    let expected = inst.post.design().transpose() * inst.post.scores().component_div(&s);
    for (g, e) in grad[layout.beta_range()].iter().zip(expected.iter()) {
        assert!((g - e).abs() < 1e-10);
    }
}

#[test]
fn marginal_prior_of_each_block() {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (p, q) = (2, 2);
    let sigma = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]);
    let xi2 = [vec![0.5, 2.0], vec![1.5, 0.25]];
    let blocks: Vec<DMatrix<f64>> =
        xi2.iter().map(|d| DMatrix::from_diagonal(&DVector::from_column_slice(d))).collect();
    let l = linalg::cholesky(&star_product(&sigma, &blocks).unwrap()).unwrap();
    let draws = 40_000;
    let mut acc = DMatrix::<f64>::zeros(p * q, p * q);
    for _ in 0..draws {
        let w = DVector::from_fn(p * q, |_, _| normal(&mut rng));
        let b = &l * w;
        acc += &b * b.transpose();
    }
    acc /= draws as f64;
    for j in 0..p {
        for k in 0..q {
            let v = xi2[j][k];
            let se = v * (2.0 / draws as f64).sqrt();
            assert!((acc[(j * q + k, j * q + k)] - v).abs() < 4.0 * se);
        }
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(32))]

    #[test]
    fn scale_factor_in_unit_interval(x in proptest::collection::vec(-5.0f64..5.0, 4), l in proptest::collection::vec(-3.0f64..2.0, 4)) {
        let h = HorseshoeParams { log_xi: l, log_tau: 0.0 };
        let s = scale_factor(&x, &h.precision_inv());
        proptest::prop_assert!(s > 0.0 && s <= 1.0);
    }

    #[test]
    fn factor_correlation_has_unit_diagonal(lower in proptest::collection::vec(-4.0f64..4.0, 5), diag in proptest::collection::vec(-3.0f64..3.0, 2)) {
        let s = corr_from_factors(4, 2, &lower, &diag);
        for i in 0..4 {
            proptest::prop_assert!((s[(i, i)] - 1.0).abs() < 1e-14);
            for j in 0..4 {
                proptest::prop_assert!(s[(i, j)].abs() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn matrix_log_output_is_a_correlation(v in proptest::collection::vec(-1.5f64..1.5, 3)) {
        let sol = corr_from_v(&v, 3).unwrap();
        proptest::prop_assert!(sol.sigma.diagonal().iter().all(|d| (d - 1.0).abs() < 1e-10));
        proptest::prop_assert!(linalg::cholesky(&sol.sigma).is_ok());
        let back = v_from_corr(&sol.sigma).unwrap();
        for (a, b) in back.iter().zip(&v) {
            proptest::prop_assert!((a - b).abs() < 1e-8);
        }
    }
}
