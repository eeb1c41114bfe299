use ndarray::{Array1, Array2};
use proptest::prelude::*;
use psc_core::linalg::random_orthogonal;
use psc_core::{
    gaussian_skl_scalar, probe_moments, psc_loss, ssa_loss, support_loss_restricted, FeatureMatrix, ProbeBank,
    PscHyperParams, RegressorHead, SourceSpectralModel,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Case {
    model: SourceSpectralModel,
    head: RegressorHead,
    z: Array2<f64>,
}

fn case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(3..9);
    let k = rng.random_range(1..d.min(5));
    let q = random_orthogonal(d, &mut rng);
    let mut lambdas: Vec<f64> = (0..k).map(|_| rng.random_range(0.3..5.0)).collect();
    lambdas.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let model = SourceSpectralModel::from_parts(
        Array1::from_shape_simple_fn(d, || rng.random_range(-1.0..1.0)),
        q.slice(ndarray::s![..k, ..]).to_owned(),
        Array1::from(lambdas),
        rng.random_range(0.05..1.0),
        1e-8,
    )
    .unwrap();
    let head = RegressorHead::new(Array1::from_shape_simple_fn(d, || rng.random_range(-2.0..2.0)), 0.0);
    let b = rng.random_range(3..30);
    let z = Array2::from_shape_simple_fn((b, d), || rng.sample::<f64, _>(StandardNormal) * 1.5);
    Case { model, head, z }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn loss_is_invariant_to_row_order(seed in 0u64..10_000, shift in 0usize..1000) {
        let c = case(seed);
        let bank = ProbeBank::build(c.model.dim_k()).unwrap();
        let hyper = PscHyperParams::default();
        let rows = c.z.nrows();
        let mut perm = c.z.clone();
        for i in 0..rows {
            perm.row_mut(i).assign(&c.z.row((i * 7 + shift) % rows));
        }
        // Only a permutation when the stride is coprime with the row count.
        prop_assume!(gcd(7, rows) == 1);
        let a = psc_loss(&c.model, &bank, &c.head, &hyper, &FeatureMatrix::new(c.z.clone()).unwrap()).unwrap();
        let b = psc_loss(&c.model, &bank, &c.head, &hyper, &FeatureMatrix::new(perm).unwrap()).unwrap();
        prop_assert!((a.l_psc - b.l_psc).abs() <= 1e-12 * a.l_psc.abs().max(1.0));
    }

    #[test]
    fn loss_is_invariant_to_basis_sign(seed in 0u64..10_000, row in 0usize..4) {
        let c = case(seed);
        let row = row % c.model.dim_k();
        let flipped = c.model.with_flipped_row(row);
        let bank = ProbeBank::build(c.model.dim_k()).unwrap();
        let hyper = PscHyperParams::with_lambda(0.5);
        let f = FeatureMatrix::new(c.z.clone()).unwrap();
        let a = psc_loss(&c.model, &bank, &c.head, &hyper, &f).unwrap().l_psc;
        let b = psc_loss(&flipped, &bank, &c.head, &hyper, &f).unwrap().l_psc;
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn axis_restriction_reduces_to_ssa(seed in 0u64..10_000) {
        let c = case(seed);
        let k = c.model.dim_k();
        let bank = ProbeBank::build(k).unwrap();
        let hyper = PscHyperParams { c: 1.0, gamma: 1.0, lambda_res: 0.0, eps_var: 1e-8 };
        let f = FeatureMatrix::new(c.z.clone()).unwrap();
        let coords = c.model.project_support(&f).unwrap();
        let moments = probe_moments(&bank, &coords, 1e-8).unwrap();
        let (restricted, _) = support_loss_restricted(&c.model, &bank, &c.head, &hyper, &moments, |p| p.is_axis()).unwrap();
        let ssa = ssa_loss(&c.model, &c.head, &f).unwrap();
        prop_assert!((restricted - ssa / (k * k) as f64).abs() <= 1e-12 * ssa.abs().max(1.0));
    }

    #[test]
    fn scalar_skl_matches_quadrature(lam in 0.2f64..5.0, m in -2.0f64..2.0, v in 0.2f64..5.0) {
        let exact = gaussian_skl_scalar(lam, m, v).unwrap();
        let quad = quadrature_skl(lam, m, v);
        prop_assert!((exact - quad).abs() < 1e-7 * exact.max(1.0), "{exact} vs {quad}");
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// `∫ (p − q) log(p / q)` by composite Simpson on a wide interval.
fn quadrature_skl(lam: f64, m: f64, v: f64) -> f64 {
    let logpdf = |x: f64, mu: f64, var: f64| -0.5 * ((x - mu).powi(2) / var + (2.0 * std::f64::consts::PI * var).ln());
    let half = 14.0 * lam.max(v).sqrt() + m.abs();
    let n = 40_000;
    let h = 2.0 * half / n as f64;
    let f = |x: f64| {
        let lp = logpdf(x, 0.0, lam);
        let lq = logpdf(x, m, v);
        (lp.exp() - lq.exp()) * (lp - lq)
    };
    let mut total = f(-half) + f(half);
    for i in 1..n {
        let x = -half + i as f64 * h;
        total += if i % 2 == 1 { 4.0 } else { 2.0 } * f(x);
    }
    total * h / 3.0
}
