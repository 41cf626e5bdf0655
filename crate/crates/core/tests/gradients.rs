mod common;

use common::{gradient_mismatch, random_inputs, random_model, random_targets};
use dgp::model::{
    elbo, elbo_gradient, ell_gaussian, gaussian_moment_gradient, grad_ell, grad_kl, kl_normal_prior, predict,
    DecoupledModel, EllMethod, KlSampling,
};
use dgp::oracles::finite_difference;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn at(model: &DecoupledModel, flat: &[f64]) -> DecoupledModel {
    let mut m = model.clone();
    m.set_flat(flat).unwrap();
    m
}

fn sizes(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (
        rng.random_range(1..=8),
        rng.random_range(1..=5),
        rng.random_range(1..=3),
        rng.random_range(1..=12),
    )
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..20 {
        let (ma, mb, d, _) = sizes(&mut rng);
        let m = random_model(&mut rng, ma, mb, d);
        let g = grad_kl(&m, &KlSampling::Exact).unwrap().to_flat();
        let fd = finite_difference(|p| kl_normal_prior(&at(&m, p)), &m.to_flat()).unwrap();
        let worst = gradient_mismatch(&g, &fd, 1e-4, 1e-7);
        assert!(worst <= 1.0, "worst ratio {worst}");
    }
}

#[test]
fn ell_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for _ in 0..20 {
        let (ma, mb, d, n) = sizes(&mut rng);
        let m = random_model(&mut rng, ma, mb, d);
        let x = random_inputs(&mut rng, n, d);
        let y = random_targets(&mut rng, n);
        let mg = gaussian_moment_gradient(&predict(&m, &x).unwrap(), &y, m.log_noise).unwrap();
        let g = grad_ell(&m, &x, &mg).unwrap().to_flat();
        let f = |p: &[f64]| {
            let mm = at(&m, p);
            ell_gaussian(&predict(&mm, &x)?, &y, mm.log_noise)
        };
        let fd = finite_difference(f, &m.to_flat()).unwrap();
        let worst = gradient_mismatch(&g, &fd, 1e-4, 1e-7);
        assert!(worst <= 1.0, "worst ratio {worst}");
    }
}

#[test]
fn elbo_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    for _ in 0..20 {
        let (ma, mb, d, n) = sizes(&mut rng);
        let m = random_model(&mut rng, ma, mb, d);
        let x = random_inputs(&mut rng, n, d);
        let y = random_targets(&mut rng, n);
        let total = 3 * n;
        let (v, g) = elbo_gradient(&m, &x, &y, total, &KlSampling::Exact, EllMethod::Gaussian, &mut rng).unwrap();
        assert!((v - elbo(&m, &x, &y, total).unwrap()).abs() <= 1e-10 * v.abs().max(1.0));
        let fd = finite_difference(|p| elbo(&at(&m, p), &x, &y, total), &m.to_flat()).unwrap();
        let worst = gradient_mismatch(&g.to_flat(), &fd, 1e-4, 1e-7);
        assert!(worst <= 1.0, "worst ratio {worst}");
    }
}

#[test]
fn mean_only_model_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut m = random_model(&mut rng, 4, 0, 2);
    m.beta.clear();
    m.l = DMatrix::zeros(0, 0);
    let x = random_inputs(&mut rng, 6, 2);
    let y = random_targets(&mut rng, 6);
    let (_, g) = elbo_gradient(&m, &x, &y, 6, &KlSampling::Exact, EllMethod::Gaussian, &mut rng).unwrap();
    let fd = finite_difference(|p| elbo(&at(&m, p), &x, &y, 6), &m.to_flat()).unwrap();
    assert!(gradient_mismatch(&g.to_flat(), &fd, 1e-4, 1e-7) <= 1.0);
}

#[test]
fn sampled_columns_keep_the_value_and_hyper_independent_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let m = random_model(&mut rng, 6, 3, 2);
    let exact = grad_kl(&m, &KlSampling::Exact).unwrap();
    let sampled = grad_kl(&m, &KlSampling::columns(vec![1, 4], 6)).unwrap();
    assert_eq!(exact.d_l, sampled.d_l);
    assert_eq!(exact.d_beta_locations, sampled.d_beta_locations);
}
