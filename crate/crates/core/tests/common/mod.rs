#![allow(dead_code)]

use dgp::kernels::{BasisPoint, KernelHyper};
use dgp::model::DecoupledModel;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn random_model(rng: &mut ChaCha8Rng, ma: usize, mb: usize, dim: usize) -> DecoupledModel {
    let hyper = KernelHyper {
        log_amplitude: rng.random_range(-0.5..0.5),
        log_lengthscales: (0..dim).map(|_| rng.random_range(-0.3..0.5)).collect(),
    };
    let point = |rng: &mut ChaCha8Rng| BasisPoint {
        location: (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect(),
        log_multipliers: (0..dim).map(|_| rng.random_range(-0.4..0.4)).collect(),
    };
    let alpha: Vec<_> = (0..ma).map(|_| point(rng)).collect();
    let beta: Vec<_> = (0..mb).map(|_| point(rng)).collect();
    let l = DMatrix::from_fn(mb, mb, |i, j| if j <= i { rng.random_range(-0.8..0.8) } else { 0.0 });
    DecoupledModel {
        alpha,
        a: DVector::from_fn(ma, |_, _| rng.random_range(-1.0..1.0)),
        beta,
        l,
        hyper,
        log_noise: rng.random_range(-2.0..0.0),
    }
}

pub fn random_inputs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, dim, |_, _| rng.random_range(-2.0..2.0))
}

pub fn random_targets(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.5..1.5))
}

/// Largest violation of `|a − f| ≤ max(rel · max(|a|, |f|), abs)`, as a
/// ratio to the allowed error; `≤ 1` means every entry passes.
pub fn gradient_mismatch(analytic: &[f64], numeric: &[f64], rel: f64, abs: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs() / (rel * a.abs().max(f.abs())).max(abs))
        .fold(0.0, f64::max)
}
