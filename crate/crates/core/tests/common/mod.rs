//! Random instances and finite-difference helpers shared by the test targets.
#![allow(dead_code)]

use modconn::{Mat, ModelParams, SampleMoments};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut impl Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Positive definite `L L^T + shift I`.
pub fn random_spd(rng: &mut impl Rng, k: usize, shift: f64) -> Mat {
    let l = randn(rng, k, k);
    &l * l.transpose() + Mat::identity(k, k) * shift
}

/// Non-negative loading with unit-norm columns (generally not orthonormal).
pub fn random_loading(rng: &mut impl Rng, p: usize, k: usize) -> Mat {
    let mut w = Mat::from_fn(p, k, |_, _| rng.random::<f64>() + 0.05);
    for mut c in w.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    w
}

/// Non-negative orthonormal loading: contiguous blocks of rows per module.
pub fn block_loading(rng: &mut impl Rng, p: usize, k: usize) -> Mat {
    let mut w = Mat::zeros(p, k);
    for r in 0..p {
        w[(r, r * k / p)] = rng.random::<f64>() + 0.2;
    }
    for mut c in w.column_iter_mut() {
        let n = c.norm();
        c /= n;
    }
    w
}

pub fn random_params(rng: &mut impl Rng, w: Mat, n_classes: usize) -> ModelParams {
    let k = w.ncols();
    let g = (0..n_classes).map(|_| random_spd(rng, k, 0.3)).collect();
    let v = (0..n_classes).map(|_| 0.5 + rng.random::<f64>()).collect();
    ModelParams::new(w, g, v).unwrap()
}

/// Sample covariances of `n` standard-normal rows mixed by a random matrix.
pub fn random_moments(rng: &mut impl Rng, p: usize, n_classes: usize, n: usize) -> SampleMoments {
    let cov = (0..n_classes)
        .map(|_| {
            let mix = randn(rng, p, p) * 0.5 + Mat::identity(p, p);
            let x = randn(rng, n, p) * mix;
            x.tr_mul(&x) / n as f64
        })
        .collect();
    SampleMoments::from_covariances(cov, vec![n; n_classes]).unwrap()
}

pub fn population_moments(params: &ModelParams) -> SampleMoments {
    let cov = (0..params.n_classes())
        .map(|i| modconn::model::model_covariance(params, i).unwrap())
        .collect();
    SampleMoments::from_covariances(cov, vec![1000; params.n_classes()]).unwrap()
}

pub const FD_STEP: f64 = 1e-5;

/// Central difference of `f` along `dir`.
pub fn central(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

/// Largest componentwise relative error, with the denominator floored at
/// `1e-3` of the largest reference entry so that near-zero components are
/// compared on the scale of the gradient.
pub fn max_rel_err(analytic: &[f64], reference: &[f64]) -> f64 {
    let scale = reference.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    analytic
        .iter()
        .zip(reference)
        .map(|(a, r)| (a - r).abs() / r.abs().max(1e-3 * scale).max(1e-12))
        .fold(0.0, f64::max)
}
