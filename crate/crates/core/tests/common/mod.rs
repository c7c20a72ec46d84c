//! Shared instance generators and small statistics helpers for tests.
#![allow(dead_code)]

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use til_core::rng::Rng;
use til_core::spin_space::spin_of;
use til_core::tensor_core::SymTensor4;

pub fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn gaussian_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| gauss(rng)).collect()
}

pub fn norm_sq(u: &[f64]) -> f64 {
    u.iter().map(|a| a * a).sum()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn scaled(u: &[f64], c: f64) -> Vec<f64> {
    u.iter().map(|a| a * c).collect()
}

pub fn unit_vec(n: usize, rng: &mut Rng) -> Vec<f64> {
    let u = gaussian_vec(n, rng);
    let s = norm_sq(&u).sqrt();
    scaled(&u, 1.0 / s)
}

/// `Σ_k c_k u_k^{⊗4}` with Gaussian `u_k` and `c_k ∈ [0.5, 1.5)`.
pub fn random_psd_tensor(n: usize, terms: usize, rng: &mut Rng) -> SymTensor4 {
    let mut t = SymTensor4::zeros(n);
    for _ in 0..terms {
        let u = gaussian_vec(n, rng);
        let c: f64 = rng.random_range(0.5..1.5);
        t = t.add(&SymTensor4::rank_one(&u).scaled(c)).unwrap();
    }
    t
}

/// The same tensor family returned with its rank-1 terms `(c_k, u_k)`.
pub fn random_psd_terms(n: usize, terms: usize, rng: &mut Rng) -> Vec<(f64, Vec<f64>)> {
    (0..terms)
        .map(|_| {
            let u = gaussian_vec(n, rng);
            let c: f64 = rng.random_range(0.5..1.5);
            (c, u)
        })
        .collect()
}

/// Rescales `t` so that `336·n·‖flatten(t)‖_op = level`.
pub fn scale_to_level(t: &SymTensor4, level: f64) -> SymTensor4 {
    let op = t.operator_norm();
    t.scaled(level / (336.0 * t.n() as f64 * op))
}

/// Table of `f(x)` where `x` is given as a `±1` float vector.
pub fn table<F: Fn(&[f64]) -> f64>(n: usize, f: F) -> Vec<f64> {
    (0..1usize << n)
        .map(|idx| {
            let x: Vec<f64> = (0..n).map(|i| spin_of(idx, i)).collect();
            f(&x)
        })
        .collect()
}

pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() as f64 - 1.0).max(1.0);
    (m, v.sqrt())
}

/// Random PSD tensor on `n = 3` with six rank-1 terms, its flattening scaled
/// so that `336·n·‖flatten‖_op = level`, and the test function
/// `φ = x₀x₁ + ½x₂`.
pub fn tsl_instance(seed: u64, level: f64) -> (til_core::tensor_core::FlattenedOperator, Vec<f64>) {
    let n = 3;
    let mut rng = til_core::rng::stream(seed, 0);
    let t = scale_to_level(&random_psd_tensor(n, 6, &mut rng), level);
    let phi = table(n, |x| x[0] * x[1] + 0.5 * x[2]);
    (t.flatten(), phi)
}

/// Same family with the flattening scaled to unit trace.
pub fn tsl_instance_unit_trace(seed: u64) -> (til_core::tensor_core::FlattenedOperator, Vec<f64>) {
    let (op, phi) = tsl_instance(seed, 0.5);
    let tr = op.trace();
    (op.scaled(1.0 / tr), phi)
}

/// Per-coordinate mean and standard error of a sample of vectors.
pub fn mean_and_se(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let m = samples.len() as f64;
    let d = samples[0].len();
    let mean: Vec<f64> = (0..d).map(|k| samples.iter().map(|s| s[k]).sum::<f64>() / m).collect();
    let se: Vec<f64> = (0..d)
        .map(|k| {
            let v = samples.iter().map(|s| (s[k] - mean[k]).powi(2)).sum::<f64>() / (m - 1.0);
            (v / m).sqrt()
        })
        .collect();
    (mean, se)
}
