//! Influence and derivative matrices, closed-form derivative bounds and the
//! tensor spectral-gap certificate.

use crate::linalg;
use crate::spin_space;
use crate::tensor_core::{InjectiveOptions, SymTensor4};
use crate::{Error, Result};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Dense cap for exhaustive influence/derivative computations.
pub const MAX_EXACT_N: usize = 14;

/// Multiplier of `n·‖T‖_inj` in the certificate.
pub const CERTIFICATE_CONSTANT: f64 = 336.0;
/// Two quartic product terms, each bounded by `160 n ‖T‖_inj`.
pub const QUARTIC_TERMS: f64 = 320.0;
/// Two rank-1 quadratic terms, each bounded by `8 n ‖T‖_inj`.
pub const QUADRATIC_TERMS: f64 = 16.0;
/// Limit of `n·‖T‖_inj` for the Gaussian degree-4 tensor.
pub const E0_4: f64 = 1.794;
/// `2 · 336 · E₀(4)`.
pub const SPIN_GLASS_CONSTANT: f64 = 1205.568;

fn check_exact(n: usize) -> Result<()> {
    spin_space::check_dim(n)?;
    if n > MAX_EXACT_N {
        return Err(Error::DimensionTooLarge { n, max: MAX_EXACT_N });
    }
    Ok(())
}

/// Entrywise nonnegative `n×n` matrix with an operator-norm accessor.
#[derive(Debug, Clone, PartialEq)]
pub struct NonnegMatrix {
    pub matrix: DMatrix<f64>,
}

impl NonnegMatrix {
    pub fn n(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    pub fn operator_norm(&self) -> f64 {
        linalg::operator_norm(&self.matrix)
    }
}

pub type InfluenceMatrix = NonnegMatrix;
pub type DerivativeMatrix = NonnegMatrix;

/// `A_ij = ½ max |tanh(∂ᵢH(x)) - tanh(∂ᵢH(x^j))|` over `x`, with `x^j` the
/// flip of bit `j`.
pub fn influence_matrix_exact(potential: &[f64], n: usize) -> Result<InfluenceMatrix> {
    check_exact(n)?;
    spin_space::check_table(potential, n)?;
    let size = 1usize << n;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let bit_i = 1usize << i;
            let mean: Vec<f64> = (0..size)
                .map(|x| if x & bit_i == 0 { (0.5 * (potential[x | bit_i] - potential[x])).tanh() } else { 0.0 })
                .collect();
            (0..n)
                .map(|j| {
                    if j == i {
                        return 0.0;
                    }
                    let bit_j = 1usize << j;
                    (0..size)
                        .filter(|x| x & (bit_i | bit_j) == 0)
                        .map(|x| 0.5 * (mean[x] - mean[x | bit_j]).abs())
                        .fold(0.0, f64::max)
                })
                .collect()
        })
        .collect();
    Ok(NonnegMatrix { matrix: DMatrix::from_fn(n, n, |i, j| rows[i][j]) })
}

/// `D_ij = max_x |∂ᵢ∂ⱼF(x)|`.
pub fn derivative_matrix_exact(table: &[f64], n: usize) -> Result<DerivativeMatrix> {
    check_exact(n)?;
    spin_space::check_table(table, n)?;
    let size = 1usize << n;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i == j {
                        return 0.0;
                    }
                    let (bi, bj) = (1usize << i, 1usize << j);
                    (0..size)
                        .filter(|x| x & (bi | bj) == 0)
                        .map(|x| {
                            let d = table[x | bi | bj] - table[x | bi] - table[x | bj] + table[x];
                            0.25 * d.abs()
                        })
                        .fold(0.0, f64::max)
                })
                .collect()
        })
        .collect();
    Ok(NonnegMatrix { matrix: DMatrix::from_fn(n, n, |i, j| rows[i][j]) })
}

/// `Σ_k ‖D^{F_k}‖_op`.
pub fn additive_bound(list: &[DerivativeMatrix]) -> Result<f64> {
    if let Some(first) = list.first() {
        if let Some(bad) = list.iter().find(|d| d.n() != first.n()) {
            return Err(Error::DimensionMismatch { expected: first.n(), got: bad.n() });
        }
    }
    Ok(list.iter().map(NonnegMatrix::operator_norm).sum())
}

fn norm_sq(u: &[f64]) -> f64 {
    u.iter().map(|a| a * a).sum()
}

fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

/// Bound `2‖u‖²` for `F = ⟨u,x⟩²`.
pub fn rank1_quadratic_bound(u: &[f64]) -> f64 {
    2.0 * norm_sq(u)
}

/// Bound `12n‖u‖²‖v‖²` for `F = ⟨u,x⟩²⟨v,x⟩²`.
pub fn quartic_product_bound(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), got: v.len() });
    }
    Ok(12.0 * u.len() as f64 * norm_sq(u) * norm_sq(v))
}

/// Bound `40n·max‖·‖⁴` for `F = (⟨u₁,x⟩²+⟨u₂,x⟩²)(⟨v₁,x⟩²+⟨v₂,x⟩²)` with
/// `u₁ ⊥ u₂` and `v₁ ⊥ v₂`.
pub fn orthogonal_pair_bound(u1: &[f64], u2: &[f64], v1: &[f64], v2: &[f64]) -> Result<f64> {
    let n = u1.len();
    for w in [u2, v1, v2] {
        if w.len() != n {
            return Err(Error::DimensionMismatch { expected: n, got: w.len() });
        }
    }
    for inner in [dot(u1, u2), dot(v1, v2)] {
        if inner.abs() > 1e-10 {
            return Err(Error::NotOrthogonal { inner });
        }
    }
    let m = [u1, u2, v1, v2].iter().map(|w| norm_sq(w).powi(2)).fold(0.0, f64::max);
    Ok(40.0 * n as f64 * m)
}

/// Bound `2K(2K-1) n^{K-1} Π‖u^{(k)}‖²` for `F = Π⟨u^{(k)},x⟩²`.
pub fn general_product_bound(us: &[Vec<f64>]) -> Result<f64> {
    let k = us.len();
    if k == 0 {
        return Err(Error::InvalidInput("need at least one vector".into()));
    }
    let n = us[0].len();
    if let Some(bad) = us.iter().find(|u| u.len() != n) {
        return Err(Error::DimensionMismatch { expected: n, got: bad.len() });
    }
    let kf = k as f64;
    let prod: f64 = us.iter().map(|u| norm_sq(u)).product();
    Ok(2.0 * kf * (2.0 * kf - 1.0) * (n as f64).powi(k as i32 - 1) * prod)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub quartic_terms: f64,
    pub quadratic_terms: f64,
}

/// Outcome of the tensor spectral-gap certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub n: usize,
    /// Injective-norm upper bound of the tensor the certificate is applied to.
    pub inj_upper: f64,
    /// Injective-norm lower estimate of the same tensor (not rigorous).
    pub inj_lower: f64,
    /// `336·n·inj_upper`.
    pub threshold_336n: f64,
    /// `1/(1 - 336·n·inj_upper)` when that product is below 1.
    pub bound: Option<f64>,
    /// Same formula with `inj_lower`; an optimistic estimate only.
    pub optimistic_bound: Option<f64>,
    /// Set when the flattening was not PSD and the shifted tensor was used.
    pub psd_shift_applied: bool,
    pub breakdown: Breakdown,
    pub reason: Option<String>,
}

fn certificate_value(n: usize, inj: f64) -> Option<f64> {
    let t = CERTIFICATE_CONSTANT * n as f64 * inj;
    (t < 1.0).then(|| 1.0 / (1.0 - t))
}

/// Poincaré certificate for `μ ∝ exp(T(x))`. A non-PSD flattening is first
/// shifted by its operator norm, which at most doubles the injective bound.
pub fn tensor_gap_certificate(t: &SymTensor4, opts: &InjectiveOptions) -> Certificate {
    let n = t.n();
    let flat = t.flatten();
    let op = flat.operator_norm();
    let psd = flat.min_eigenvalue() >= -1e-10 * op.max(1.0);
    let (inj_lower, inj_upper) = if psd {
        t.injective_norm(opts)
    } else {
        // On the sphere the shifted form is T(x) + op·‖x‖⁴, and its flattening
        // T + op·I has top eigenvalue λ_max(T) + op.
        let shifted = t.add(&SymTensor4::identity_square(n).scaled(op)).expect("same dimension");
        let (lower, _) = shifted.injective_norm(opts);
        (lower, flat.eigenvalues()[0] + op)
    };
    let threshold = CERTIFICATE_CONSTANT * n as f64 * inj_upper;
    let bound = certificate_value(n, inj_upper);
    Certificate {
        n,
        inj_upper,
        inj_lower,
        threshold_336n: threshold,
        bound,
        optimistic_bound: certificate_value(n, inj_lower),
        psd_shift_applied: !psd,
        breakdown: Breakdown { quartic_terms: QUARTIC_TERMS, quadratic_terms: QUADRATIC_TERMS },
        reason: bound.is_none().then(|| "336n*inj >= 1".to_string()),
    }
}

/// Number of rank-1 factors for degree `2^p`, by `n_{2^p} = 2 n_{2^{p-1}}²`, `n₁ = 1`.
pub fn higher_degree_rank_count(p: u32) -> Result<u64> {
    if p > 6 {
        return Err(Error::InvalidInput(format!("p = {p} overflows 64 bits")));
    }
    let mut count: u64 = 1;
    for _ in 0..p {
        count = 2 * count * count;
    }
    Ok(count)
}

/// Closed form `2^{2^p - 1}`.
pub fn higher_degree_rank_closed_form(p: u32) -> Result<u64> {
    if p > 6 {
        return Err(Error::InvalidInput(format!("p = {p} overflows 64 bits")));
    }
    Ok(1u64 << ((1u64 << p) - 1))
}
