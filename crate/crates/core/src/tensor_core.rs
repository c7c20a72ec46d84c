//! Symmetric fourth-order tensors over `ℝ^n`.
//!
//! A [`SymTensor4`] stores all `n^4` entries (row-major in `(i,j,k,l)`) and is
//! symmetric under every permutation of its indices. Its flattening is the
//! `n²×n²` matrix `M[(i,j),(k,l)] = T_ijkl`, so that
//! `T(x,x,x,x) = ⟨x⊗x, M (x⊗x)⟩`.

use crate::linalg::{self, sym_eigen};
use crate::rng::{self, Rng};
use crate::spin_space::{self, spin_of};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// The 24 permutations of four slots.
const PERMS: [[usize; 4]; 24] = [
    [0, 1, 2, 3], [0, 1, 3, 2], [0, 2, 1, 3], [0, 2, 3, 1], [0, 3, 1, 2], [0, 3, 2, 1],
    [1, 0, 2, 3], [1, 0, 3, 2], [1, 2, 0, 3], [1, 2, 3, 0], [1, 3, 0, 2], [1, 3, 2, 0],
    [2, 0, 1, 3], [2, 0, 3, 1], [2, 1, 0, 3], [2, 1, 3, 0], [2, 3, 0, 1], [2, 3, 1, 0],
    [3, 0, 1, 2], [3, 0, 2, 1], [3, 1, 0, 2], [3, 1, 2, 0], [3, 2, 0, 1], [3, 2, 1, 0],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SymTensor4 {
    n: usize,
    data: Vec<f64>,
    diagonal_zero: bool,
}

#[inline]
fn flat(n: usize, i: usize, j: usize, k: usize, l: usize) -> usize {
    ((i * n + j) * n + k) * n + l
}

fn has_repeat(idx: [usize; 4]) -> bool {
    (0..4).any(|a| (a + 1..4).any(|b| idx[a] == idx[b]))
}

impl SymTensor4 {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n.pow(4)], diagonal_zero: false }
    }

    /// Averages `raw` (length `n^4`) over the 24 index permutations.
    pub fn symmetrize(n: usize, raw: &[f64]) -> Result<Self> {
        if raw.len() != n.pow(4) {
            return Err(Error::DimensionMismatch { expected: n.pow(4), got: raw.len() });
        }
        // One average per orbit, written to every position, so the result is
        // exactly symmetric regardless of summation order.
        let t = Self::from_orbits(n, |idx| {
            PERMS.iter().map(|p| raw[flat(n, idx[p[0]], idx[p[1]], idx[p[2]], idx[p[3]])]).sum::<f64>() / 24.0
        });
        Ok(t)
    }

    /// `u⊗u⊗u⊗u`, already symmetric.
    pub fn rank_one(u: &[f64]) -> Self {
        let n = u.len();
        let mut data = vec![0.0; n.pow(4)];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        data[flat(n, i, j, k, l)] = u[i] * u[j] * u[k] * u[l];
                    }
                }
            }
        }
        Self { n, data, diagonal_zero: false }
    }

    /// Symmetrization of `I⊗I`, so that `T(x) = ‖x‖⁴`.
    pub fn identity_square(n: usize) -> Self {
        let d = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        let mut data = vec![0.0; n.pow(4)];
        for i in 0..n {
            for j in 0..n {
                for k in 0..n {
                    for l in 0..n {
                        data[flat(n, i, j, k, l)] = (d(i, j) * d(k, l) + d(i, k) * d(j, l) + d(i, l) * d(j, k)) / 3.0;
                    }
                }
            }
        }
        Self { n, data, diagonal_zero: false }
    }

    /// Builds a tensor by assigning `value(orbit)` to every permutation of each
    /// sorted index tuple `i ≤ j ≤ k ≤ l`.
    pub fn from_orbits<F: FnMut([usize; 4]) -> f64>(n: usize, mut value: F) -> Self {
        let mut t = Self::zeros(n);
        for i in 0..n {
            for j in i..n {
                for k in j..n {
                    for l in k..n {
                        let v = value([i, j, k, l]);
                        t.set_orbit([i, j, k, l], v);
                    }
                }
            }
        }
        t.diagonal_zero = t.check_diagonal_zero();
        t
    }

    fn set_orbit(&mut self, idx: [usize; 4], v: f64) {
        let n = self.n;
        for p in PERMS.iter() {
            self.data[flat(n, idx[p[0]], idx[p[1]], idx[p[2]], idx[p[3]])] = v;
        }
    }

    fn check_diagonal_zero(&self) -> bool {
        let n = self.n;
        (0..self.data.len()).all(|f| {
            let idx = [f / (n * n * n), (f / (n * n)) % n, (f / n) % n, f % n];
            !has_repeat(idx) || self.data[f] == 0.0
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Whether every entry with a repeated index vanishes.
    pub fn diagonal_zero(&self) -> bool {
        self.diagonal_zero
    }

    pub fn get(&self, i: usize, j: usize, k: usize, l: usize) -> f64 {
        self.data[flat(self.n, i, j, k, l)]
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { n: self.n, data: self.data.iter().map(|v| v * c).collect(), diagonal_zero: self.diagonal_zero }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if other.n != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: other.n });
        }
        let mut t = Self { n: self.n, data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(), diagonal_zero: false };
        t.diagonal_zero = t.check_diagonal_zero();
        Ok(t)
    }

    /// `T(x,x,x,·)`.
    pub fn contract3(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n;
        // a[j,k,l] = Σ_i x_i T[i,j,k,l]
        let n3 = n * n * n;
        let mut a = vec![0.0; n3];
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let block = &self.data[i * n3..(i + 1) * n3];
            for (acc, t) in a.iter_mut().zip(block) {
                *acc += xi * t;
            }
        }
        let mut b = vec![0.0; n * n];
        for (j, &xj) in x.iter().enumerate() {
            let block = &a[j * n * n..(j + 1) * n * n];
            for (acc, t) in b.iter_mut().zip(block) {
                *acc += xj * t;
            }
        }
        let mut g = vec![0.0; n];
        for (k, &xk) in x.iter().enumerate() {
            for l in 0..n {
                g[l] += xk * b[k * n + l];
            }
        }
        g
    }

    /// `T(x) = Σ T_ijkl x_i x_j x_k x_l`.
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: x.len() });
        }
        Ok(self.contract3(x).iter().zip(x).map(|(g, xi)| g * xi).sum())
    }

    /// Table of `T(x)` over the cube.
    pub fn potential_table(&self) -> Result<Vec<f64>> {
        let f = self.flatten();
        spin_space::check_dim(self.n)?;
        Ok((0..1usize << self.n).map(|idx| f.cube_value(idx)).collect())
    }

    pub fn flatten(&self) -> FlattenedOperator {
        let m = self.n * self.n;
        FlattenedOperator { n: self.n, matrix: DMatrix::from_row_slice(m, m, &self.data) }
    }

    pub fn operator_norm(&self) -> f64 {
        self.flatten().operator_norm()
    }

    /// Lower bound by multi-start ascent, upper bound by the flattened operator norm.
    pub fn injective_norm(&self, opts: &InjectiveOptions) -> (f64, f64) {
        let upper = self.operator_norm();
        if upper == 0.0 {
            return (0.0, 0.0);
        }
        let mut rng = rng::stream(opts.seed, 0);
        let starts: Vec<Vec<f64>> = (0..opts.starts.max(1)).map(|_| random_unit(self.n, &mut rng)).collect();
        let lower = starts
            .par_iter()
            .flat_map_iter(|x0| [1.0, -1.0].into_iter().map(move |sign| (x0, sign)))
            .map(|(x0, sign)| self.ascend(x0.clone(), sign, upper, opts))
            .reduce(|| 0.0, f64::max);
        (lower.min(upper), upper)
    }

    /// Shifted power ascent of `sign·T(x)` on the unit sphere. The shift is
    /// raised whenever a plain step fails to improve, which restores monotone
    /// ascent (a shift of `3·‖T‖_op` makes the lifted objective convex).
    fn ascend(&self, mut x: Vec<f64>, sign: f64, upper: f64, opts: &InjectiveOptions) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        let mut g = self.contract3(&x);
        let mut val = sign * dot(&g, &x);
        let mut shift = 0.0;
        for _ in 0..opts.max_iter {
            let y: Vec<f64> = g.iter().zip(&x).map(|(gi, xi)| sign * 4.0 * gi + shift * xi).collect();
            let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                break;
            }
            let cand: Vec<f64> = y.iter().map(|v| v / norm).collect();
            let cg = self.contract3(&cand);
            let cval = sign * dot(&cg, &cand);
            if cval < val {
                if shift >= 12.0 * upper {
                    break;
                }
                shift = if shift == 0.0 { upper } else { 2.0 * shift };
                continue;
            }
            let gain = cval - val;
            x = cand;
            g = cg;
            val = cval;
            if gain < opts.tol {
                break;
            }
        }
        val.abs()
    }
}

/// Settings for [`SymTensor4::injective_norm`].
#[derive(Debug, Clone, Copy)]
pub struct InjectiveOptions {
    pub starts: usize,
    pub tol: f64,
    pub seed: u64,
    pub max_iter: usize,
}

impl Default for InjectiveOptions {
    fn default() -> Self {
        Self { starts: 64, tol: 1e-10, seed: 0, max_iter: 5000 }
    }
}

fn random_unit(n: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|a| a / norm).collect();
        }
    }
}

/// `n²×n²` symmetric matrix view of a fourth-order tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FlattenedOperator {
    n: usize,
    matrix: DMatrix<f64>,
}

impl FlattenedOperator {
    pub fn new(n: usize, matrix: DMatrix<f64>) -> Result<Self> {
        let m = n * n;
        if matrix.nrows() != m || matrix.ncols() != m {
            return Err(Error::DimensionMismatch { expected: m, got: matrix.nrows() });
        }
        Ok(Self { n, matrix: linalg::symmetrized(&matrix) })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn operator_norm(&self) -> f64 {
        linalg::spectral_radius_sym(&self.matrix)
    }

    pub fn min_eigenvalue(&self) -> f64 {
        linalg::min_eigenvalue(&self.matrix)
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        sym_eigen(&self.matrix).values
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace()
    }

    /// `⟨x⊗x, M (x⊗x)⟩` at cube configuration `idx`.
    pub fn cube_value(&self, idx: usize) -> f64 {
        let a = cube_feature(self.n, idx);
        a.dot(&(&self.matrix * &a))
    }

    pub fn potential_table(&self) -> Result<Vec<f64>> {
        spin_space::check_dim(self.n)?;
        Ok((0..1usize << self.n).map(|idx| self.cube_value(idx)).collect())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { n: self.n, matrix: &self.matrix * c }
    }
}

/// `vec(x xᵀ)` for cube configuration `idx`, row-major.
pub fn cube_feature(n: usize, idx: usize) -> DVector<f64> {
    DVector::from_fn(n * n, |r, _| spin_of(idx, r / n) * spin_of(idx, r % n))
}

/// Gaussian tensor with zero diagonal whose off-diagonal orbits carry
/// independent `N(0, 1/(24 n³))` draws. This is the symmetrization of a tensor
/// with iid `N(0, 1/n³)` entries, so `T(x)` has variance `≈ ‖x‖⁸/n³`.
pub fn sample_gaussian_tensor(n: usize, rng: &mut Rng) -> Result<SymTensor4> {
    if n < 4 {
        return Err(Error::InvalidInput(format!("n = {n} < 4 has no off-diagonal orbits")));
    }
    let sd = (24.0 * (n as f64).powi(3)).sqrt().recip();
    let mut t = SymTensor4::zeros(n);
    for i in 0..n {
        for j in i + 1..n {
            for k in j + 1..n {
                for l in k + 1..n {
                    let g: f64 = rng.sample(StandardNormal);
                    t.set_orbit([i, j, k, l], sd * g);
                }
            }
        }
    }
    t.diagonal_zero = true;
    Ok(t)
}

/// Tensor Curie–Weiss potential `H(x) = β/n^{p-1}·|Σx_i|^p` from the magnetization.
pub fn curie_weiss_value(n: usize, beta: f64, p: f64, s: i64) -> f64 {
    beta / (n as f64).powf(p - 1.0) * (s.abs() as f64).powf(p)
}

pub fn curie_weiss_potential(n: usize, beta: f64, p: f64) -> Result<Vec<f64>> {
    if !(p > 1.0) || !(beta >= 0.0) {
        return Err(Error::InvalidInput(format!("need p > 1 and beta >= 0 (p = {p}, beta = {beta})")));
    }
    spin_space::check_dim(n)?;
    Ok((0..1usize << n)
        .map(|idx| {
            let s = 2 * idx.count_ones() as i64 - n as i64;
            curie_weiss_value(n, beta, p, s)
        })
        .collect())
}

/// The `p = 4` Curie–Weiss potential as a tensor: every entry `β/n³`.
pub fn curie_weiss_tensor(n: usize, beta: f64) -> SymTensor4 {
    let v = beta / (n as f64).powi(3);
    SymTensor4 { n, data: vec![v; n.pow(4)], diagonal_zero: false }
}

/// `flatten(T) + s·I` with `s` the injective-norm upper bound; on the cube the
/// potential only moves by the constant `s·n²`.
pub fn psd_shift(t: &SymTensor4) -> (FlattenedOperator, f64) {
    let f = t.flatten();
    let shift = f.operator_norm();
    let m = f.matrix.nrows();
    let matrix = &f.matrix + DMatrix::<f64>::identity(m, m) * shift;
    (FlattenedOperator { n: t.n, matrix }, shift)
}

/// On-disk tensor description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorFile {
    pub n: usize,
    pub entries: Vec<TensorEntry>,
    #[serde(default)]
    pub symmetrize: bool,
    #[serde(default)]
    pub diagonal_zero: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    /// 1-based indices.
    pub idx: [usize; 4],
    pub val: f64,
}

impl TensorFile {
    /// Builds the tensor. With `symmetrize`, entries are placed at their
    /// exact positions and averaged over permutations; otherwise each entry
    /// sets the value of its whole permutation orbit.
    pub fn to_tensor(&self) -> Result<SymTensor4> {
        let n = self.n;
        if n == 0 {
            return Err(Error::Parse("field `n` must be positive".into()));
        }
        let diag_zero = self.diagonal_zero.unwrap_or(false);
        let mut positions = Vec::with_capacity(self.entries.len());
        for (e_no, e) in self.entries.iter().enumerate() {
            if e.idx.iter().any(|&i| i == 0 || i > n) {
                return Err(Error::Parse(format!("entries[{e_no}].idx {:?} out of range 1..={n}", e.idx)));
            }
            if !e.val.is_finite() {
                return Err(Error::Parse(format!("entries[{e_no}].val is not finite")));
            }
            let idx = e.idx.map(|i| i - 1);
            if diag_zero && has_repeat(idx) {
                return Err(Error::Parse(format!(
                    "entries[{e_no}].idx {:?} is diagonal but `diagonal_zero` is set",
                    e.idx
                )));
            }
            positions.push((idx, e.val));
        }
        if self.symmetrize {
            let mut raw = vec![0.0; n.pow(4)];
            for (idx, v) in positions {
                raw[flat(n, idx[0], idx[1], idx[2], idx[3])] += v;
            }
            SymTensor4::symmetrize(n, &raw)
        } else {
            let mut t = SymTensor4::zeros(n);
            let mut seen: std::collections::HashMap<[usize; 4], f64> = Default::default();
            for (e_no, (idx, v)) in positions.into_iter().enumerate() {
                let mut key = idx;
                key.sort_unstable();
                if let Some(prev) = seen.insert(key, v) {
                    if prev != v {
                        return Err(Error::Parse(format!("entries[{e_no}] conflicts with an earlier entry of the same orbit")));
                    }
                }
                t.set_orbit(key, v);
            }
            t.diagonal_zero = t.check_diagonal_zero();
            Ok(t)
        }
    }

    /// Sparse description listing one representative per nonzero orbit.
    pub fn from_tensor(t: &SymTensor4) -> Self {
        let n = t.n;
        let mut entries = Vec::new();
        for i in 0..n {
            for j in i..n {
                for k in j..n {
                    for l in k..n {
                        let v = t.get(i, j, k, l);
                        if v != 0.0 {
                            entries.push(TensorEntry { idx: [i + 1, j + 1, k + 1, l + 1], val: v });
                        }
                    }
                }
            }
        }
        Self { n, entries, symmetrize: false, diagonal_zero: Some(t.diagonal_zero) }
    }

    pub fn parse(text: &str) -> Result<SymTensor4> {
        let file: TensorFile = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        file.to_tensor()
    }
}
