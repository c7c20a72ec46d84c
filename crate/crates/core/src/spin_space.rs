//! The hypercube `{-1,1}^n`, functions on it, and dense measures.
//!
//! Coordinate `i` (0-based) is stored in bit `i`; a set bit means spin `+1`.
//! Configuration indices therefore run over `0..2^n` and every module uses the
//! same ordering.

use crate::{Error, Result};

/// Hard cap on the dimension of dense `2^n` tables.
pub const MAX_N: usize = 24;

/// Tolerance on total mass for a measure to count as normalized.
pub const NORMALIZATION_TOL: f64 = 1e-12;

pub fn check_dim(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidInput("dimension must be at least 1".into()));
    }
    if n > MAX_N {
        return Err(Error::DimensionTooLarge { n, max: MAX_N });
    }
    Ok(())
}

/// A point of `{-1,1}^n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpinConfig {
    bits: u32,
    n: usize,
}

impl SpinConfig {
    pub fn from_index(index: usize, n: usize) -> Result<Self> {
        check_dim(n)?;
        if index >= 1 << n {
            return Err(Error::IndexOutOfRange { index, n });
        }
        Ok(Self { bits: index as u32, n })
    }

    /// Builds a configuration from `±1` spins.
    pub fn from_spins(spins: &[i8]) -> Result<Self> {
        check_dim(spins.len())?;
        let mut bits = 0u32;
        for (i, &s) in spins.iter().enumerate() {
            match s {
                1 => bits |= 1 << i,
                -1 => {}
                _ => return Err(Error::InvalidInput(format!("spin {s} is not ±1"))),
            }
        }
        Ok(Self { bits, n: spins.len() })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn index(&self) -> usize {
        self.bits as usize
    }

    /// Spin of coordinate `i` as `±1.0`.
    pub fn spin(&self, i: usize) -> f64 {
        spin_of(self.bits as usize, i)
    }

    pub fn spins(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.spin(i)).collect()
    }

    pub fn flip(&self, i: usize) -> Self {
        Self { bits: self.bits ^ (1 << i), n: self.n }
    }

    /// Copy with coordinate `i` set to `+1` (`plus = true`) or `-1`.
    pub fn with_spin(&self, i: usize, plus: bool) -> Self {
        let bits = if plus { self.bits | (1 << i) } else { self.bits & !(1 << i) };
        Self { bits, n: self.n }
    }

    /// Magnetization `Σ x_i`.
    pub fn magnetization(&self) -> i64 {
        let ones = self.bits.count_ones() as i64;
        2 * ones - self.n as i64
    }
}

/// Spin of coordinate `i` in configuration `index`.
#[inline]
pub fn spin_of(index: usize, i: usize) -> f64 {
    if (index >> i) & 1 == 1 {
        1.0
    } else {
        -1.0
    }
}

/// All `2^n` configurations in index order.
pub fn enumerate(n: usize) -> Result<impl Iterator<Item = SpinConfig>> {
    check_dim(n)?;
    Ok((0..1u32 << n).map(move |bits| SpinConfig { bits, n }))
}

/// Tabulates `f` over the cube.
pub fn tabulate<F: Fn(&[f64]) -> f64>(n: usize, f: F) -> Result<Vec<f64>> {
    check_dim(n)?;
    let mut x = vec![0.0; n];
    Ok((0..1usize << n)
        .map(|idx| {
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = spin_of(idx, i);
            }
            f(&x)
        })
        .collect())
}

/// `∂_i F(x) = (F(x^{i+}) - F(x^{i-}))/2`.
pub fn discrete_derivative<F: Fn(SpinConfig) -> f64>(f: F, i: usize, x: SpinConfig) -> Result<f64> {
    if i >= x.n() {
        return Err(Error::IndexOutOfRange { index: i, n: x.n() });
    }
    Ok(0.5 * (f(x.with_spin(i, true)) - f(x.with_spin(i, false))))
}

/// Table of `∂_i F` for a tabulated `F`.
pub fn derivative_table(table: &[f64], n: usize, i: usize) -> Result<Vec<f64>> {
    check_table(table, n)?;
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, n });
    }
    let bit = 1usize << i;
    Ok((0..table.len()).map(|idx| 0.5 * (table[idx | bit] - table[idx & !bit])).collect())
}

pub(crate) fn check_table(table: &[f64], n: usize) -> Result<()> {
    check_dim(n)?;
    if table.len() != 1 << n {
        return Err(Error::DimensionMismatch { expected: 1 << n, got: table.len() });
    }
    Ok(())
}

/// Nonnegative weights over the `2^n` configurations.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    n: usize,
    weights: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(n: usize, weights: Vec<f64>) -> Result<Self> {
        check_table(&weights, n)?;
        if let Some(w) = weights.iter().find(|w| !(**w >= 0.0) || !w.is_finite()) {
            return Err(Error::InvalidInput(format!("weight {w} is not a finite nonnegative number")));
        }
        Ok(Self { n, weights })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        check_dim(n)?;
        let m = 1usize << n;
        Ok(Self { n, weights: vec![1.0 / m as f64; m] })
    }

    /// Normalized Gibbs measure `∝ exp(log_weights)`, computed stably.
    pub fn gibbs(n: usize, log_weights: &[f64]) -> Result<Self> {
        check_table(log_weights, n)?;
        let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::InvalidInput("log-weights must be finite".into()));
        }
        let w: Vec<f64> = log_weights.iter().map(|l| (l - max).exp()).collect();
        Self::new(n, w)?.normalize()
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn into_weights(self) -> Vec<f64> {
        self.weights
    }

    pub fn total_mass(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_normalized(&self) -> bool {
        (self.total_mass() - 1.0).abs() <= NORMALIZATION_TOL
    }

    pub fn normalize(&self) -> Result<Self> {
        let mass = self.total_mass();
        if !(mass > 0.0) {
            return Err(Error::ZeroMass);
        }
        Ok(Self { n: self.n, weights: self.weights.iter().map(|w| w / mass).collect() })
    }

    pub fn expectation(&self, f: &[f64]) -> Result<f64> {
        check_table(f, self.n)?;
        Ok(self.weights.iter().zip(f).map(|(w, v)| w * v).sum())
    }

    /// `(E[φ], Var(φ))`; requires a normalized measure.
    pub fn mean_and_variance(&self, phi: &[f64]) -> Result<(f64, f64)> {
        check_table(phi, self.n)?;
        if !self.is_normalized() {
            return Err(Error::NotNormalized { mass: self.total_mass() });
        }
        let mean: f64 = self.weights.iter().zip(phi).map(|(w, v)| w * v).sum();
        let var: f64 = self.weights.iter().zip(phi).map(|(w, v)| w * (v - mean).powi(2)).sum();
        Ok((mean, var.max(0.0)))
    }

    /// Total-variation distance `½ Σ |μ - ν|`.
    pub fn tv_distance(&self, other: &Self) -> Result<f64> {
        if other.n != self.n {
            return Err(Error::DimensionMismatch { expected: self.n, got: other.n });
        }
        Ok(tv(&self.weights, &other.weights))
    }
}

/// `½ Σ |a - b|` for equal-length slices.
pub fn tv(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
