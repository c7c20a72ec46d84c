//! Heat-bath Glauber dynamics on `{-1,1}^n` for `μ ∝ exp(H)`.
//!
//! Dense kernels, exact spectra and Dirichlet forms are available up to a
//! dimension cap (default 12, overridable through the `TIL_MAX_N` environment
//! variable). Trajectory sampling works for any `n` through [`LocalField`].

use crate::linalg::sym_eigen;
use crate::rng::Rng;
use crate::spin_space::{self, DiscreteMeasure};
use crate::{Error, Result};
use nalgebra::DMatrix;
use rand::Rng as _;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

/// Default cap on `n` for dense `2^n × 2^n` operations.
pub const DEFAULT_MAX_DENSE_N: usize = 12;

/// Dense dimension cap, honouring `TIL_MAX_N` when it parses.
pub fn max_dense_n() -> usize {
    std::env::var("TIL_MAX_N")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .map(|v| v.min(spin_space::MAX_N))
        .unwrap_or(DEFAULT_MAX_DENSE_N)
}

fn check_dense(n: usize) -> Result<()> {
    spin_space::check_dim(n)?;
    let max = max_dense_n();
    if n > max {
        return Err(Error::DimensionTooLarge { n, max });
    }
    Ok(())
}

/// Probability that coordinate `i` is `+1` given the other coordinates of `idx`.
pub fn conditional_plus(table: &[f64], idx: usize, i: usize) -> f64 {
    let plus = table[idx | (1 << i)];
    let minus = table[idx & !(1 << i)];
    logistic(plus - minus)
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Which normalization of the Dirichlet form a number refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirichletConvention {
    /// `Σ (φ(x)-φ(y))² μ(x)μ(y)/(μ(x)+μ(y))` over unordered flip pairs.
    Harmonic,
    /// `⟨φ, (I-P)φ⟩_μ`, which equals the harmonic form divided by `n`.
    Kernel,
}

impl DirichletConvention {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Harmonic => "harmonic",
            Self::Kernel => "kernel",
        }
    }
}

/// Single-site heat-bath kernel with its stationary measure.
#[derive(Debug, Clone)]
pub struct GlauberKernel {
    n: usize,
    potential: Vec<f64>,
    stationary: DiscreteMeasure,
    /// `flip[idx * n + i] = P(idx, idx ^ (1 << i))`.
    flip: Vec<f64>,
}

impl GlauberKernel {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn potential(&self) -> &[f64] {
        &self.potential
    }

    pub fn stationary(&self) -> &DiscreteMeasure {
        &self.stationary
    }

    pub fn flip_probability(&self, idx: usize, i: usize) -> f64 {
        self.flip[idx * self.n + i]
    }

    /// Holding probability, taken as the residual of the flip moves.
    pub fn hold_probability(&self, idx: usize) -> f64 {
        let out: f64 = self.flip[idx * self.n..(idx + 1) * self.n].iter().sum();
        (1.0 - out).max(0.0)
    }

    /// Dense row-stochastic matrix.
    pub fn transition_matrix(&self) -> DMatrix<f64> {
        let size = 1usize << self.n;
        let mut p = DMatrix::zeros(size, size);
        for idx in 0..size {
            for i in 0..self.n {
                p[(idx, idx ^ (1 << i))] = self.flip_probability(idx, i);
            }
            p[(idx, idx)] = self.hold_probability(idx);
        }
        p
    }

    /// `D^{1/2} P D^{-1/2}` with `D = diag(μ)`; symmetric by detailed balance.
    pub fn symmetrized_matrix(&self) -> DMatrix<f64> {
        let mu = self.stationary.weights();
        let size = mu.len();
        let mut s = DMatrix::zeros(size, size);
        for x in 0..size {
            for i in 0..self.n {
                let y = x ^ (1 << i);
                s[(x, y)] = (mu[x] / mu[y]).sqrt() * self.flip_probability(x, i);
            }
            s[(x, x)] = self.hold_probability(x);
        }
        (&s + s.transpose()) * 0.5
    }

    /// One-step distribution update `ν ↦ νP`.
    pub fn step_distribution(&self, nu: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; nu.len()];
        for (x, &w) in nu.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for i in 0..self.n {
                out[x ^ (1 << i)] += w * self.flip_probability(x, i);
            }
            out[x] += w * self.hold_probability(x);
        }
        out
    }
}

/// Builds the heat-bath kernel for the potential table `H` (length `2^n`).
pub fn build_kernel(potential: &[f64], n: usize) -> Result<GlauberKernel> {
    check_dense(n)?;
    spin_space::check_table(potential, n)?;
    if potential.iter().any(|h| !h.is_finite()) {
        return Err(Error::InvalidInput("potential has non-finite entries".into()));
    }
    let size = 1usize << n;
    let mut flip = vec![0.0; size * n];
    let inv_n = 1.0 / n as f64;
    for idx in 0..size {
        for i in 0..n {
            let p_plus = conditional_plus(potential, idx, i);
            let currently_plus = idx & (1 << i) != 0;
            let p_other = if currently_plus { 1.0 - p_plus } else { p_plus };
            flip[idx * n + i] = inv_n * p_other;
        }
    }
    Ok(GlauberKernel { n, potential: potential.to_vec(), stationary: DiscreteMeasure::gibbs(n, potential)?, flip })
}

/// Harmonic-mean Dirichlet form of `φ` under `μ`.
pub fn dirichlet_form(mu: &DiscreteMeasure, phi: &[f64]) -> Result<f64> {
    let n = mu.n();
    spin_space::check_table(phi, n)?;
    if !mu.is_normalized() {
        return Err(Error::NotNormalized { mass: mu.total_mass() });
    }
    let w = mu.weights();
    let mut total = 0.0;
    for x in 0..w.len() {
        for i in 0..n {
            let y = x | (1 << i);
            if y == x {
                continue;
            }
            let denom = w[x] + w[y];
            if denom <= 0.0 {
                return Err(Error::InvalidInput(format!("flip pair ({x}, {y}) has zero mass")));
            }
            let d = phi[x] - phi[y];
            total += d * d * w[x] * w[y] / denom;
        }
    }
    Ok(total)
}

/// Dirichlet form in either convention.
pub fn dirichlet_form_with(mu: &DiscreteMeasure, phi: &[f64], convention: DirichletConvention) -> Result<f64> {
    let h = dirichlet_form(mu, phi)?;
    Ok(match convention {
        DirichletConvention::Harmonic => h,
        DirichletConvention::Kernel => h / mu.n() as f64,
    })
}

/// `⟨φ, (I-P)φ⟩_μ` computed from the kernel entries directly.
pub fn kernel_dirichlet_form(kernel: &GlauberKernel, phi: &[f64]) -> Result<f64> {
    spin_space::check_table(phi, kernel.n)?;
    let mu = kernel.stationary.weights();
    let mut total = 0.0;
    for x in 0..mu.len() {
        for i in 0..kernel.n {
            let y = x ^ (1 << i);
            let d = phi[x] - phi[y];
            total += 0.5 * mu[x] * kernel.flip_probability(x, i) * d * d;
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectralReport {
    /// `1 - λ₂` of the discrete kernel.
    pub gap: f64,
    /// Best Poincaré constant under `convention`.
    pub poincare_constant: f64,
    /// `Var/ℰ` evaluated at the second eigenfunction.
    pub variational_poincare: f64,
    /// Full spectrum, decreasing.
    pub eigenvalues: Vec<f64>,
    pub convention: DirichletConvention,
}

/// Exact spectrum of the kernel and the Poincaré constant.
pub fn exact_spectral_gap(kernel: &GlauberKernel, convention: DirichletConvention) -> Result<SpectralReport> {
    let eig = sym_eigen(&kernel.symmetrized_matrix());
    if eig.values.len() < 2 {
        return Err(Error::InvalidInput("state space has a single point".into()));
    }
    let gap = 1.0 - eig.values[1];
    if gap <= 1e-14 {
        return Err(Error::NotErgodic { gap });
    }
    let n = kernel.n as f64;
    let poincare_constant = match convention {
        DirichletConvention::Harmonic => 1.0 / (n * gap),
        DirichletConvention::Kernel => 1.0 / gap,
    };
    let mu = kernel.stationary();
    let phi: Vec<f64> = mu.weights().iter().enumerate().map(|(x, w)| eig.vectors[(x, 1)] / w.sqrt()).collect();
    let (_, var) = mu.mean_and_variance(&phi)?;
    let energy = dirichlet_form_with(mu, &phi, convention)?;
    Ok(SpectralReport { gap, poincare_constant, variational_poincare: var / energy, eigenvalues: eig.values, convention })
}

/// Gives the change `H(x with xᵢ=+1) - H(x with xᵢ=-1)` without a dense table.
pub trait LocalField: Sync {
    fn n(&self) -> usize;
    fn log_odds(&self, x: &[i8], i: usize) -> f64;
}

/// A dense potential table as a [`LocalField`].
pub struct TableField<'a> {
    pub n: usize,
    pub table: &'a [f64],
}

impl LocalField for TableField<'_> {
    fn n(&self) -> usize {
        self.n
    }

    fn log_odds(&self, x: &[i8], i: usize) -> f64 {
        let mut idx = 0usize;
        for (k, &s) in x.iter().enumerate() {
            if s > 0 {
                idx |= 1 << k;
            }
        }
        self.table[idx | (1 << i)] - self.table[idx & !(1 << i)]
    }
}

/// A closure `(x, i) ↦ log-odds` as a [`LocalField`].
pub struct FnField<F> {
    pub n: usize,
    pub f: F,
}

impl<F: Fn(&[i8], usize) -> f64 + Sync> LocalField for FnField<F> {
    fn n(&self) -> usize {
        self.n
    }

    fn log_odds(&self, x: &[i8], i: usize) -> f64 {
        (self.f)(x, i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SampleMode {
    /// Poisson clock of rate `n` run until time `t_end`.
    Continuous { t_end: f64 },
    /// A fixed number of single-site updates.
    Discrete { steps: u64 },
}

/// Update times and states; `states[k]` is the configuration after update `k`
/// (index 0 is the initial state at time 0).
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<i8>>,
}

/// Runs Glauber dynamics, calling `visit(time, state)` after every update.
pub fn run_glauber<L: LocalField + ?Sized, V: FnMut(f64, &[i8])>(
    field: &L,
    x0: &[i8],
    mode: SampleMode,
    rng: &mut Rng,
    mut visit: V,
) -> Result<Vec<i8>> {
    let n = field.n();
    if x0.len() != n {
        return Err(Error::DimensionMismatch { expected: n, got: x0.len() });
    }
    let mut x = x0.to_vec();
    let clock = Exp::new(n as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut t = 0.0;
    let mut step = 0u64;
    loop {
        match mode {
            SampleMode::Continuous { t_end } => {
                t += clock.sample(rng);
                if t > t_end {
                    break;
                }
            }
            SampleMode::Discrete { steps } => {
                if step >= steps {
                    break;
                }
                step += 1;
                t = step as f64;
            }
        }
        let i = rng.random_range(0..n);
        let p_plus = logistic(field.log_odds(&x, i));
        x[i] = if rng.random::<f64>() < p_plus { 1 } else { -1 };
        visit(t, &x);
    }
    Ok(x)
}

/// Records a whole trajectory.
pub fn sample_trajectory<L: LocalField + ?Sized>(field: &L, x0: &[i8], mode: SampleMode, rng: &mut Rng) -> Result<Trajectory> {
    let mut traj = Trajectory { times: vec![0.0], states: vec![x0.to_vec()] };
    run_glauber(field, x0, mode, rng, |t, x| {
        traj.times.push(t);
        traj.states.push(x.to_vec());
    })?;
    Ok(traj)
}

/// Smallest `t ≥ 1` with `max_x TV(P^t(x,·), μ) ≤ ε`, by exact powering.
pub fn tv_mixing_time(kernel: &GlauberKernel, eps: f64, max_steps: u64) -> Result<u64> {
    if kernel.n > 10 {
        return Err(Error::DimensionTooLarge { n: kernel.n, max: 10 });
    }
    if !(eps > 0.0 && eps < 1.0) {
        return Err(Error::InvalidInput(format!("eps = {eps} not in (0,1)")));
    }
    tv_decay(kernel, max_steps, |_, d| d <= eps)
        .map(|(t, _)| t)
}

/// `max_x TV(P^t(x,·), μ)` for `t = 1..=steps`.
pub fn tv_profile(kernel: &GlauberKernel, steps: u64) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    tv_decay(kernel, steps, |_, d| {
        out.push(d);
        false
    })
    .ok();
    Ok(out)
}

fn tv_decay<S: FnMut(u64, f64) -> bool>(kernel: &GlauberKernel, max_steps: u64, mut stop: S) -> Result<(u64, f64)> {
    let p = kernel.transition_matrix();
    let mu = kernel.stationary().weights();
    let mut pt = p.clone();
    for t in 1..=max_steps {
        let d = (0..pt.nrows())
            .map(|x| 0.5 * pt.row(x).iter().zip(mu).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .fold(0.0, f64::max);
        if stop(t, d) {
            return Ok((t, d));
        }
        pt = &pt * &p;
    }
    Err(Error::BudgetExceeded { budget: max_steps as usize })
}

/// `⌈(1/(1-λ₂))·(log(1/min μ) + log(1/(2ε)))⌉`, the mixing-time bound with the
/// continuous-time gap `n(1-λ₂)` in the `n/gap` prefactor.
pub fn mixing_time_bound(gap: f64, min_mu: f64, eps: f64) -> u64 {
    ((1.0 / gap) * ((1.0 / min_mu).ln() + (1.0 / (2.0 * eps)).ln())).ceil() as u64
}

/// Compares `Σ w_θ ℰ_{μ_θ}(φ)` with `ℰ_{Σ w_θ μ_θ}(φ)` (harmonic form).
pub fn dirichlet_concavity_check(measures: &[DiscreteMeasure], weights: &[f64], phi: &[f64]) -> Result<(f64, f64, bool)> {
    if measures.is_empty() || measures.len() != weights.len() {
        return Err(Error::DimensionMismatch { expected: measures.len(), got: weights.len() });
    }
    if weights.iter().any(|w| *w < 0.0) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidInput("weights must be nonnegative and sum to 1".into()));
    }
    let n = measures[0].n();
    let mut mix = vec![0.0; 1 << n];
    let mut lhs = 0.0;
    for (m, &w) in measures.iter().zip(weights) {
        if m.n() != n {
            return Err(Error::DimensionMismatch { expected: n, got: m.n() });
        }
        lhs += w * dirichlet_form_lenient(m, phi)?;
        for (acc, v) in mix.iter_mut().zip(m.weights()) {
            *acc += w * v;
        }
    }
    let rhs = dirichlet_form_lenient(&DiscreteMeasure::new(n, mix)?, phi)?;
    Ok((lhs, rhs, lhs <= rhs + 1e-12))
}

/// Harmonic form where pairs with zero total mass contribute nothing, so
/// that point masses and other degenerate mixture components are allowed.
fn dirichlet_form_lenient(mu: &DiscreteMeasure, phi: &[f64]) -> Result<f64> {
    let n = mu.n();
    spin_space::check_table(phi, n)?;
    if !mu.is_normalized() {
        return Err(Error::NotNormalized { mass: mu.total_mass() });
    }
    let w = mu.weights();
    let mut total = 0.0;
    for x in 0..w.len() {
        for i in 0..n {
            let y = x | (1 << i);
            if y == x || w[x] + w[y] <= 0.0 {
                continue;
            }
            let d = phi[x] - phi[y];
            total += d * d * w[x] * w[y] / (w[x] + w[y]);
        }
    }
    Ok(total)
}
