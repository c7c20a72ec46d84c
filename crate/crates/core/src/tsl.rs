//! Tensorized stochastic localization.
//!
//! Every stage of the decomposition is an instance of one feature-space
//! localizer. A feature map `f: {-1,1}^n → ℝ^d`, a PSD matrix `K_t` on `ℝ^d`,
//! a linear tilt `X_t ∈ ℝ^d` and a reference weight `ρ` define
//!
//! ```text
//! μ_t(x) ∝ exp(⟨f(x), K_t f(x)⟩ + ⟨f(x), X_t⟩) ρ(x),
//! dK_t = -½ C_t² dt,   dX_t = C_t dW_t + drift dt,
//! ```
//!
//! with `W` a standard Brownian motion in `ℝ^d` and `C_t` a smoothed
//! projection onto `Image(K_t)` that removes the constraint directions. The
//! density `F_t = μ_t/μ_0` satisfies `dF_t = ⟨f, C_t dW_t + drift dt⟩ F_t`.
//!
//! * First stage: `f(x) = vec(x xᵀ)`, `K_0 = flatten(T)`, stop at rank 2.
//! * Second stage: `f(x) = √⟨x,M'x⟩ x`, `K_0 = M`, stop at rank 2.
//! * Quadratic stage: `f(x) = x`, `K_0 = J`, barycentric drift, stop at rank 1.

use crate::glauber;
use crate::linalg::{self, sym_eigen};
use crate::rng::{self, Rng};
use crate::spin_space::{self, spin_of, DiscreteMeasure};
use crate::tensor_core::{cube_feature, FlattenedOperator};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub const DEFAULT_DELTA: f64 = 1e-3;
pub const DEFAULT_RANK_TOL: f64 = 1e-8;
/// Default step as a fraction of `Tr(K_0)`.
pub const DEFAULT_DT_FRACTION: f64 = 1e-3;
pub const PINV_CUTOFF: f64 = 1e-12;
pub const MAX_HALVINGS: u32 = 20;
/// Largest `n` for which the localizer enumerates the cube.
pub const MAX_TSL_N: usize = 6;

/// `h(r) = exp(-r²/(2δ))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SmoothedProjectionParams {
    pub delta: f64,
}

impl SmoothedProjectionParams {
    pub fn new(delta: f64) -> Result<Self> {
        if !(delta > 0.0) {
            return Err(Error::InvalidInput(format!("delta = {delta} must be positive")));
        }
        Ok(Self { delta })
    }

    pub fn h(&self, r: f64) -> f64 {
        (-r * r / (2.0 * self.delta)).exp()
    }
}

fn check_orthonormal(basis: &DMatrix<f64>) -> Result<()> {
    let gram = basis.transpose() * basis;
    let err = (gram - DMatrix::<f64>::identity(basis.ncols(), basis.ncols())).abs().max();
    if basis.ncols() > 0 && err > 1e-10 {
        return Err(Error::InvalidInput(format!("basis is not orthonormal (error {err:.3e})")));
    }
    Ok(())
}

fn single_projection(basis: &DMatrix<f64>, v: &DVector<f64>, p: SmoothedProjectionParams) -> DMatrix<f64> {
    let proj = basis * basis.transpose();
    let vh = &proj * v;
    let r = vh.norm();
    if r == 0.0 {
        return proj;
    }
    let vb = vh / r;
    proj - (&vb * vb.transpose()) * (1.0 - p.h(r))
}

/// `C(H,v) = Proj_H - (1 - h(‖v_H‖)) v̄_H v̄_Hᵀ` for `H` spanned by the columns of `basis`.
pub fn smoothed_projection_single(basis: &DMatrix<f64>, v: &DVector<f64>, delta: f64) -> Result<DMatrix<f64>> {
    check_orthonormal(basis)?;
    if v.len() != basis.nrows() {
        return Err(Error::DimensionMismatch { expected: basis.nrows(), got: v.len() });
    }
    Ok(single_projection(basis, v, SmoothedProjectionParams::new(delta)?))
}

/// `C(H,v,u) = C(H,v) C(H,ũ) C(H,v)` with `ũ = C(H,v) u`.
pub fn smoothed_projection(basis: &DMatrix<f64>, v: &DVector<f64>, u: &DVector<f64>, delta: f64) -> Result<DMatrix<f64>> {
    check_orthonormal(basis)?;
    for w in [v, u] {
        if w.len() != basis.nrows() {
            return Err(Error::DimensionMismatch { expected: basis.nrows(), got: w.len() });
        }
    }
    let p = SmoothedProjectionParams::new(delta)?;
    let cv = single_projection(basis, v, p);
    let ut = &cv * u;
    let cu = single_projection(basis, &ut, p);
    let c = &cv * cu * &cv;
    Ok(linalg::symmetrized(&c))
}

/// Component of `x` on `Image(C)`, with eigenvalues of `C²` below
/// [`PINV_CUTOFF`] treated as zero.
fn image_component(c: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let eig = sym_eigen(&(c * c));
    let mut out = DVector::zeros(x.len());
    for (k, &lam) in eig.values.iter().enumerate() {
        if lam > PINV_CUTOFF {
            let e = eig.vectors.column(k);
            out += e * e.dot(x);
        }
    }
    out
}

/// `v` with `C² v = -n_eff · X_C/(δ - ‖X‖²)`, `X_C` the projection of `X` on
/// `Image(C)`, using a pseudo-inverse of `C²` with cutoff [`PINV_CUTOFF`].
pub fn bounded_drift(c: &DMatrix<f64>, x: &DVector<f64>, delta: f64, n_eff: f64) -> Result<DVector<f64>> {
    let norm_sq = x.norm_squared();
    if norm_sq >= delta {
        return Err(Error::OutsideBall { norm_sq, delta });
    }
    let eig = sym_eigen(&(c * c));
    let scale = -n_eff / (delta - norm_sq);
    let mut v = DVector::zeros(x.len());
    for (k, &lam) in eig.values.iter().enumerate() {
        if lam > PINV_CUTOFF {
            let e = eig.vectors.column(k);
            v += e * (scale * e.dot(x) / lam);
        }
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftMode {
    /// Mass and φ-mean constraints with the bounded restoring drift on `X`.
    Bounded,
    /// φ-variance constraint only, with drift `C² f̄` that keeps the
    /// normalized measure a martingale.
    Barycentric,
}

/// Numerical settings shared by all stages.
#[derive(Debug, Clone, PartialEq)]
pub struct TslParams {
    pub delta: f64,
    /// Nominal step; `None` means `DEFAULT_DT_FRACTION · Tr(K_0)`.
    pub dt: Option<f64>,
    pub rank_tol: f64,
    pub max_steps: usize,
    /// Check `0 ⪯ K_t ⪯ K_0` after every accepted step.
    pub check_monotone: bool,
    /// Keep a [`TrajectoryRow`] per accepted step.
    pub log_trajectory: bool,
    /// Times at which the normalized measure is recorded (frozen after `τ`).
    pub record_times: Vec<f64>,
}

impl Default for TslParams {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            dt: None,
            rank_tol: DEFAULT_RANK_TOL,
            max_steps: 10_000_000,
            check_monotone: false,
            log_trajectory: false,
            record_times: Vec::new(),
        }
    }
}

/// One localization problem on the cube.
#[derive(Debug, Clone)]
pub struct LocalizerModel {
    pub n: usize,
    /// Row `x` holds `f(x)`.
    pub features: DMatrix<f64>,
    pub k0: DMatrix<f64>,
    /// Normalized `μ_0 ∝ exp(⟨f,K_0 f⟩) ρ`.
    pub base: Vec<f64>,
    pub phi: Vec<f64>,
    pub n_eff: f64,
    pub stop_rank: usize,
    pub mode: DriftMode,
}

impl LocalizerModel {
    /// `ref_log` is `log ρ` over the cube.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n: usize,
        features: DMatrix<f64>,
        k0: DMatrix<f64>,
        ref_log: &[f64],
        phi: &[f64],
        n_eff: f64,
        stop_rank: usize,
        mode: DriftMode,
    ) -> Result<Self> {
        spin_space::check_dim(n)?;
        if n > MAX_TSL_N {
            return Err(Error::DimensionTooLarge { n, max: MAX_TSL_N });
        }
        spin_space::check_table(ref_log, n)?;
        spin_space::check_table(phi, n)?;
        let d = features.ncols();
        if features.nrows() != 1 << n {
            return Err(Error::DimensionMismatch { expected: 1 << n, got: features.nrows() });
        }
        if k0.nrows() != d || k0.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: k0.nrows() });
        }
        let k0 = linalg::symmetrized(&k0);
        let scale = linalg::spectral_radius_sym(&k0);
        let min = if d > 0 { linalg::min_eigenvalue(&k0) } else { 0.0 };
        if min < -1e-10 * scale.max(1.0) {
            return Err(Error::PsdViolation { min_eig: min });
        }
        let log_w: Vec<f64> = (0..1usize << n)
            .map(|x| {
                let f = features.row(x).transpose();
                f.dot(&(&k0 * &f)) + ref_log[x]
            })
            .collect();
        let base = DiscreteMeasure::gibbs(n, &log_w)?.into_weights();
        Ok(Self { n, features, k0, base, phi: phi.to_vec(), n_eff, stop_rank, mode })
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// First-stage model for `μ ∝ exp(⟨x⊗x, K (x⊗x)⟩)`.
    pub fn first_stage(op: &FlattenedOperator, phi: &[f64]) -> Result<Self> {
        let n = op.n();
        let features = cube_features(n)?;
        Self::new(n, features, op.matrix().clone(), &vec![0.0; 1 << n], phi, (n * n) as f64, 2, DriftMode::Bounded)
    }

    /// Second-stage model for `ν ∝ exp(⟨x,M'x⟩⟨x,Mx⟩) ν̃`.
    pub fn second_stage(m_target: &DMatrix<f64>, m_fixed: &DMatrix<f64>, ref_log: &[f64], phi: &[f64], n: usize) -> Result<Self> {
        let weights = quadratic_form_table(m_fixed, n)?;
        if let Some(q) = weights.iter().find(|q| **q < -1e-12) {
            return Err(Error::InvalidInput(format!("<x,M'x> = {q} < 0 on the cube")));
        }
        let features = DMatrix::from_fn(1 << n, n, |x, i| weights[x].max(0.0).sqrt() * spin_of(x, i));
        Self::new(n, features, m_target.clone(), ref_log, phi, n as f64, 2, DriftMode::Bounded)
    }

    /// Quadratic-stage model for `exp(⟨x,Jx⟩) ρ`.
    pub fn quadratic_stage(j: &DMatrix<f64>, ref_log: &[f64], phi: &[f64], n: usize) -> Result<Self> {
        let features = DMatrix::from_fn(1 << n, n, |x, i| spin_of(x, i));
        Self::new(n, features, j.clone(), ref_log, phi, n as f64, 1, DriftMode::Barycentric)
    }
}

/// Rows `vec(x xᵀ)` for the whole cube.
pub fn cube_features(n: usize) -> Result<DMatrix<f64>> {
    spin_space::check_dim(n)?;
    let size = 1usize << n;
    let mut m = DMatrix::zeros(size, n * n);
    for x in 0..size {
        m.row_mut(x).copy_from(&cube_feature(n, x).transpose());
    }
    Ok(m)
}

/// `⟨x, M x⟩` over the cube.
pub fn quadratic_form_table(m: &DMatrix<f64>, n: usize) -> Result<Vec<f64>> {
    spin_space::check_dim(n)?;
    if m.nrows() != n || m.ncols() != n {
        return Err(Error::DimensionMismatch { expected: n, got: m.nrows() });
    }
    Ok((0..1usize << n)
        .map(|x| {
            let v = DVector::from_fn(n, |i, _| spin_of(x, i));
            v.dot(&(m * &v))
        })
        .collect())
}

/// Full state of one trajectory.
#[derive(Debug, Clone)]
pub struct LocalizationState {
    pub t: f64,
    /// `log F_t` over the cube, with `F_0 ≡ 1`.
    pub log_f: Vec<f64>,
    pub k: DMatrix<f64>,
    pub x: DVector<f64>,
    /// `∫ F_t dμ_0`.
    pub mass: f64,
    /// `Σ (Δ mass)²` over accepted steps.
    pub quad_var_mass: f64,
    /// `Σ (Δ ∫φ dμ_t)²` over accepted steps.
    pub quad_var_phi: f64,
    pub phi_integral: f64,
    pub accepted: usize,
    pub rejected: usize,
    pub max_norm_x_sq: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRow {
    pub t: f64,
    pub trace_t: f64,
    pub rank_t: usize,
    pub mass: f64,
    pub norm_x: f64,
    pub dirichlet: f64,
    pub var_phi: f64,
}

struct Pending {
    h: f64,
    dw: DVector<f64>,
    depth: u32,
}

/// Drives one trajectory of a [`LocalizerModel`].
pub struct Localizer<'m> {
    model: &'m LocalizerModel,
    delta: f64,
    dt: f64,
    rank_threshold: f64,
    max_steps: usize,
    check_monotone: bool,
    log_trajectory: bool,
    record_times: Vec<f64>,
    next_record: usize,
    pub state: LocalizationState,
    pub records: Vec<(f64, Vec<f64>)>,
    pub log: Vec<TrajectoryRow>,
    pending: Vec<Pending>,
}

impl<'m> Localizer<'m> {
    pub fn new(model: &'m LocalizerModel, params: &TslParams) -> Result<Self> {
        SmoothedProjectionParams::new(params.delta)?;
        let d = model.dim();
        let trace = model.k0.trace();
        let dt = params.dt.unwrap_or(DEFAULT_DT_FRACTION * trace);
        if !(dt > 0.0) && trace > 0.0 {
            return Err(Error::InvalidInput(format!("dt = {dt} must be positive")));
        }
        let top = linalg::spectral_radius_sym(&model.k0);
        let phi_integral = model.base.iter().zip(&model.phi).map(|(w, p)| w * p).sum();
        let mut times = params.record_times.clone();
        times.sort_by(f64::total_cmp);
        let mut loc = Self {
            model,
            delta: params.delta,
            dt: if dt > 0.0 { dt } else { 1.0 },
            rank_threshold: params.rank_tol * top,
            max_steps: params.max_steps,
            check_monotone: params.check_monotone,
            log_trajectory: params.log_trajectory,
            record_times: times,
            next_record: 0,
            state: LocalizationState {
                t: 0.0,
                log_f: vec![0.0; model.base.len()],
                k: model.k0.clone(),
                x: DVector::zeros(d),
                mass: 1.0,
                quad_var_mass: 0.0,
                quad_var_phi: 0.0,
                phi_integral,
                accepted: 0,
                rejected: 0,
                max_norm_x_sq: 0.0,
            },
            records: Vec::new(),
            log: Vec::new(),
            pending: Vec::new(),
        };
        loc.flush_records(false);
        if loc.log_trajectory {
            loc.push_log_row();
        }
        Ok(loc)
    }

    pub fn model(&self) -> &LocalizerModel {
        self.model
    }

    /// Unnormalized `μ_t = F_t μ_0`.
    pub fn weights(&self) -> Vec<f64> {
        self.model.base.iter().zip(&self.state.log_f).map(|(b, l)| b * l.exp()).collect()
    }

    pub fn normalized(&self) -> Result<DiscreteMeasure> {
        DiscreteMeasure::new(self.model.n, self.weights())?.normalize()
    }

    fn image(&self) -> (DMatrix<f64>, Vec<f64>) {
        let eig = sym_eigen(&self.state.k);
        let keep: Vec<usize> = (0..eig.values.len()).filter(|&k| eig.values[k] > self.rank_threshold && eig.values[k] > 0.0).collect();
        let basis = DMatrix::from_fn(self.model.dim(), keep.len(), |r, c| eig.vectors[(r, keep[c])]);
        (basis, keep.iter().map(|&k| eig.values[k]).collect())
    }

    pub fn rank(&self) -> usize {
        self.image().1.len()
    }

    pub fn stopped(&self) -> bool {
        self.rank() <= self.model.stop_rank
    }

    /// Constraint vectors `(Φ, 𝔍)`; `𝔍` is `None` in barycentric mode.
    pub fn constraints(&self) -> (DVector<f64>, Option<DVector<f64>>) {
        let w = DVector::from_vec(self.weights());
        let f = &self.model.features;
        let phi = DVector::from_column_slice(&self.model.phi);
        match self.model.mode {
            DriftMode::Bounded => (f.transpose() * w.component_mul(&phi), Some(f.transpose() * &w)),
            DriftMode::Barycentric => {
                let p = &w / w.sum();
                let mean_phi = p.dot(&phi);
                let fbar = f.transpose() * &p;
                (f.transpose() * p.component_mul(&phi) - fbar * mean_phi, None)
            }
        }
    }

    /// Current smoothed projection `C_t`.
    pub fn projection(&self) -> Result<DMatrix<f64>> {
        let (basis, _) = self.image();
        self.projection_on(&basis)
    }

    fn projection_on(&self, basis: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let p = SmoothedProjectionParams::new(self.delta)?;
        let (phi_c, mass_c) = self.constraints();
        Ok(match mass_c {
            Some(j) => {
                let cv = single_projection(basis, &phi_c, p);
                let ut = &cv * j;
                let cu = single_projection(basis, &ut, p);
                linalg::symmetrized(&(&cv * cu * &cv))
            }
            None => single_projection(basis, &phi_c, p),
        })
    }

    /// Longest time for which `K - ½ s C²` stays PSD.
    fn psd_cap(c: &DMatrix<f64>, basis: &DMatrix<f64>, values: &[f64]) -> f64 {
        if values.is_empty() {
            return f64::INFINITY;
        }
        let inv_sqrt = DMatrix::from_diagonal(&DVector::from_iterator(values.len(), values.iter().map(|l| 1.0 / l.sqrt())));
        let c2 = c * c;
        let m = &inv_sqrt * basis.transpose() * c2 * basis * &inv_sqrt;
        let top = sym_eigen(&m).values.first().copied().unwrap_or(0.0);
        if top > 0.0 {
            2.0 / top
        } else {
            f64::INFINITY
        }
    }

    fn drift(&self, c: &DMatrix<f64>, h: f64) -> DVector<f64> {
        match self.model.mode {
            DriftMode::Bounded => {
                let norm_sq = self.state.x.norm_squared();
                let kappa = self.model.n_eff / (self.delta - norm_sq);
                let xh = image_component(c, &self.state.x);
                xh * -(1.0 - (-kappa * h).exp())
            }
            DriftMode::Barycentric => {
                let w = DVector::from_vec(self.weights());
                let fbar = self.model.features.transpose() * &w / w.sum();
                c * (c * fbar) * h
            }
        }
    }

    /// Applies one increment with the given `C`, Brownian increment and drift.
    pub fn apply(&mut self, c: &DMatrix<f64>, dw: &DVector<f64>, drift: &DVector<f64>, h: f64) {
        let dx = c * dw + drift;
        let f = &self.model.features;
        let lin = f * &dx;
        let cf = f * c;
        for (x, lf) in self.state.log_f.iter_mut().enumerate() {
            *lf += lin[x] - 0.5 * h * cf.row(x).norm_squared();
        }
        let k = &self.state.k - (c * c) * (0.5 * h);
        self.state.k = linalg::symmetrized(&k);
        self.state.x += dx;
        self.state.t += h;
        let w = self.weights();
        let mass: f64 = w.iter().sum();
        let phi_int: f64 = w.iter().zip(&self.model.phi).map(|(a, b)| a * b).sum();
        self.state.quad_var_mass += (mass - self.state.mass).powi(2);
        self.state.quad_var_phi += (phi_int - self.state.phi_integral).powi(2);
        self.state.mass = mass;
        self.state.phi_integral = phi_int;
        self.state.max_norm_x_sq = self.state.max_norm_x_sq.max(self.state.x.norm_squared());
    }

    /// Brownian bridge split of an increment `dw` over `[0,h]` at time `s`.
    fn bridge(dw: &DVector<f64>, h: f64, s: f64, rng: &mut Rng) -> (DVector<f64>, DVector<f64>) {
        let sd = (s * (h - s) / h).max(0.0).sqrt();
        let first = DVector::from_fn(dw.len(), |i, _| dw[i] * (s / h) + sd * gauss(rng));
        let second = dw - &first;
        (first, second)
    }

    fn next_nominal(&self) -> f64 {
        let mut h = self.dt;
        if let Some(&tr) = self.record_times.get(self.next_record) {
            if tr > self.state.t {
                h = h.min(tr - self.state.t);
            }
        }
        h
    }

    fn flush_records(&mut self, all: bool) {
        while let Some(&tr) = self.record_times.get(self.next_record) {
            let due = all || tr <= self.state.t * (1.0 + 1e-12) + 1e-300;
            if !due {
                break;
            }
            let w = self.normalized().map(|m| m.into_weights()).unwrap_or_default();
            self.records.push((tr, w));
            self.next_record += 1;
        }
    }

    fn push_log_row(&mut self) {
        let (_, values) = self.image();
        let row = match self.normalized() {
            Ok(m) => TrajectoryRow {
                t: self.state.t,
                trace_t: self.state.k.trace(),
                rank_t: values.len(),
                mass: self.state.mass,
                norm_x: self.state.x.norm(),
                dirichlet: glauber::dirichlet_form(&m, &self.model.phi).unwrap_or(f64::NAN),
                var_phi: m.mean_and_variance(&self.model.phi).map(|v| v.1).unwrap_or(f64::NAN),
            },
            Err(_) => return,
        };
        self.log.push(row);
    }

    fn check_psd(&self) -> Result<()> {
        let scale = linalg::spectral_radius_sym(&self.model.k0).max(f64::MIN_POSITIVE);
        let min = linalg::min_eigenvalue(&self.state.k);
        if min < -1e-9 * scale {
            return Err(Error::PsdViolation { min_eig: min });
        }
        if self.check_monotone {
            let min = linalg::min_eigenvalue(&(&self.model.k0 - &self.state.k));
            if min < -1e-9 * scale {
                return Err(Error::PsdViolation { min_eig: min });
            }
        }
        Ok(())
    }

    /// One nominal step of length `dt` (shorter at record times), refined by
    /// Brownian-bridge bisection when the tilt would leave the `δ`-ball and
    /// split exactly where `K_t` loses rank. Returns `true` once stopped.
    pub fn step(&mut self, rng: &mut Rng) -> Result<bool> {
        if self.stopped() {
            return Ok(true);
        }
        if self.pending.is_empty() {
            let h = self.next_nominal();
            let sd = h.sqrt();
            let dw = DVector::from_fn(self.model.dim(), |_, _| sd * gauss(rng));
            self.pending.push(Pending { h, dw, depth: 0 });
        }
        while let Some(Pending { mut h, mut dw, depth }) = self.pending.pop() {
            let (basis, values) = self.image();
            if values.len() <= self.model.stop_rank {
                self.pending.clear();
                return Ok(true);
            }
            let c = self.projection_on(&basis)?;
            let cap = Self::psd_cap(&c, &basis, &values);
            if h > cap * (1.0 + 1e-12) {
                let (first, rest) = Self::bridge(&dw, h, cap, rng);
                self.pending.push(Pending { h: h - cap, dw: rest, depth });
                h = cap;
                dw = first;
            }
            let drift = self.drift(&c, h);
            if self.model.mode == DriftMode::Bounded {
                let x_new = &self.state.x + &c * &dw + &drift;
                if x_new.norm_squared() >= self.delta {
                    if depth >= MAX_HALVINGS {
                        return Err(Error::StepUnderflow { halvings: depth as usize });
                    }
                    self.state.rejected += 1;
                    let (first, second) = Self::bridge(&dw, h, 0.5 * h, rng);
                    self.pending.push(Pending { h: 0.5 * h, dw: second, depth: depth + 1 });
                    self.pending.push(Pending { h: 0.5 * h, dw: first, depth: depth + 1 });
                    continue;
                }
            }
            self.apply(&c, &dw, &drift, h);
            self.state.accepted += 1;
            if self.state.accepted > self.max_steps {
                return Err(Error::BudgetExceeded { budget: self.max_steps });
            }
            self.check_psd()?;
            self.flush_records(false);
            if self.log_trajectory {
                self.push_log_row();
            }
            if self.stopped() {
                self.pending.clear();
                return Ok(true);
            }
        }
        Ok(false)
    }

    /// Steps until the rank criterion stops the process.
    pub fn run(&mut self, rng: &mut Rng) -> Result<()> {
        while !self.step(rng)? {}
        self.flush_records(true);
        Ok(())
    }

    /// `log F` from the closed form `⟨f,(K_t - K_0) f⟩ + ⟨f, X_t⟩`.
    pub fn closed_form_log_f(&self) -> Vec<f64> {
        let diff = &self.state.k - &self.model.k0;
        (0..self.model.base.len())
            .map(|x| {
                let f = self.model.features.row(x).transpose();
                f.dot(&(&diff * &f)) + f.dot(&self.state.x)
            })
            .collect()
    }

    /// Top eigenpairs of `K_t` as `√λ · e`.
    pub fn top_factors(&self, count: usize) -> Vec<DVector<f64>> {
        let eig = sym_eigen(&self.state.k);
        (0..count)
            .map(|k| {
                if k < eig.values.len() {
                    eig.vectors.column(k) * eig.values[k].max(0.0).sqrt()
                } else {
                    DVector::zeros(self.model.dim())
                }
            })
            .collect()
    }
}

/// Per-trajectory summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Diagnostics {
    pub tau: f64,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
    pub trace_0: f64,
    pub trace_tau: f64,
    pub max_norm_x_sq: f64,
    pub mass: f64,
    pub quad_var_mass: f64,
    pub quad_var_phi: f64,
    pub stopped_at_start: bool,
}

fn diagnostics(loc: &Localizer, stopped_at_start: bool) -> Diagnostics {
    Diagnostics {
        tau: loc.state.t,
        accepted_steps: loc.state.accepted,
        rejected_steps: loc.state.rejected,
        trace_0: loc.model.k0.trace(),
        trace_tau: loc.state.k.trace(),
        max_norm_x_sq: loc.state.max_norm_x_sq,
        mass: loc.state.mass,
        quad_var_mass: loc.state.quad_var_mass,
        quad_var_phi: loc.state.quad_var_phi,
        stopped_at_start,
    }
}

fn run_model<'m>(model: &'m LocalizerModel, params: &TslParams, rng: &mut Rng) -> Result<(Localizer<'m>, bool)> {
    let mut loc = Localizer::new(model, params)?;
    let at_start = loc.stopped();
    loc.run(rng)?;
    Ok((loc, at_start))
}

#[derive(Debug, Clone)]
pub struct FirstStageResult {
    pub m1: DMatrix<f64>,
    pub m2: DMatrix<f64>,
    /// `X_τ` reshaped to `n×n`.
    pub residual: DMatrix<f64>,
    /// Largest entry of `|M - Mᵀ|` before symmetrization.
    pub asymmetry: f64,
    /// Normalized `μ_τ`.
    pub measure: Vec<f64>,
    pub records: Vec<(f64, Vec<f64>)>,
    pub log: Vec<TrajectoryRow>,
    pub diagnostics: Diagnostics,
}

/// Runs the first stage until `T_t` has rank at most 2 and factors
/// `T_τ = M₁⊗M₁ + M₂⊗M₂`.
pub fn run_first_stage(op: &FlattenedOperator, phi: &[f64], params: &TslParams, rng: &mut Rng) -> Result<FirstStageResult> {
    let model = LocalizerModel::first_stage(op, phi)?;
    let (loc, at_start) = run_model(&model, params, rng)?;
    let n = op.n();
    let factors = loc.top_factors(2);
    let mut asymmetry: f64 = 0.0;
    let mut mats = factors.iter().map(|v| {
        let m = DMatrix::from_row_slice(n, n, v.as_slice());
        asymmetry = asymmetry.max((&m - m.transpose()).abs().max());
        linalg::symmetrized(&m)
    });
    let m1 = mats.next().expect("two factors");
    let m2 = mats.next().expect("two factors");
    drop(mats);
    Ok(FirstStageResult {
        m1,
        m2,
        residual: linalg::symmetrized(&DMatrix::from_row_slice(n, n, loc.state.x.as_slice())),
        asymmetry,
        measure: loc.normalized()?.into_weights(),
        records: loc.records.clone(),
        log: loc.log.clone(),
        diagnostics: diagnostics(&loc, at_start),
    })
}

#[derive(Debug, Clone)]
pub struct VectorStageResult {
    pub factors: Vec<DVector<f64>>,
    /// `X_τ`.
    pub tilt: DVector<f64>,
    pub measure: Vec<f64>,
    pub diagnostics: Diagnostics,
}

/// Decomposes `ν ∝ exp(⟨x,M'x⟩⟨x,Mx⟩) ν̃` into `exp(⟨x,M'x⟩(⟨u₁,x⟩²+⟨u₂,x⟩²))`
/// pieces; `ref_log = log ν̃`.
pub fn run_second_stage(
    m_target: &DMatrix<f64>,
    m_fixed: &DMatrix<f64>,
    ref_log: &[f64],
    phi: &[f64],
    params: &TslParams,
    rng: &mut Rng,
) -> Result<VectorStageResult> {
    let n = m_target.nrows();
    let model = LocalizerModel::second_stage(m_target, m_fixed, ref_log, phi, n)?;
    let (loc, at_start) = run_model(&model, params, rng)?;
    Ok(VectorStageResult {
        factors: loc.top_factors(2),
        tilt: loc.state.x.clone(),
        measure: loc.normalized()?.into_weights(),
        diagnostics: diagnostics(&loc, at_start),
    })
}

/// Localizes `exp(⟨x,Jx⟩) ρ` to `exp(⟨w,x⟩² + ⟨ℓ,x⟩) ρ`; returns `w` as the
/// single factor and `ℓ` as the tilt.
pub fn run_quadratic_stage(j: &DMatrix<f64>, ref_log: &[f64], phi: &[f64], params: &TslParams, rng: &mut Rng) -> Result<VectorStageResult> {
    let n = j.nrows();
    let model = LocalizerModel::quadratic_stage(j, ref_log, phi, n)?;
    let (loc, at_start) = run_model(&model, params, rng)?;
    Ok(VectorStageResult {
        factors: loc.top_factors(1),
        tilt: loc.state.x.clone(),
        measure: loc.normalized()?.into_weights(),
        diagnostics: diagnostics(&loc, at_start),
    })
}

/// Norm and orthogonality checks of one sampled component.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Ledger {
    pub u_norms: bool,
    pub v_norms: bool,
    pub w_norms: bool,
    pub orthogonality: bool,
}

impl Ledger {
    pub fn all(&self) -> bool {
        self.u_norms && self.v_norms && self.w_norms && self.orthogonality
    }
}

/// One sampled mixture component `(ū, v̄, w̄, ℓ)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Component {
    pub u: [Vec<f64>; 4],
    pub v: [Vec<f64>; 4],
    pub w: [Vec<f64>; 2],
    pub ell: Vec<f64>,
    pub weight: f64,
    pub seed: u64,
    pub inj_upper: f64,
    pub ledger: Ledger,
    pub first_stage_tau: f64,
    pub first_stage_at_start: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Component {
    /// `log` of the unnormalized component measure over the cube.
    pub fn log_weights(&self) -> Vec<f64> {
        let n = self.ell.len();
        (0..1usize << n)
            .map(|x| {
                let s: Vec<f64> = (0..n).map(|i| spin_of(x, i)).collect();
                let sq = |a: &Vec<f64>| dot(a, &s).powi(2);
                let mut total = 0.0;
                for (lo, hi) in [(0, 2), (2, 4)] {
                    for i in lo..hi {
                        for j in lo..hi {
                            total += sq(&self.u[i]) * sq(&self.v[j]);
                        }
                    }
                }
                total + sq(&self.w[0]) + sq(&self.w[1]) + dot(&self.ell, &s)
            })
            .collect()
    }

    pub fn measure(&self) -> Result<DiscreteMeasure> {
        DiscreteMeasure::gibbs(self.ell.len(), &self.log_weights())
    }

    fn check(&mut self, n: usize) {
        let s = self.inj_upper.sqrt();
        let ns = |a: &Vec<f64>| dot(a, a);
        self.ledger = Ledger {
            u_norms: self.u.iter().all(|u| ns(u) <= 2.0 * s + 1e-8),
            v_norms: self.v.iter().all(|v| ns(v) <= 2.0 * s + 1e-8),
            w_norms: self.w.iter().all(|w| ns(w) <= 4.0 * n as f64 * self.inj_upper + 1e-8),
            orthogonality: [(&self.u[0], &self.u[1]), (&self.u[2], &self.u[3]), (&self.v[0], &self.v[1]), (&self.v[2], &self.v[3])]
                .iter()
                .all(|(a, b)| dot(a, b).abs() <= 1e-8),
        };
    }
}

fn outer_sum(vs: &[DVector<f64>]) -> DMatrix<f64> {
    let n = vs[0].len();
    vs.iter().fold(DMatrix::zeros(n, n), |acc, v| acc + v * v.transpose())
}

fn add_tables(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

/// One sample of the full decomposition driven by `rng`.
pub fn full_decomposition_sample(op: &FlattenedOperator, phi: &[f64], params: &TslParams, rng: &mut Rng) -> Result<Component> {
    let n = op.n();
    let inj_upper = op.operator_norm();
    let s = inj_upper.sqrt();
    let ns = n as f64 * s;
    let stage_params = TslParams { record_times: Vec::new(), log_trajectory: false, ..params.clone() };

    let first = run_first_stage(op, phi, &stage_params, rng)?;
    let eye = DMatrix::<f64>::identity(n, n);
    let mt1 = &first.m1 + &eye * s;
    let mt2 = &first.m2 + &eye * s;
    let q1 = quadratic_form_table(&mt1, n)?;
    let q2 = quadratic_form_table(&mt2, n)?;
    let rho: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| -2.0 * ns * (a + b)).collect();

    // M̃₁ pair, with exp(q₂²) ρ as reference.
    let ref_a: Vec<f64> = q2.iter().zip(&rho).map(|(q, r)| q * q + r).collect();
    let a = run_second_stage(&mt1, &mt1, &ref_a, phi, &stage_params, rng)?;
    let u_mat = outer_sum(&a.factors);
    let b = run_second_stage(&mt1, &u_mat, &ref_a, phi, &stage_params, rng)?;
    let v_mat = outer_sum(&b.factors);
    let uv1: Vec<f64> = quadratic_form_table(&u_mat, n)?.iter().zip(quadratic_form_table(&v_mat, n)?).map(|(a, b)| a * b).collect();

    // M̃₂ pair, with the first product term as reference.
    let ref_c = add_tables(&uv1, &rho);
    let c = run_second_stage(&mt2, &mt2, &ref_c, phi, &stage_params, rng)?;
    let u2_mat = outer_sum(&c.factors);
    let d = run_second_stage(&mt2, &u2_mat, &ref_c, phi, &stage_params, rng)?;
    let v2_mat = outer_sum(&d.factors);
    let uv2: Vec<f64> = quadratic_form_table(&u2_mat, n)?.iter().zip(quadratic_form_table(&v2_mat, n)?).map(|(a, b)| a * b).collect();
    let products = add_tables(&uv1, &uv2);

    // ρ = exp(⟨x,J₁x⟩ + ⟨x,J₂x⟩) up to a constant on the cube.
    let j_of = |mt: &DMatrix<f64>| {
        let top = sym_eigen(mt).values.first().copied().unwrap_or(0.0);
        linalg::symmetrized(&((&eye * top - mt) * (2.0 * ns)))
    };
    let j1 = j_of(&mt1);
    let j2 = j_of(&mt2);
    let ref_w1 = add_tables(&products, &quadratic_form_table(&j2, n)?);
    let w1 = run_quadratic_stage(&j1, &ref_w1, phi, &stage_params, rng)?;
    let w1v = &w1.factors[0];
    let lin1: Vec<f64> = (0..1usize << n)
        .map(|x| {
            let v = DVector::from_fn(n, |i, _| spin_of(x, i));
            v.dot(w1v).powi(2) + v.dot(&w1.tilt)
        })
        .collect();
    let ref_w2 = add_tables(&products, &lin1);
    let w2 = run_quadratic_stage(&j2, &ref_w2, phi, &stage_params, rng)?;

    let vecs = |v: &[DVector<f64>]| -> [Vec<f64>; 2] { [v[0].as_slice().to_vec(), v[1].as_slice().to_vec()] };
    let [u1, u2] = vecs(&a.factors);
    let [u3, u4] = vecs(&c.factors);
    let [v1, v2] = vecs(&b.factors);
    let [v3, v4] = vecs(&d.factors);
    let mut comp = Component {
        u: [u1, u2, u3, u4],
        v: [v1, v2, v3, v4],
        w: [w1v.as_slice().to_vec(), w2.factors[0].as_slice().to_vec()],
        ell: (&w1.tilt + &w2.tilt).as_slice().to_vec(),
        weight: 1.0,
        seed: 0,
        inj_upper,
        ledger: Ledger { u_norms: false, v_norms: false, w_norms: false, orthogonality: false },
        first_stage_tau: first.diagnostics.tau,
        first_stage_at_start: first.diagnostics.stopped_at_start,
    };
    comp.check(n);
    Ok(comp)
}

/// Sampled decomposition: one component per seed, equal weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Decomposition4 {
    pub n: usize,
    pub base_seed: u64,
    pub components: Vec<Component>,
}

impl Decomposition4 {
    /// Equal-weight mixture of the component measures.
    pub fn mixture(&self) -> Result<Vec<f64>> {
        let mut acc = vec![0.0; 1 << self.n];
        for c in &self.components {
            for (a, w) in acc.iter_mut().zip(c.measure()?.weights()) {
                *a += c.weight * w;
            }
        }
        Ok(acc)
    }
}

/// Runs `seeds` independent samples in parallel; sample `k` uses stream `k`
/// of `base_seed`, so results do not depend on the thread count.
pub fn full_decomposition(op: &FlattenedOperator, phi: &[f64], params: &TslParams, base_seed: u64, seeds: usize) -> Result<Decomposition4> {
    let components: Result<Vec<Component>> = (0..seeds as u64)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::stream(base_seed, k);
            let mut c = full_decomposition_sample(op, phi, params, &mut rng)?;
            c.seed = k;
            c.weight = 1.0 / seeds as f64;
            Ok(c)
        })
        .collect();
    Ok(Decomposition4 { n: op.n(), base_seed, components: components? })
}
