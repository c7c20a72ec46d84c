//! Tensor Curie–Weiss model `μ ∝ exp(β/n^{p-1} |Σxᵢ|^p)` and its
//! magnetization chain under Glauber dynamics.

use crate::rng::{self, Rng};
use crate::{Error, Result};
use rand::Rng as _;
use rand_distr::{Distribution, Geometric};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Default step budget for hitting-time simulations.
pub const DEFAULT_BUDGET: u64 = 100_000_000;
/// Default drift margin for [`bias_interval`].
pub const DEFAULT_MARGIN: f64 = 0.01;

/// `atanh(x)/(p x^{p-1})`.
pub fn threshold_objective(x: f64, p: f64) -> f64 {
    x.atanh() / (p * x.powf(p - 1.0))
}

/// `β* = min_{0<x<1} atanh(x)/(p x^{p-1})` by golden-section search.
pub fn beta_star(p: f64, tol: f64) -> Result<f64> {
    if !(p > 1.0) {
        return Err(Error::InvalidInput(format!("p = {p} must exceed 1")));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidInput(format!("tol = {tol} must be positive")));
    }
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (f64::EPSILON, 1.0 - f64::EPSILON);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (threshold_objective(c, p), threshold_objective(d, p));
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = threshold_objective(c, p);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = threshold_objective(d, p);
        }
    }
    Ok(threshold_objective(0.5 * (a + b), p))
}

/// Birth–death chain of `S_t = Σ X_{t,i}` under heat-bath Glauber dynamics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MagnetizationChain {
    pub n: usize,
    pub p: f64,
    pub beta: f64,
}

impl MagnetizationChain {
    pub fn new(n: usize, p: f64, beta: f64) -> Result<Self> {
        if n == 0 || !(p > 1.0) || !(beta >= 0.0) {
            return Err(Error::InvalidInput(format!("need n >= 1, p > 1, beta >= 0 (n = {n}, p = {p}, beta = {beta})")));
        }
        Ok(Self { n, p, beta })
    }

    fn energy(&self, s: i64) -> f64 {
        self.beta / (self.n as f64).powf(self.p - 1.0) * (s.abs() as f64).powf(self.p)
    }

    fn check(&self, s: i64) -> Result<()> {
        let n = self.n as i64;
        if s.abs() > n || (s - n).rem_euclid(2) != 0 {
            return Err(Error::Parity { s, n: self.n });
        }
        Ok(())
    }

    /// `(p_up, p_stay, p_down)` at magnetization `s`.
    pub fn transitions(&self, s: i64) -> Result<(f64, f64, f64)> {
        self.check(s)?;
        let ratio = s as f64 / self.n as f64;
        let h = self.energy(s);
        let up = (1.0 - ratio) / 2.0 * (1.0 + (0.5 * (self.energy(s + 2) - h)).tanh()) / 2.0;
        let down = (1.0 + ratio) / 2.0 * (1.0 + (0.5 * (self.energy(s - 2) - h)).tanh()) / 2.0;
        Ok((up, (1.0 - up - down).max(0.0), down))
    }

    /// Large-`n` form `((1∓s̃)/4)(1 ± tanh(pβ sgn(s)|s̃|^{p-1}))`.
    pub fn asymptotic_transitions(&self, s: i64) -> Result<(f64, f64)> {
        self.check(s)?;
        let st = s as f64 / self.n as f64;
        let drive = (self.p * self.beta * st.signum() * st.abs().powf(self.p - 1.0)).tanh();
        Ok(((1.0 - st) / 4.0 * (1.0 + drive), (1.0 + st) / 4.0 * (1.0 - drive)))
    }

    /// Magnetization levels `-n, -n+2, …, n`.
    pub fn levels(&self) -> Vec<i64> {
        let n = self.n as i64;
        (0..=self.n as i64).map(|k| -n + 2 * k).collect()
    }

    /// Stationary law over [`Self::levels`] from detailed balance.
    pub fn stationary_detailed_balance(&self) -> Result<Vec<f64>> {
        let levels = self.levels();
        let mut log_pi = vec![0.0; levels.len()];
        for k in 1..levels.len() {
            let (up, _, _) = self.transitions(levels[k - 1])?;
            let (_, _, down) = self.transitions(levels[k])?;
            log_pi[k] = log_pi[k - 1] + up.ln() - down.ln();
        }
        Ok(normalize_log(&log_pi))
    }

    /// Stationary law by direct summation of `C(n,(n+s)/2) exp(H(s))`.
    pub fn stationary_direct(&self) -> Vec<f64> {
        let log_pi: Vec<f64> = (0..=self.n).map(|k| ln_binomial(self.n, k) + self.energy(2 * k as i64 - self.n as i64)).collect();
        normalize_log(&log_pi)
    }

    /// First step at which the chain started from `start` reaches the
    /// opposite sign (`S < 0` from a positive start, `S > 0` from a negative
    /// one). `None` when `budget` steps are exhausted.
    pub fn hitting_time(&self, start: i64, budget: u64, rng: &mut Rng) -> Result<Option<u64>> {
        self.check(start)?;
        if start == 0 {
            return Err(Error::InvalidInput("start must be nonzero".into()));
        }
        let sign = start.signum();
        let n = self.n as i64;
        let table: Vec<(f64, f64)> = self
            .levels()
            .iter()
            .map(|&s| self.transitions(s).map(|(u, _, d)| (u, d)))
            .collect::<Result<_>>()?;
        let mut s = start;
        let mut steps: u64 = 0;
        while s * sign >= 0 {
            let (up, down) = table[((s + n) / 2) as usize];
            let move_p = up + down;
            // Holding steps before the next move, then the move itself.
            let holds = if move_p >= 1.0 {
                0
            } else {
                Geometric::new(move_p).map_err(|e| Error::InvalidInput(e.to_string()))?.sample(rng)
            };
            steps = steps.saturating_add(holds).saturating_add(1);
            if steps > budget {
                return Ok(None);
            }
            s += if rng.random::<f64>() * move_p < up { 2 } else { -2 };
        }
        Ok(Some(steps))
    }
}

fn normalize_log(log_pi: &[f64]) -> Vec<f64> {
    let max = log_pi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_pi.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// `ln C(n, k)`.
pub fn ln_binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (1..=k).map(|i| ((n - k + i) as f64 / i as f64).ln()).sum()
}

/// Largest interval of `s̃ ∈ (0,1)` on a `10⁴`-point grid where
/// `tanh(βp s̃^{p-1}) - s̃ > margin`.
pub fn bias_interval(p: f64, beta: f64, margin: f64) -> Option<(f64, f64)> {
    bias_interval_grid(p, beta, margin, 10_000)
}

pub fn bias_interval_grid(p: f64, beta: f64, margin: f64, points: usize) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    let mut run: Option<f64> = None;
    let mut last = 0.0;
    for k in 1..points {
        let s = k as f64 / points as f64;
        let ok = (beta * p * s.powf(p - 1.0)).tanh() - s > margin;
        match (ok, run) {
            (true, None) => run = Some(s),
            (false, Some(a)) => {
                if best.is_none_or(|(x, y)| last - a > y - x) {
                    best = Some((a, last));
                }
                run = None;
            }
            _ => {}
        }
        last = s;
    }
    if let Some(a) = run {
        if best.is_none_or(|(x, y)| last - a > y - x) {
            best = Some((a, last));
        }
    }
    best
}

/// `((1-q)/q)^m`: chance that a walk stepping away from a barrier with
/// probability `q > ½` ever moves `m` steps toward it.
pub fn escape_probability_bound(q: f64, m: u32) -> Result<f64> {
    if !(q > 0.5 && q <= 1.0) || m < 1 {
        return Err(Error::InvalidInput(format!("need 1/2 < q <= 1 and m >= 1 (q = {q}, m = {m})")));
    }
    Ok(((1.0 - q) / q).powi(m as i32))
}

/// Fraction of `runs` walks from 0 (step `+1` w.p. `q`, `-1` otherwise)
/// that reach `-m` within `max_steps`.
pub fn simulate_escape(q: f64, m: u32, runs: usize, max_steps: u64, rng: &mut Rng) -> f64 {
    let target = -(m as i64);
    let mut hits = 0usize;
    for _ in 0..runs {
        let mut pos = 0i64;
        for _ in 0..max_steps {
            pos += if rng.random::<f64>() < q { 1 } else { -1 };
            if pos <= target {
                hits += 1;
                break;
            }
        }
    }
    hits as f64 / runs as f64
}

/// One row of a hitting-time experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingRow {
    pub n: usize,
    pub beta: f64,
    pub p: f64,
    pub seed: u64,
    pub hitting_steps: Option<u64>,
    pub censored: bool,
}

/// Per-`n` summary; `median` is `None` when at least half the runs were censored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HittingSummary {
    pub n: usize,
    pub beta: f64,
    pub median: Option<f64>,
    pub censored: usize,
    pub runs: usize,
}

/// Simulates the chain from `S_0 = n` until `S < 0` for each `n` and seed.
/// Run `(i, k)` uses stream `i·seeds + k` of `base_seed`.
pub fn hitting_time_experiment(n_list: &[usize], p: f64, beta: f64, seeds: usize, base_seed: u64, budget: u64) -> Result<Vec<HittingRow>> {
    let jobs: Vec<(usize, usize, u64)> = n_list
        .iter()
        .enumerate()
        .flat_map(|(i, &n)| (0..seeds).map(move |k| (i, n, k as u64)))
        .collect();
    jobs.par_iter()
        .map(|&(i, n, k)| {
            let chain = MagnetizationChain::new(n, p, beta)?;
            let mut rng = rng::stream(base_seed, (i * seeds) as u64 + k);
            let hit = chain.hitting_time(n as i64, budget, &mut rng)?;
            Ok(HittingRow { n, beta, p, seed: k, hitting_steps: hit, censored: hit.is_none() })
        })
        .collect()
}

/// Medians with censoring semantics, in the order of first appearance of `n`.
pub fn summarize(rows: &[HittingRow]) -> Vec<HittingSummary> {
    let mut ns: Vec<(usize, f64)> = Vec::new();
    for r in rows {
        if !ns.iter().any(|&(n, b)| n == r.n && b == r.beta) {
            ns.push((r.n, r.beta));
        }
    }
    ns.into_iter()
        .map(|(n, beta)| {
            let group: Vec<&HittingRow> = rows.iter().filter(|r| r.n == n && r.beta == beta).collect();
            let censored = group.iter().filter(|r| r.censored).count();
            // Censored runs sort above every observed time.
            let mut times: Vec<f64> = group.iter().map(|r| r.hitting_steps.map_or(f64::INFINITY, |t| t as f64)).collect();
            times.sort_by(f64::total_cmp);
            let m = times.len();
            let median = if m == 0 {
                None
            } else if m % 2 == 1 {
                Some(times[m / 2])
            } else {
                Some(0.5 * (times[m / 2 - 1] + times[m / 2]))
            };
            HittingSummary { n, beta, median: median.filter(|v| v.is_finite()), censored, runs: m }
        })
        .collect()
}
