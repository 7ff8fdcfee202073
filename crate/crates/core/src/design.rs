//! Delay selection.
//!
//! The figure of merit is the cost `C = sqrt((σ+/Γ+)² + (σ−/Γ−)²)·sqrt(T)`, with
//! the rate uncertainties taken from a Gaussian approximation of the posterior
//! after one more measurement pair. The near-optimal selector minimizes a
//! σ_M-free form of that cost at the posterior means over a log-spaced delay
//! grid; the particle selector maximizes an expected variance reduction per
//! `sqrt(T)` over the same grid.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{MeasurementModel, PosteriorGrid};
use crate::ratio_estimator::estimate_from_counts;
use crate::signal_model::{four_expectations, ProtocolSpec, SignalParams};
use crate::spin_model::{Branch, RatePair};

/// Log-spaced delay grid in ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayGrid {
    pub min_ms: f64,
    pub max_ms: f64,
    pub points: usize,
}

impl DelayGrid {
    /// 3 µs to 5.5 ms, 1000 points.
    pub const EXPERIMENT: DelayGrid = DelayGrid {
        min_ms: 0.003,
        max_ms: 5.5,
        points: 1000,
    };

    /// 1 µs to 1 s, 1000 points.
    pub const WIDE: DelayGrid = DelayGrid {
        min_ms: 0.001,
        max_ms: 1000.0,
        points: 1000,
    };

    pub fn new(min_ms: f64, max_ms: f64, points: usize) -> Result<Self> {
        let g = Self { min_ms, max_ms, points };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min_ms.is_finite() && self.max_ms.is_finite() && 0.0 < self.min_ms && self.min_ms < self.max_ms)
            || self.points < 2
        {
            return Err(Error::InvalidConfig(format!(
                "delay grid [{}, {}] ms with {} points: need 0 < min < max and at least two points",
                self.min_ms, self.max_ms, self.points
            )));
        }
        Ok(())
    }

    pub fn values(&self) -> Vec<f64> {
        let ratio = (self.max_ms / self.min_ms).ln();
        let last = self.points - 1;
        (0..self.points)
            .map(|k| match k {
                0 => self.min_ms,
                k if k == last => self.max_ms,
                k => self.min_ms * (ratio * k as f64 / last as f64).exp(),
            })
            .collect()
    }

    /// Multiplicative spacing between neighbouring delays.
    pub fn step_ratio(&self) -> f64 {
        (self.max_ms / self.min_ms).powf(1.0 / (self.points - 1) as f64)
    }
}

/// The two delays of one measurement pair, in ms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayPair {
    pub tau_plus: f64,
    pub tau_minus: f64,
}

impl DelayPair {
    pub fn new(tau_plus: f64, tau_minus: f64) -> Self {
        Self { tau_plus, tau_minus }
    }

    pub fn get(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Plus => self.tau_plus,
            Branch::Minus => self.tau_minus,
        }
    }

    pub fn swapped(&self) -> Self {
        Self::new(self.tau_minus, self.tau_plus)
    }
}

/// Acquisition time of one measurement pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub repetitions: u64,
    /// Fixed overhead `T0` per measurement pair, in s.
    #[serde(default)]
    pub overhead_s: f64,
    /// Fixed time per shot of each of the eight signals, in s.
    #[serde(default)]
    pub per_shot_s: f64,
}

impl TimingModel {
    pub fn new(repetitions: u64) -> Self {
        Self {
            repetitions,
            overhead_s: 0.0,
            per_shot_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 || !(self.overhead_s >= 0.0) || !(self.per_shot_s >= 0.0) {
            return Err(Error::InvalidConfig(
                "timing needs positive repetitions and non-negative overheads".into(),
            ));
        }
        Ok(())
    }

    /// Time spent in the delays alone, `2R(τ+ + τ−)`, in s.
    pub fn delay_time(&self, delays: &DelayPair) -> f64 {
        2.0 * self.repetitions as f64 * (delays.tau_plus + delays.tau_minus) * 1e-3
    }

    /// `T = 2R(τ+ + τ−) + T0 + 8R·t_shot`, in s.
    pub fn acquisition_time(&self, delays: &DelayPair) -> f64 {
        self.delay_time(delays) + self.overhead_s + 8.0 * self.repetitions as f64 * self.per_shot_s
    }
}

/// Gaussian approximation of the posterior after one measurement pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianApprox {
    pub a_plus: f64,
    pub a_minus: f64,
    pub a_zero: f64,
    pub sigma_gamma_plus: f64,
    pub sigma_gamma_minus: f64,
    pub covariance: f64,
}

/// Determinants below this fraction of `a+·a−` are treated as singular.
const SINGULAR: f64 = 1e-10;

/// Rows `[∂M+/∂Γ+, ∂M+/∂Γ−]` and `[∂M−/∂Γ+, ∂M−/∂Γ−]`.
type Jacobian = [[f64; 2]; 2];

fn jacobian(model: &dyn MeasurementModel, delays: &DelayPair, rates: &RatePair) -> Jacobian {
    let (p, m) = (rates.gamma_plus(), rates.gamma_minus());
    [
        model.gradient(Branch::Plus, delays.tau_plus, p, m),
        model.gradient(Branch::Minus, delays.tau_minus, p, m),
    ]
}

fn approx_from_jacobian(j: &Jacobian, sigma_m: (f64, f64)) -> Result<GaussianApprox> {
    let (wp, wm) = (1.0 / (sigma_m.0 * sigma_m.0), 1.0 / (sigma_m.1 * sigma_m.1));
    let a_plus = wp * j[0][0] * j[0][0] + wm * j[1][0] * j[1][0];
    let a_minus = wp * j[0][1] * j[0][1] + wm * j[1][1] * j[1][1];
    let a_zero = wp * j[0][0] * j[0][1] + wm * j[1][0] * j[1][1];
    // a+a− − a0² = wp·wm·(det J)², evaluated in the product form to avoid cancellation
    let det_j = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let det = wp * wm * det_j * det_j;
    if !(det.is_finite() && det > SINGULAR * a_plus * a_minus) {
        return Err(Error::UninformativeDesign);
    }
    Ok(GaussianApprox {
        a_plus,
        a_minus,
        a_zero,
        sigma_gamma_plus: (a_minus / det).sqrt(),
        sigma_gamma_minus: (a_plus / det).sqrt(),
        covariance: -a_zero / det,
    })
}

fn check_sigma(sigma_m: (f64, f64)) -> Result<()> {
    for (name, s) in [("sigma_m_plus", sigma_m.0), ("sigma_m_minus", sigma_m.1)] {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidParameter {
                name,
                value: s,
                reason: "measurement uncertainty must be positive and finite",
            });
        }
    }
    Ok(())
}

/// Rate uncertainties from the curvature coefficients `a±`, `a0`.
pub fn gaussian_sigma(
    delays: &DelayPair,
    rates: &RatePair,
    sigma_m: (f64, f64),
    model: &dyn MeasurementModel,
) -> Result<GaussianApprox> {
    check_sigma(sigma_m)?;
    approx_from_jacobian(&jacobian(model, delays, rates), sigma_m)
}

/// Rate covariance `J⁻¹·diag(σ_M²)·J⁻ᵀ` as `[[σ+², cov], [cov, σ−²]]`.
pub fn gaussian_covariance_jacobian(
    delays: &DelayPair,
    rates: &RatePair,
    sigma_m: (f64, f64),
    model: &dyn MeasurementModel,
) -> Result<[[f64; 2]; 2]> {
    check_sigma(sigma_m)?;
    let j = jacobian(model, delays, rates);
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    if !(det.is_finite() && det != 0.0) {
        return Err(Error::UninformativeDesign);
    }
    let inv = [[j[1][1] / det, -j[0][1] / det], [-j[1][0] / det, j[0][0] / det]];
    let s = [sigma_m.0 * sigma_m.0, sigma_m.1 * sigma_m.1];
    let mut out = [[0.0; 2]; 2];
    for r in 0..2 {
        for c in 0..2 {
            out[r][c] = (0..2).map(|k| inv[r][k] * s[k] * inv[c][k]).sum();
        }
    }
    Ok(out)
}

fn combine(sigma_plus: f64, sigma_minus: f64, rates: &RatePair, t: f64) -> f64 {
    ((sigma_plus / rates.gamma_plus()).powi(2) + (sigma_minus / rates.gamma_minus()).powi(2)).sqrt() * t.sqrt()
}

/// Cost of one delay pair; infinite for an uninformative design.
pub fn cost(
    delays: &DelayPair,
    rates: &RatePair,
    sigma_m: (f64, f64),
    timing: &TimingModel,
    model: &dyn MeasurementModel,
) -> f64 {
    match gaussian_sigma(delays, rates, sigma_m, model) {
        Ok(g) => combine(g.sigma_gamma_plus, g.sigma_gamma_minus, rates, timing.acquisition_time(delays)),
        Err(_) => f64::INFINITY,
    }
}

/// Per-delay gradients of both measurements, shared by every cell of a scan.
struct Table {
    taus: Vec<f64>,
    plus: Vec<[f64; 2]>,
    minus: Vec<[f64; 2]>,
}

fn tabulate(model: &dyn MeasurementModel, rates: &RatePair, grid: &DelayGrid) -> Table {
    let taus = grid.values();
    let (p, m) = (rates.gamma_plus(), rates.gamma_minus());
    let plus = taus.iter().map(|&t| model.gradient(Branch::Plus, t, p, m)).collect();
    let minus = taus.iter().map(|&t| model.gradient(Branch::Minus, t, p, m)).collect();
    Table { taus, plus, minus }
}

/// Result of a delay-grid scan.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayChoice {
    pub delays: DelayPair,
    pub cost: f64,
    pub index_plus: usize,
    pub index_minus: usize,
}

/// Row-major argmin; NaN counts as infinite, ties go to the smallest τ+ and then τ−.
fn argmin<F>(n: usize, cell: F) -> (usize, usize, f64)
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let rows: Vec<(usize, f64)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut best = (0, f64::INFINITY);
            for j in 0..n {
                let c = cell(i, j);
                if c < best.1 {
                    best = (j, c);
                }
            }
            best
        })
        .collect();
    let mut out = (0, rows[0].0, rows[0].1);
    for (i, &(j, c)) in rows.iter().enumerate() {
        if c < out.2 {
            out = (i, j, c);
        }
    }
    out
}

/// Approximate cost over σ_M with equal, delay-independent uncertainties:
/// `sqrt(T)/(Γ+Γ−)·sqrt(num/den)` where `num` sums the squared
/// rate-weighted partial derivatives and `den` is the squared Jacobian
/// determinant.
pub fn approximate_cost(
    delays: &DelayPair,
    rates: &RatePair,
    timing: &TimingModel,
    model: &dyn MeasurementModel,
) -> f64 {
    let j = jacobian(model, delays, rates);
    approx_cell(&j[0], &j[1], rates, timing.acquisition_time(delays))
}

fn branch_numerator(g: &[f64; 2], rates: &RatePair) -> f64 {
    (rates.gamma_plus() * g[0]).powi(2) + (rates.gamma_minus() * g[1]).powi(2)
}

fn approx_cell(gp: &[f64; 2], gm: &[f64; 2], rates: &RatePair, t: f64) -> f64 {
    approx_from_parts(branch_numerator(gp, rates), branch_numerator(gm, rates), gp, gm, rates, t)
}

fn approx_from_parts(qp: f64, qm: f64, gp: &[f64; 2], gm: &[f64; 2], rates: &RatePair, t: f64) -> f64 {
    let det = gp[0] * gm[1] - gp[1] * gm[0];
    let c = t.sqrt() / (rates.gamma_plus() * rates.gamma_minus()) * ((qp + qm) / (det * det)).sqrt();
    if c.is_nan() {
        f64::INFINITY
    } else {
        c
    }
}

/// Near-optimal delay choice: minimizes [`approximate_cost`] at `rates`
/// (normally the posterior means) over the delay grid.
pub fn nob_select_delays(
    rates: &RatePair,
    timing: &TimingModel,
    grid: &DelayGrid,
    model: &dyn MeasurementModel,
) -> DelayChoice {
    let t = tabulate(model, rates, grid);
    let qp: Vec<f64> = t.plus.iter().map(|g| branch_numerator(g, rates)).collect();
    let qm: Vec<f64> = t.minus.iter().map(|g| branch_numerator(g, rates)).collect();
    let r2 = 2.0 * timing.repetitions as f64 * 1e-3;
    let fixed = timing.acquisition_time(&DelayPair::new(0.0, 0.0));
    let (i, j, c) = argmin(t.taus.len(), |i, j| {
        let time = r2 * (t.taus[i] + t.taus[j]) + fixed;
        approx_from_parts(qp[i], qm[j], &t.plus[i], &t.minus[j], rates, time)
    });
    DelayChoice {
        delays: DelayPair::new(t.taus[i], t.taus[j]),
        cost: c,
        index_plus: i,
        index_minus: j,
    }
}

/// Full cost minimized over the delay grid with delay-dependent uncertainties
/// `sigma_m(branch, τ)`.
pub fn full_cost_select<S>(
    rates: &RatePair,
    sigma_m: S,
    timing: &TimingModel,
    grid: &DelayGrid,
    model: &dyn MeasurementModel,
) -> DelayChoice
where
    S: Fn(Branch, f64) -> f64,
{
    let t = tabulate(model, rates, grid);
    let sp: Vec<f64> = t.taus.iter().map(|&x| sigma_m(Branch::Plus, x)).collect();
    let sm: Vec<f64> = t.taus.iter().map(|&x| sigma_m(Branch::Minus, x)).collect();
    let (i, j, c) = argmin(t.taus.len(), |i, j| {
        let delays = DelayPair::new(t.taus[i], t.taus[j]);
        if !(sp[i] > 0.0 && sm[j] > 0.0 && sp[i].is_finite() && sm[j].is_finite()) {
            return f64::INFINITY;
        }
        match approx_from_jacobian(&[t.plus[i], t.minus[j]], (sp[i], sm[j])) {
            Ok(g) => combine(g.sigma_gamma_plus, g.sigma_gamma_minus, rates, timing.acquisition_time(&delays)),
            Err(_) => f64::INFINITY,
        }
    });
    DelayChoice {
        delays: DelayPair::new(t.taus[i], t.taus[j]),
        cost: c,
        index_plus: i,
        index_minus: j,
    }
}

/// Full cost at every cell of the grid, row-major over (τ+, τ−).
pub fn cost_surface(
    rates: &RatePair,
    sigma_m: (f64, f64),
    timing: &TimingModel,
    grid: &DelayGrid,
    model: &dyn MeasurementModel,
) -> Vec<f64> {
    let t = tabulate(model, rates, grid);
    let n = t.taus.len();
    (0..n * n)
        .into_par_iter()
        .map(|k| {
            let (i, j) = (k / n, k % n);
            let delays = DelayPair::new(t.taus[i], t.taus[j]);
            match approx_from_jacobian(&[t.plus[i], t.minus[j]], sigma_m) {
                Ok(g) => combine(g.sigma_gamma_plus, g.sigma_gamma_minus, rates, timing.acquisition_time(&delays)),
                Err(_) => f64::INFINITY,
            }
        })
        .collect()
}

/// Predicted σ_M of one measurement from the expected counts propagated
/// through the ratio estimator.
pub fn expected_sigma_m(
    protocol: &ProtocolSpec,
    branch: Branch,
    tau: f64,
    rates: &RatePair,
    params: &SignalParams,
) -> Result<f64> {
    let pair = protocol.measurement(branch).oriented(params);
    let e = four_expectations(pair, tau, rates, params)?;
    Ok(estimate_from_counts(e)?.sigma_m)
}

/// Weighted `(Γ+, Γ−)` samples standing in for the posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub particles: Vec<(f64, f64)>,
    pub weights: Vec<f64>,
}

impl ParticleCloud {
    pub fn point_mass(rates: &RatePair, n: usize) -> Self {
        Self {
            particles: vec![(rates.gamma_plus(), rates.gamma_minus()); n.max(1)],
            weights: vec![1.0 / n.max(1) as f64; n.max(1)],
        }
    }

    /// Resamples the grid posterior and spreads every draw uniformly over its
    /// grid cell, clamped to the hard bounds.
    pub fn from_grid<R: Rng + ?Sized>(grid: &PosteriorGrid, n: usize, rng: &mut R) -> Self {
        let spacing = |a: &[f64]| (a[a.len() - 1] - a[0]) / (a.len() - 1) as f64;
        let (hp, hm) = (spacing(grid.plus_axis()), spacing(grid.minus_axis()));
        let (lo, hi) = grid.bounds();
        let particles = grid
            .sample_nodes(n, rng)
            .into_iter()
            .map(|(p, m)| {
                let jp = (rng.random::<f64>() - 0.5) * hp;
                let jm = (rng.random::<f64>() - 0.5) * hm;
                ((p + jp).clamp(lo, hi), (m + jm).clamp(lo, hi))
            })
            .collect();
        Self {
            particles,
            weights: vec![1.0 / n as f64; n],
        }
    }

    fn mean_cov(&self) -> ([f64; 2], [[f64; 2]; 2]) {
        let wsum: f64 = self.weights.iter().sum();
        let mut mean = [0.0; 2];
        for (w, (p, m)) in self.weights.iter().zip(&self.particles) {
            mean[0] += w * p;
            mean[1] += w * m;
        }
        mean = mean.map(|v| v / wsum);
        let mut cov = [[0.0; 2]; 2];
        for (w, (p, m)) in self.weights.iter().zip(&self.particles) {
            let d = [p - mean[0], m - mean[1]];
            for r in 0..2 {
                for c in 0..2 {
                    cov[r][c] += w * d[r] * d[c];
                }
            }
        }
        (mean, cov.map(|row| row.map(|v| v / wsum)))
    }
}

/// Settings of the particle selector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PfConfig {
    pub particles: usize,
    /// Points of the log-spaced delay grid searched by the selector; the span
    /// is that of the main delay grid.
    pub delay_points: usize,
}

impl Default for PfConfig {
    fn default() -> Self {
        Self {
            particles: 100_000,
            delay_points: 200,
        }
    }
}

/// Per-delay moments of the predicted measurement over the cloud.
struct Predictive {
    /// `Cov(θ, y)` for θ = (Γ+, Γ−).
    cross: [f64; 2],
    var: f64,
}

fn predictive(cloud: &ParticleCloud, mean: &[f64; 2], wsum: f64, model: &dyn MeasurementModel, branch: Branch, tau: f64) -> Predictive {
    let mut ybar = 0.0;
    let ys: Vec<f64> = cloud
        .particles
        .iter()
        .map(|&(p, m)| model.predict(branch, tau, p, m))
        .collect();
    for (w, y) in cloud.weights.iter().zip(&ys) {
        ybar += w * y;
    }
    ybar /= wsum;
    let (mut c0, mut c1, mut v) = (0.0, 0.0, 0.0);
    for ((w, y), (p, m)) in cloud.weights.iter().zip(&ys).zip(&cloud.particles) {
        let dy = y - ybar;
        c0 += w * (p - mean[0]) * dy;
        c1 += w * (m - mean[1]) * dy;
        v += w * dy * dy;
    }
    Predictive {
        cross: [c0 / wsum, c1 / wsum],
        var: v / wsum,
    }
}

/// Expected reduction of the fractional rate variances from one measurement
/// pair, by moment matching (a linear-Gaussian update) over the cloud, divided
/// by `sqrt(T)`.
///
/// The cross-covariance of the two predicted measurements is taken from the
/// linearization `y ≈ ȳ + cᵀΣ⁻¹(θ − θ̄)`, i.e. `c+ᵀΣ⁻¹c−`.
/// `sigma_m(branch, τ)` is the expected measurement noise.
pub fn pf_select_delays<S>(
    cloud: &ParticleCloud,
    sigma_m: S,
    timing: &TimingModel,
    grid: &DelayGrid,
    model: &dyn MeasurementModel,
) -> Result<DelayChoice>
where
    S: Fn(Branch, f64) -> f64 + Sync,
{
    if cloud.particles.is_empty() || cloud.particles.len() != cloud.weights.len() {
        return Err(Error::InvalidConfig("particle cloud is empty or malformed".into()));
    }
    let (mean, cov) = cloud.mean_cov();
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    let scale = cov[0][0] * cov[1][1];
    let fallback = || -> Result<DelayChoice> {
        let first = cloud.particles[0];
        let rates = if cloud.particles.iter().all(|&q| q == first) {
            RatePair::new(first.0, first.1)?
        } else {
            RatePair::new(mean[0], mean[1])?
        };
        Ok(nob_select_delays(&rates, timing, grid, model))
    };
    if !(det.is_finite() && scale > 0.0 && det > 1e-12 * scale) {
        return fallback();
    }
    let inv = [[cov[1][1] / det, -cov[0][1] / det], [-cov[1][0] / det, cov[0][0] / det]];
    let wsum: f64 = cloud.weights.iter().sum();
    let taus = grid.values();
    let stats: Vec<(Predictive, Predictive, f64, f64)> = taus
        .par_iter()
        .map(|&t| {
            (
                predictive(cloud, &mean, wsum, model, Branch::Plus, t),
                predictive(cloud, &mean, wsum, model, Branch::Minus, t),
                sigma_m(Branch::Plus, t),
                sigma_m(Branch::Minus, t),
            )
        })
        .collect();
    let weights = [1.0 / (mean[0] * mean[0]), 1.0 / (mean[1] * mean[1])];
    let fixed = timing.acquisition_time(&DelayPair::new(0.0, 0.0));
    let r2 = 2.0 * timing.repetitions as f64 * 1e-3;
    let (i, j, neg_utility) = argmin(taus.len(), |i, j| {
        let (yp, sp2) = (&stats[i].0, stats[i].2 * stats[i].2);
        let (ym, sm2) = (&stats[j].1, stats[j].3 * stats[j].3);
        let cp = yp.cross;
        let cm = ym.cross;
        let c_pm = cp[0] * (inv[0][0] * cm[0] + inv[0][1] * cm[1]) + cp[1] * (inv[1][0] * cm[0] + inv[1][1] * cm[1]);
        // innovation covariance of (y+, y−)
        let s = [[yp.var + sp2, c_pm], [c_pm, ym.var + sm2]];
        let sdet = s[0][0] * s[1][1] - s[0][1] * s[1][0];
        if !(sdet > 0.0) {
            return f64::INFINITY;
        }
        let sinv = [[s[1][1] / sdet, -s[0][1] / sdet], [-s[1][0] / sdet, s[0][0] / sdet]];
        // ΔΣ = C S⁻¹ Cᵀ with C = [c+, c−]; only the diagonal is needed.
        let mut gain = 0.0;
        for (k, w) in weights.iter().enumerate() {
            let row = [cp[k], cm[k]];
            let q: f64 = (0..2).map(|a| (0..2).map(|b| row[a] * sinv[a][b] * row[b]).sum::<f64>()).sum();
            gain += w * q;
        }
        let time = r2 * (taus[i] + taus[j]) + fixed;
        let u = gain / time.sqrt();
        if u.is_finite() {
            -u
        } else {
            f64::INFINITY
        }
    });
    if !neg_utility.is_finite() {
        return fallback();
    }
    Ok(DelayChoice {
        delays: DelayPair::new(taus[i], taus[j]),
        cost: -neg_utility,
        index_plus: i,
        index_minus: j,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::RobustModel;

    fn r13() -> RatePair {
        RatePair::new(1.0, 3.0).unwrap()
    }

    #[test]
    fn delay_grid_endpoints() {
        let v = DelayGrid::EXPERIMENT.values();
        assert_eq!(v.len(), 1000);
        assert_eq!(v[0], 0.003);
        assert_eq!(v[999], 5.5);
        assert!(v.windows(2).all(|w| w[1] > w[0]));
        assert!(DelayGrid::new(1.0, 1.0, 10).is_err());
    }

    #[test]
    fn timing_arithmetic() {
        let t = TimingModel::new(1_000_000);
        assert!((t.acquisition_time(&DelayPair::new(0.1, 0.1)) - 400.0).abs() < 1e-9);
        let t0 = TimingModel {
            overhead_s: 2.5,
            ..t
        };
        assert!((t0.acquisition_time(&DelayPair::new(0.1, 0.1)) - 402.5).abs() < 1e-9);
    }

    #[test]
    fn dual_paths_agree() {
        let d = DelayPair::new(0.3, 0.1);
        let g = gaussian_sigma(&d, &r13(), (0.02, 0.03), &RobustModel).unwrap();
        let c = gaussian_covariance_jacobian(&d, &r13(), (0.02, 0.03), &RobustModel).unwrap();
        assert!((g.sigma_gamma_plus.powi(2) / c[0][0] - 1.0).abs() < 1e-12);
        assert!((g.sigma_gamma_minus.powi(2) / c[1][1] - 1.0).abs() < 1e-12);
        assert!((g.covariance / c[0][1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_delays_are_uninformative() {
        let d = DelayPair::new(0.0, 0.0);
        assert_eq!(
            gaussian_sigma(&d, &r13(), (0.02, 0.02), &RobustModel),
            Err(Error::UninformativeDesign)
        );
        assert!(cost(&d, &r13(), (0.02, 0.02), &TimingModel::new(1000), &RobustModel).is_infinite());
    }

    #[test]
    fn cost_scales_with_sigma() {
        let d = DelayPair::new(0.3, 0.1);
        let t = TimingModel::new(1000);
        let a = cost(&d, &r13(), (0.02, 0.03), &t, &RobustModel);
        let b = cost(&d, &r13(), (0.06, 0.09), &t, &RobustModel);
        assert!((b / a - 3.0).abs() < 1e-12);
    }

    #[test]
    fn approximate_cost_is_full_cost_at_unit_sigma() {
        let d = DelayPair::new(0.25, 0.09);
        let t = TimingModel::new(1000);
        let a = approximate_cost(&d, &r13(), &t, &RobustModel);
        let f = cost(&d, &r13(), (1.0, 1.0), &t, &RobustModel);
        assert!((a / f - 1.0).abs() < 1e-10);
    }

    #[test]
    fn equal_rates_give_equal_delays() {
        let r = RatePair::new(2.0, 2.0).unwrap();
        let c = nob_select_delays(&r, &TimingModel::new(1000), &DelayGrid::EXPERIMENT, &RobustModel);
        assert_eq!(c.delays.tau_plus, c.delays.tau_minus);
    }

    #[test]
    fn point_mass_cloud_falls_back() {
        let cloud = ParticleCloud::point_mass(&r13(), 10);
        let t = TimingModel::new(1000);
        let pf = pf_select_delays(&cloud, |_, _| 0.01, &t, &DelayGrid::EXPERIMENT, &RobustModel).unwrap();
        let nob = nob_select_delays(&r13(), &t, &DelayGrid::EXPERIMENT, &RobustModel);
        assert_eq!(pf, nob);
    }
}
