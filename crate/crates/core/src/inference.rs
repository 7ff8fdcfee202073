//! Grid posterior over `(Γ+, Γ−)` with sequential Bayesian updates.
//!
//! Weights are stored as normalized logarithms so that hundreds of sharp
//! updates never underflow. Moments treat each node as a point mass.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_delay, Error, Result};
use crate::signal_model::{bilinear, generic_difference, ProtocolSpec, SignalPair, SignalParams};
use crate::spin_model::{
    model_gradient_unchecked, model_m_unchecked, propagator, propagator_gradient, Branch, Propagator,
    RatePair,
};

/// Default global prior support in ms⁻¹.
pub const DEFAULT_BOUNDS: (f64, f64) = (0.055, 100.0);
/// Default number of nodes per axis.
pub const DEFAULT_GRID_POINTS: usize = 200;
/// Half-width of the regridding box in posterior standard deviations.
pub const REGRID_SIGMAS: f64 = 10.0;

/// Expected normalized measurement `M̃±(τ; Γ+, Γ−)` of a protocol.
pub trait MeasurementModel: Send + Sync {
    fn predict(&self, branch: Branch, tau: f64, gamma_plus: f64, gamma_minus: f64) -> f64;

    /// `(∂M̃/∂Γ+, ∂M̃/∂Γ−)`.
    fn gradient(&self, branch: Branch, tau: f64, gamma_plus: f64, gamma_minus: f64) -> [f64; 2];
}

/// The drift-insensitive `(±0, 00)` measurement, evaluated in closed form.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RobustModel;

fn own_other(branch: Branch, gamma_plus: f64, gamma_minus: f64) -> (f64, f64) {
    match branch {
        Branch::Plus => (gamma_plus, gamma_minus),
        Branch::Minus => (gamma_minus, gamma_plus),
    }
}

impl MeasurementModel for RobustModel {
    fn predict(&self, branch: Branch, tau: f64, gamma_plus: f64, gamma_minus: f64) -> f64 {
        let (own, other) = own_other(branch, gamma_plus, gamma_minus);
        model_m_unchecked(tau, own, other)
    }

    fn gradient(&self, branch: Branch, tau: f64, gamma_plus: f64, gamma_minus: f64) -> [f64; 2] {
        let (own, other) = own_other(branch, gamma_plus, gamma_minus);
        let [d_own, d_other] = model_gradient_unchecked(tau, own, other);
        match branch {
            Branch::Plus => [d_own, d_other],
            Branch::Minus => [d_other, d_own],
        }
    }
}

/// Any protocol, evaluated from the propagator and the signal operators.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtocolModel {
    pub protocol: ProtocolSpec,
    pub params: SignalParams,
    // (left1, right1, left2, right2, τ=0 denominator) per branch
    parts: [([f64; 3], [f64; 3], [f64; 3], [f64; 3], f64); 2],
}

impl ProtocolModel {
    pub fn new(protocol: ProtocolSpec, params: SignalParams) -> Result<Self> {
        params.validate()?;
        protocol.validate(&params)?;
        let part = |pair: SignalPair| {
            let (l1, r1) = pair.first.sandwich(&params);
            let (l2, r2) = pair.second.sandwich(&params);
            let id = Propagator::identity();
            let d0 = bilinear(&l1, &id.entries, &r1) - bilinear(&l2, &id.entries, &r2);
            (l1, r1, l2, r2, d0)
        };
        Ok(Self {
            protocol,
            params,
            parts: [part(protocol.plus), part(protocol.minus)],
        })
    }

    fn part(&self, branch: Branch) -> &([f64; 3], [f64; 3], [f64; 3], [f64; 3], f64) {
        match branch {
            Branch::Plus => &self.parts[0],
            Branch::Minus => &self.parts[1],
        }
    }

    /// `(S1 − S2)(τ)/(S1 − S2)(0)` via expected counts, the reference evaluation
    /// for [`MeasurementModel::predict`].
    pub fn normalized_expectation(&self, branch: Branch, tau: f64, rates: &RatePair) -> Result<f64> {
        check_delay(tau)?;
        let pair = self.protocol.measurement(branch);
        let p = propagator(tau, rates)?;
        Ok(generic_difference(pair, &p, &self.params) / generic_difference(pair, &Propagator::identity(), &self.params))
    }
}

impl MeasurementModel for ProtocolModel {
    fn predict(&self, branch: Branch, tau: f64, gamma_plus: f64, gamma_minus: f64) -> f64 {
        let Ok(rates) = RatePair::new(gamma_plus, gamma_minus) else {
            return f64::NAN;
        };
        let Ok(p) = propagator(tau, &rates) else {
            return f64::NAN;
        };
        let (l1, r1, l2, r2, d0) = self.part(branch);
        (bilinear(l1, &p.entries, r1) - bilinear(l2, &p.entries, r2)) / d0
    }

    fn gradient(&self, branch: Branch, tau: f64, gamma_plus: f64, gamma_minus: f64) -> [f64; 2] {
        let Ok(rates) = RatePair::new(gamma_plus, gamma_minus) else {
            return [f64::NAN; 2];
        };
        let Ok(dp) = propagator_gradient(tau, &rates) else {
            return [f64::NAN; 2];
        };
        let (l1, r1, l2, r2, d0) = self.part(branch);
        dp.map(|d| (bilinear(l1, &d, r1) - bilinear(l2, &d, r2)) / d0)
    }
}

/// Two normalized outcomes with delays and uncertainties.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPair {
    pub m_plus: f64,
    pub m_minus: f64,
    pub sigma_plus: f64,
    pub sigma_minus: f64,
    pub tau_plus: f64,
    pub tau_minus: f64,
}

impl MeasurementPair {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [("sigma_plus", self.sigma_plus), ("sigma_minus", self.sigma_minus)] {
            if !(s > 0.0) || s.is_nan() {
                return Err(Error::InvalidParameter {
                    name,
                    value: s,
                    reason: "measurement uncertainty must be positive",
                });
            }
        }
        for (name, t) in [("tau_plus", self.tau_plus), ("tau_minus", self.tau_minus)] {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::InvalidParameter {
                    name,
                    value: t,
                    reason: "delay must be positive",
                });
            }
        }
        if !(self.m_plus.is_finite() && self.m_minus.is_finite()) {
            return Err(Error::Estimation("non-finite measurement value"));
        }
        Ok(())
    }

    /// The same data with the roles of the two branches exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            m_plus: self.m_minus,
            m_minus: self.m_plus,
            sigma_plus: self.sigma_minus,
            sigma_minus: self.sigma_plus,
            tau_plus: self.tau_minus,
            tau_minus: self.tau_plus,
        }
    }

    pub fn value(&self, branch: Branch) -> (f64, f64, f64) {
        match branch {
            Branch::Plus => (self.m_plus, self.sigma_plus, self.tau_plus),
            Branch::Minus => (self.m_minus, self.sigma_minus, self.tau_minus),
        }
    }
}

/// `−χ+² − χ−²` with `χ± = (M± − M̃±)/(√2 σ±)`.
pub fn log_likelihood_with(model: &dyn MeasurementModel, pair: &MeasurementPair, gamma_plus: f64, gamma_minus: f64) -> f64 {
    let mut acc = 0.0;
    for b in Branch::BOTH {
        let (m, s, tau) = pair.value(b);
        if s.is_infinite() {
            continue;
        }
        let r = m - model.predict(b, tau, gamma_plus, gamma_minus);
        acc -= r * r / (2.0 * s * s);
    }
    acc
}

/// Log-likelihood of `pair` under the robust model.
pub fn log_likelihood(pair: &MeasurementPair, rates: &RatePair) -> f64 {
    log_likelihood_with(&RobustModel, pair, rates.gamma_plus(), rates.gamma_minus())
}

/// Prior measure on the rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PriorMeasure {
    /// Flat in Γ.
    #[default]
    Uniform,
    /// Flat in log Γ.
    LogUniform,
}

impl PriorMeasure {
    fn log_density(self, gamma_plus: f64, gamma_minus: f64) -> f64 {
        match self {
            PriorMeasure::Uniform => 0.0,
            PriorMeasure::LogUniform => -(gamma_plus.ln() + gamma_minus.ln()),
        }
    }
}

/// Posterior moments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean_plus: f64,
    pub mean_minus: f64,
    pub sigma_plus: f64,
    pub sigma_minus: f64,
    pub covariance: f64,
}

impl Moments {
    pub fn means(&self) -> Result<RatePair> {
        RatePair::new(self.mean_plus, self.mean_minus)
    }

    pub fn sigma(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Plus => self.sigma_plus,
            Branch::Minus => self.sigma_minus,
        }
    }

    pub fn mean(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Plus => self.mean_plus,
            Branch::Minus => self.mean_minus,
        }
    }
}

/// Discretized posterior. Row index runs over Γ+, column index over Γ−.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGrid {
    plus_axis: Vec<f64>,
    minus_axis: Vec<f64>,
    log_weights: Vec<f64>,
    bounds: (f64, f64),
    prior: PriorMeasure,
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let step = (hi - lo) / (n - 1) as f64;
    let mut v: Vec<f64> = (0..n).map(|k| lo + step * k as f64).collect();
    v[n - 1] = hi;
    v
}

fn check_axis(name: &str, axis: &[f64], bounds: (f64, f64)) -> Result<()> {
    if axis.len() < 2 {
        return Err(Error::InvalidGrid(format!("{name} axis needs at least two points")));
    }
    if !axis.windows(2).all(|w| w[1] > w[0]) {
        return Err(Error::InvalidGrid(format!("{name} axis must be strictly increasing")));
    }
    if axis[0] < bounds.0 || axis[axis.len() - 1] > bounds.1 {
        return Err(Error::InvalidGrid(format!(
            "{name} axis [{}, {}] exceeds the bounds [{}, {}]",
            axis[0],
            axis[axis.len() - 1],
            bounds.0,
            bounds.1
        )));
    }
    Ok(())
}

fn check_bounds(bounds: (f64, f64)) -> Result<()> {
    if bounds.0.is_finite() && bounds.1.is_finite() && 0.0 < bounds.0 && bounds.0 < bounds.1 {
        Ok(())
    } else {
        Err(Error::InvalidGrid(format!(
            "bounds [{}, {}] must satisfy 0 < lo < hi",
            bounds.0, bounds.1
        )))
    }
}

/// Normalizes log weights in place so that `Σ exp(w) = 1`; returns `false` if
/// no finite weight remains.
fn normalize_log(w: &mut [f64]) -> bool {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return false;
    }
    let sum: f64 = w.iter().map(|v| (v - max).exp()).sum();
    let shift = max + sum.ln();
    for v in w.iter_mut() {
        *v -= shift;
    }
    true
}

/// Log-likelihood below which `exp` underflows to zero.
const UNDERFLOW_LOG: f64 = -708.0;

impl PosteriorGrid {
    /// Prior grid on arbitrary axes.
    pub fn new(plus_axis: Vec<f64>, minus_axis: Vec<f64>, bounds: (f64, f64), prior: PriorMeasure) -> Result<Self> {
        check_bounds(bounds)?;
        check_axis("gamma_plus", &plus_axis, bounds)?;
        check_axis("gamma_minus", &minus_axis, bounds)?;
        let mut log_weights = Vec::with_capacity(plus_axis.len() * minus_axis.len());
        for &p in &plus_axis {
            for &m in &minus_axis {
                log_weights.push(prior.log_density(p, m));
            }
        }
        normalize_log(&mut log_weights);
        Ok(Self {
            plus_axis,
            minus_axis,
            log_weights,
            bounds,
            prior,
        })
    }

    /// Evenly spaced `n × n` prior grid spanning `bounds`.
    pub fn uniform(bounds: (f64, f64), n: usize, prior: PriorMeasure) -> Result<Self> {
        check_bounds(bounds)?;
        if n < 2 {
            return Err(Error::InvalidGrid("at least two points per axis are required".into()));
        }
        Self::new(linspace(bounds.0, bounds.1, n), linspace(bounds.0, bounds.1, n), bounds, prior)
    }

    /// Evenly spaced prior grid on the given box.
    pub fn on_box(
        plus: (f64, f64),
        minus: (f64, f64),
        n: usize,
        bounds: (f64, f64),
        prior: PriorMeasure,
    ) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGrid("at least two points per axis are required".into()));
        }
        Self::new(linspace(plus.0, plus.1, n), linspace(minus.0, minus.1, n), bounds, prior)
    }

    pub fn plus_axis(&self) -> &[f64] {
        &self.plus_axis
    }

    pub fn minus_axis(&self) -> &[f64] {
        &self.minus_axis
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    pub fn prior(&self) -> PriorMeasure {
        self.prior
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.plus_axis.len(), self.minus_axis.len())
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    /// Normalized weights, row-major over (Γ+, Γ−).
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn weight(&self, i_plus: usize, j_minus: usize) -> f64 {
        self.log_weights[i_plus * self.minus_axis.len() + j_minus].exp()
    }

    /// Node with the largest weight (first in row-major order on ties).
    pub fn argmax(&self) -> (f64, f64) {
        let mut best = 0;
        for (k, w) in self.log_weights.iter().enumerate() {
            if *w > self.log_weights[best] {
                best = k;
            }
        }
        let n = self.minus_axis.len();
        (self.plus_axis[best / n], self.minus_axis[best % n])
    }

    /// Log-likelihood of every node, row-major.
    pub fn node_log_likelihood(&self, model: &dyn MeasurementModel, pair: &MeasurementPair) -> Vec<f64> {
        let n = self.minus_axis.len();
        let minus = &self.minus_axis;
        self.plus_axis
            .par_iter()
            .flat_map_iter(|&p| (0..n).map(move |j| log_likelihood_with(model, pair, p, minus[j])))
            .collect()
    }

    /// Adds per-node log-likelihood values and renormalizes.
    ///
    /// Rejected (grid unchanged) if the likelihood underflows at every node.
    pub fn apply_log_likelihood(&mut self, ll: &[f64]) -> Result<()> {
        if ll.len() != self.log_weights.len() {
            return Err(Error::InvalidGrid("likelihood does not match the grid shape".into()));
        }
        let best = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if best.is_nan() || best < UNDERFLOW_LOG {
            return Err(Error::PosteriorCollapsed(
                "the measurement is inconsistent with every grid node",
            ));
        }
        if ll.iter().all(|&l| l == ll[0]) {
            // a constant likelihood carries no information
            return Ok(());
        }
        let mut next: Vec<f64> = self.log_weights.iter().zip(ll).map(|(w, l)| w + l).collect();
        if next.iter().any(|v| v.is_nan()) || !normalize_log(&mut next) {
            return Err(Error::PosteriorCollapsed("posterior weights vanished"));
        }
        self.log_weights = next;
        Ok(())
    }

    /// Bayes update with one measurement pair.
    pub fn update(&mut self, model: &dyn MeasurementModel, pair: &MeasurementPair) -> Result<()> {
        pair.validate()?;
        let ll = self.node_log_likelihood(model, pair);
        self.apply_log_likelihood(&ll)
    }

    /// Bayes update with several pairs at once.
    pub fn update_batch(&mut self, model: &dyn MeasurementModel, pairs: &[MeasurementPair]) -> Result<()> {
        if pairs.is_empty() {
            return Ok(());
        }
        for p in pairs {
            p.validate()?;
        }
        let n = self.minus_axis.len();
        let minus = &self.minus_axis;
        let ll: Vec<f64> = self
            .plus_axis
            .par_iter()
            .flat_map_iter(|&p| {
                (0..n).map(move |j| pairs.iter().map(|d| log_likelihood_with(model, d, p, minus[j])).sum())
            })
            .collect();
        self.apply_log_likelihood(&ll)
    }

    pub fn moments(&self) -> Moments {
        let n = self.minus_axis.len();
        let (mut w_sum, mut mp, mut mm) = (0.0, 0.0, 0.0);
        let mut marg_plus = vec![0.0; self.plus_axis.len()];
        let mut marg_minus = vec![0.0; n];
        for (k, lw) in self.log_weights.iter().enumerate() {
            let w = lw.exp();
            marg_plus[k / n] += w;
            marg_minus[k % n] += w;
        }
        for (i, &w) in marg_plus.iter().enumerate() {
            w_sum += w;
            mp += w * self.plus_axis[i];
        }
        for (j, &w) in marg_minus.iter().enumerate() {
            mm += w * self.minus_axis[j];
        }
        mp /= w_sum;
        mm /= w_sum;
        let var_p: f64 = marg_plus.iter().zip(&self.plus_axis).map(|(w, x)| w * (x - mp).powi(2)).sum::<f64>() / w_sum;
        let var_m: f64 = marg_minus.iter().zip(&self.minus_axis).map(|(w, x)| w * (x - mm).powi(2)).sum::<f64>() / w_sum;
        let mut cov = 0.0;
        for (k, lw) in self.log_weights.iter().enumerate() {
            cov += lw.exp() * (self.plus_axis[k / n] - mp) * (self.minus_axis[k % n] - mm);
        }
        Moments {
            mean_plus: mp,
            mean_minus: mm,
            sigma_plus: var_p.sqrt(),
            sigma_minus: var_m.sqrt(),
            covariance: cov / w_sum,
        }
    }

    fn spacing(axis: &[f64]) -> f64 {
        (axis[axis.len() - 1] - axis[0]) / (axis.len() - 1) as f64
    }

    /// `[mean − 10σ, mean + 10σ]` per axis, at least one old cell on either
    /// side of the mean, intersected with the hard bounds.
    pub fn regrid_box(&self) -> ((f64, f64), (f64, f64)) {
        let m = self.moments();
        let span = |mean: f64, sigma: f64, axis: &[f64]| {
            let half = (REGRID_SIGMAS * sigma).max(Self::spacing(axis));
            let lo = (mean - half).max(self.bounds.0);
            let hi = (mean + half).min(self.bounds.1);
            if hi > lo {
                (lo, hi)
            } else {
                // mean sits on a bound; keep one old cell inside
                let h = Self::spacing(axis);
                ((self.bounds.1 - h).min(lo).max(self.bounds.0), (self.bounds.0 + h).max(hi).min(self.bounds.1))
            }
        };
        (
            span(m.mean_plus, m.sigma_plus, &self.plus_axis),
            span(m.mean_minus, m.sigma_minus, &self.minus_axis),
        )
    }

    /// Evenly spaced `n × n` grid over [`Self::regrid_box`] with bilinearly
    /// interpolated weights (zero outside the old support).
    pub fn regrid(&self, n: usize) -> Result<Self> {
        let (bp, bm) = self.regrid_box();
        let mut next = Self::on_box(bp, bm, n, self.bounds, self.prior)?;
        let max = self.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let old: Vec<f64> = self.log_weights.iter().map(|w| (w - max).exp()).collect();
        let cols = self.minus_axis.len();
        let locate = |axis: &[f64], x: f64| -> Option<(usize, f64)> {
            let last = axis.len() - 1;
            if x < axis[0] || x > axis[last] {
                return None;
            }
            let k = axis.partition_point(|&a| a <= x).clamp(1, last);
            let t = (x - axis[k - 1]) / (axis[k] - axis[k - 1]);
            Some((k - 1, t))
        };
        let rows: Vec<Option<(usize, f64)>> = next.plus_axis.iter().map(|&x| locate(&self.plus_axis, x)).collect();
        let colsi: Vec<Option<(usize, f64)>> = next.minus_axis.iter().map(|&x| locate(&self.minus_axis, x)).collect();
        let mut w = vec![f64::NEG_INFINITY; n * n];
        for (i, r) in rows.iter().enumerate() {
            let Some((i0, ti)) = *r else { continue };
            for (j, c) in colsi.iter().enumerate() {
                let Some((j0, tj)) = *c else { continue };
                let at = |a: usize, b: usize| old[a * cols + b];
                let v = (1.0 - ti) * (1.0 - tj) * at(i0, j0)
                    + ti * (1.0 - tj) * at(i0 + 1, j0)
                    + (1.0 - ti) * tj * at(i0, j0 + 1)
                    + ti * tj * at(i0 + 1, j0 + 1);
                if v > 0.0 {
                    w[i * n + j] = v.ln();
                }
            }
        }
        if !normalize_log(&mut w) {
            return Err(Error::InvalidGrid("regridded weights vanished".into()));
        }
        next.log_weights = w;
        Ok(next)
    }

    /// Draws `n` nodes with probability equal to their weight.
    pub fn sample_nodes<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<(f64, f64)> {
        let weights = self.weights();
        let mut cdf = Vec::with_capacity(weights.len());
        let mut acc = 0.0;
        for w in &weights {
            acc += w;
            cdf.push(acc);
        }
        let cols = self.minus_axis.len();
        (0..n)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let k = cdf.partition_point(|&c| c < u).min(weights.len() - 1);
                (self.plus_axis[k / cols], self.minus_axis[k % cols])
            })
            .collect()
    }

    pub fn snapshot(&self) -> GridSnapshot {
        let n = self.minus_axis.len();
        GridSnapshot {
            gamma_plus_axis: self.plus_axis.clone(),
            gamma_minus_axis: self.minus_axis.clone(),
            weights: self.weights().chunks(n).map(<[f64]>::to_vec).collect(),
            bounds: self.bounds,
            prior: self.prior,
        }
    }

    pub fn from_snapshot(s: &GridSnapshot) -> Result<Self> {
        let mut g = Self::new(s.gamma_plus_axis.clone(), s.gamma_minus_axis.clone(), s.bounds, s.prior)?;
        if s.weights.len() != g.plus_axis.len() || s.weights.iter().any(|r| r.len() != g.minus_axis.len()) {
            return Err(Error::InvalidGrid("snapshot weights do not match the axes".into()));
        }
        let mut w: Vec<f64> = s.weights.iter().flatten().map(|v| if *v > 0.0 { v.ln() } else { f64::NEG_INFINITY }).collect();
        if !normalize_log(&mut w) {
            return Err(Error::InvalidGrid("snapshot has no positive weight".into()));
        }
        g.log_weights = w;
        Ok(g)
    }
}

/// JSON layout of a posterior: axes in ms⁻¹ and a row-major weight matrix
/// (`weights[i][j]` belongs to `gamma_plus_axis[i]`, `gamma_minus_axis[j]`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSnapshot {
    pub gamma_plus_axis: Vec<f64>,
    pub gamma_minus_axis: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
    pub bounds: (f64, f64),
    pub prior: PriorMeasure,
}

/// Posterior of a fixed data set recomputed from a flat prior.
///
/// Starts on the full `bounds` box and zooms up to `passes` times onto the
/// ±10σ box of the current posterior, re-evaluating the full likelihood on each
/// new grid so no interpolation error accumulates. With no data the prior grid
/// is returned.
pub fn batch_posterior(
    model: &dyn MeasurementModel,
    data: &[MeasurementPair],
    bounds: (f64, f64),
    n: usize,
    prior: PriorMeasure,
    passes: usize,
) -> Result<PosteriorGrid> {
    let mut grid = PosteriorGrid::uniform(bounds, n, prior)?;
    if data.is_empty() {
        return Ok(grid);
    }
    grid.update_batch(model, data)?;
    for _ in 0..passes {
        let (bp, bm) = grid.regrid_box();
        let old = (grid.plus_axis[grid.plus_axis.len() - 1] - grid.plus_axis[0])
            .max(grid.minus_axis[grid.minus_axis.len() - 1] - grid.minus_axis[0]);
        let new = (bp.1 - bp.0).max(bm.1 - bm.0);
        let mut next = PosteriorGrid::on_box(bp, bm, n, bounds, prior)?;
        if next.update_batch(model, data).is_err() {
            break;
        }
        grid = next;
        if new > 0.7 * old {
            break;
        }
    }
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair_at(rates: &RatePair, tp: f64, tm: f64, s: f64) -> MeasurementPair {
        MeasurementPair {
            m_plus: RobustModel.predict(Branch::Plus, tp, rates.gamma_plus(), rates.gamma_minus()),
            m_minus: RobustModel.predict(Branch::Minus, tm, rates.gamma_plus(), rates.gamma_minus()),
            sigma_plus: s,
            sigma_minus: s,
            tau_plus: tp,
            tau_minus: tm,
        }
    }

    #[test]
    fn normalized_after_construction() {
        for prior in [PriorMeasure::Uniform, PriorMeasure::LogUniform] {
            let g = PosteriorGrid::uniform(DEFAULT_BOUNDS, 50, prior).unwrap();
            assert!((g.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_axes() {
        assert!(PosteriorGrid::new(vec![1.0], vec![1.0, 2.0], (0.5, 5.0), PriorMeasure::Uniform).is_err());
        assert!(PosteriorGrid::new(vec![2.0, 1.0], vec![1.0, 2.0], (0.5, 5.0), PriorMeasure::Uniform).is_err());
        assert!(PosteriorGrid::new(vec![1.0, 9.0], vec![1.0, 2.0], (0.5, 5.0), PriorMeasure::Uniform).is_err());
    }

    #[test]
    fn two_point_moments() {
        let g = PosteriorGrid::new(vec![1.0, 3.0], vec![2.0, 4.0], (0.5, 5.0), PriorMeasure::Uniform).unwrap();
        let m = g.moments();
        assert!((m.mean_plus - 2.0).abs() < 1e-15);
        assert!((m.sigma_plus - 1.0).abs() < 1e-15);
        assert!(m.covariance.abs() < 1e-15);
    }

    #[test]
    fn uniform_moments() {
        let g = PosteriorGrid::uniform((1.0, 5.0), 400, PriorMeasure::Uniform).unwrap();
        let m = g.moments();
        assert!((m.mean_minus - 3.0).abs() < 1e-12);
        assert!((m.sigma_plus - 4.0 / 12f64.sqrt()).abs() < 0.01);
    }

    #[test]
    fn likelihood_peaks_at_truth() {
        let truth = RatePair::new(1.0, 3.0).unwrap();
        let pair = pair_at(&truth, 0.3, 0.1, 0.01);
        assert_eq!(log_likelihood(&pair, &truth), 0.0);
        let mut g = PosteriorGrid::uniform((0.5, 5.0), 91, PriorMeasure::Uniform).unwrap();
        g.update(&RobustModel, &pair).unwrap();
        let (p, m) = g.argmax();
        assert!((p - 1.0).abs() < 1e-9 && (m - 3.0).abs() < 1e-9);
    }

    #[test]
    fn doubling_sigma_quarters_log_likelihood() {
        let truth = RatePair::new(1.0, 3.0).unwrap();
        let mut pair = pair_at(&truth, 0.3, 0.1, 0.02);
        pair.m_plus += 0.05;
        let other = RatePair::new(2.0, 2.5).unwrap();
        let a = log_likelihood(&pair, &other);
        pair.sigma_plus *= 2.0;
        pair.sigma_minus *= 2.0;
        let b = log_likelihood(&pair, &other);
        assert!((a / b - 4.0).abs() < 1e-12);
    }

    #[test]
    fn infinite_sigma_leaves_posterior_unchanged() {
        let truth = RatePair::new(1.0, 3.0).unwrap();
        let pair = pair_at(&truth, 0.3, 0.1, f64::INFINITY);
        let mut g = PosteriorGrid::uniform((0.5, 5.0), 20, PriorMeasure::Uniform).unwrap();
        let before = g.clone();
        g.update(&RobustModel, &pair).unwrap();
        assert_eq!(g, before);
    }

    #[test]
    fn gross_mismatch_is_rejected() {
        let truth = RatePair::new(1.0, 3.0).unwrap();
        let mut pair = pair_at(&truth, 0.3, 0.1, 1e-4);
        pair.m_plus = 5.0;
        let mut g = PosteriorGrid::uniform((0.5, 5.0), 20, PriorMeasure::Uniform).unwrap();
        let before = g.clone();
        assert!(matches!(g.update(&RobustModel, &pair), Err(Error::PosteriorCollapsed(_))));
        assert_eq!(g, before);
    }

    #[test]
    fn regrid_is_clamped_to_bounds() {
        let g = PosteriorGrid::uniform(DEFAULT_BOUNDS, 200, PriorMeasure::Uniform).unwrap();
        let r = g.regrid(200).unwrap();
        assert_eq!(r.plus_axis()[0], DEFAULT_BOUNDS.0);
        assert_eq!(*r.minus_axis().last().unwrap(), DEFAULT_BOUNDS.1);
        assert_eq!(r.shape(), (200, 200));
    }

    #[test]
    fn regrid_of_delta_posterior() {
        let mut g = PosteriorGrid::uniform((0.5, 5.0), 10, PriorMeasure::Uniform).unwrap();
        let n = g.log_weights.len();
        for (k, w) in g.log_weights.iter_mut().enumerate() {
            *w = if k == 34 { 0.0 } else { f64::NEG_INFINITY };
        }
        assert!(n > 34);
        let (p, m) = (g.plus_axis[3], g.minus_axis[4]);
        let r = g.regrid(50).unwrap();
        assert!((r.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mo = r.moments();
        assert!((mo.mean_plus - p).abs() < 1e-9 && (mo.mean_minus - m).abs() < 1e-9);
        assert!(r.plus_axis()[0] < p && *r.plus_axis().last().unwrap() > p);
    }

    #[test]
    fn snapshot_round_trip() {
        let truth = RatePair::new(1.0, 3.0).unwrap();
        let mut g = PosteriorGrid::uniform((0.5, 5.0), 30, PriorMeasure::Uniform).unwrap();
        g.update(&RobustModel, &pair_at(&truth, 0.3, 0.1, 0.05)).unwrap();
        let s = g.snapshot();
        let json = serde_json::to_string(&s).unwrap();
        let back: GridSnapshot = serde_json::from_str(&json).unwrap();
        let h = PosteriorGrid::from_snapshot(&back).unwrap();
        for (a, b) in g.weights().iter().zip(h.weights()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn batch_posterior_without_data_is_prior() {
        let g = batch_posterior(&RobustModel, &[], DEFAULT_BOUNDS, 20, PriorMeasure::Uniform, 4).unwrap();
        assert_eq!(g, PosteriorGrid::uniform(DEFAULT_BOUNDS, 20, PriorMeasure::Uniform).unwrap());
    }
}
