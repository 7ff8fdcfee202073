//! Enumeration and ranking of four-signal measurement protocols.
//!
//! A protocol picks two signals per measurement, i.e. eight state labels and
//! `3⁸ = 6561` assignments. The independent set keeps the protocols whose `−`
//! measurement is the `+ ↔ −` mirror image of the `+` measurement and whose two
//! τ = 0 denominators are nonzero under ideal parameters. With three bright and
//! six dark signals at τ = 0 this leaves `3·6·2 = 36` ordered choices.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{expected_sigma_m, full_cost_select, DelayGrid, DelayPair, TimingModel};
use crate::error::Result;
use crate::inference::{MeasurementModel, ProtocolModel};
use crate::signal_model::{ProtocolSpec, Signal, SignalPair, SignalParams};
use crate::spin_model::{Branch, RatePair, SpinState};

/// All `3⁸` protocols in lexicographic label order.
pub fn enumerate_all() -> Vec<ProtocolSpec> {
    let s = SpinState::ALL;
    let mut out = Vec::with_capacity(6561);
    for code in 0..6561usize {
        let mut d = [0usize; 8];
        let mut c = code;
        for k in (0..8).rev() {
            d[k] = c % 3;
            c /= 3;
        }
        let sig = |k: usize| Signal::new(s[d[k]], s[d[k + 1]]);
        out.push(ProtocolSpec::new(
            SignalPair::new(sig(0), sig(2)),
            SignalPair::new(sig(4), sig(6)),
        ));
    }
    out
}

fn nonzero_denominator(pair: &SignalPair, params: &SignalParams) -> bool {
    pair.expected_denominator(params).abs() > 1e-12 * params.f0 * params.repetitions as f64
}

/// Whether `p` belongs to the independent set under `params` (normally ideal).
pub fn is_independent(p: &ProtocolSpec, params: &SignalParams) -> bool {
    p.minus == p.plus.mirrored() && nonzero_denominator(&p.plus, params) && nonzero_denominator(&p.minus, params)
}

/// Independent protocols in the order they appear in `candidates`.
pub fn independent_protocols(candidates: &[ProtocolSpec], params: &SignalParams) -> Vec<ProtocolSpec> {
    candidates.iter().copied().filter(|p| is_independent(p, params)).collect()
}

/// The 36 independent protocols under ideal parameters.
pub fn enumerate_protocols() -> Vec<ProtocolSpec> {
    independent_protocols(&enumerate_all(), &SignalParams::ideal())
}

/// Probe lattice for comparing normalized model functions.
fn probes() -> Vec<(f64, RatePair)> {
    let taus = [0.05, 0.2, 0.5, 1.3, 3.0];
    let rates = [0.3, 0.7, 1.0, 2.2, 5.0];
    let mut out = Vec::new();
    for &t in &taus {
        for &p in &rates {
            for &m in &rates {
                out.push((t, RatePair::new(p, m).expect("positive probe rates")));
            }
        }
    }
    out
}

fn signature(model: &ProtocolModel, branch: Branch, lattice: &[(f64, RatePair)]) -> Vec<f64> {
    lattice
        .iter()
        .map(|(t, r)| model.predict(branch, *t, r.gamma_plus(), r.gamma_minus()))
        .collect()
}

fn same_function(a: &[f64], b: &[f64], tol: f64) -> bool {
    let eq = a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol);
    let neg = a.iter().zip(b).all(|(x, y)| (x + y).abs() <= tol);
    eq || neg
}

/// Whether the `+` measurement's normalized expectation depends on neither α
/// nor η± (checked at α ∈ {1, 0.8}, η ∈ {0, 0.1} on the probe lattice).
pub fn is_parameter_insensitive(p: &ProtocolSpec) -> bool {
    let base = SignalParams::ideal();
    let variants = [
        base,
        SignalParams { alpha: 0.8, ..base },
        SignalParams {
            eta_plus: 0.1,
            eta_minus: 0.1,
            ..base
        },
        SignalParams {
            alpha: 0.8,
            eta_plus: 0.07,
            eta_minus: 0.12,
            ..base
        },
    ];
    let lattice = probes();
    let mut sigs = Vec::new();
    for v in variants {
        let Ok(m) = ProtocolModel::new(*p, v) else {
            return false;
        };
        sigs.push([signature(&m, Branch::Plus, &lattice), signature(&m, Branch::Minus, &lattice)]);
    }
    sigs.iter()
        .all(|s| (0..2).all(|b| same_function(&s[b], &sigs[0][b], 1e-12)))
}

fn unordered(pair: &SignalPair) -> (Signal, Signal) {
    (pair.first.min(pair.second), pair.first.max(pair.second))
}

/// Counts behind the independent set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub raw: usize,
    /// Both measurements have a nonzero τ = 0 denominator.
    pub nonzero_denominator: usize,
    pub independent: usize,
    /// Distinct normalized model functions among the independent `+` measurements.
    pub distinct_functions: usize,
    /// Independent protocols whose normalized expectations cancel α and η±,
    /// counted up to signal order and branch relabeling.
    pub robust_protocols: usize,
    /// Same as `robust_protocols` but counting every labeling separately.
    pub robust_protocols_ordered: usize,
    /// Unordered single-measurement signal pairs (either branch) that cancel α and η±.
    pub robust_signal_pairs: usize,
    pub robust_labels: Vec<String>,
}

/// Enumerates, filters and classifies the protocol family.
pub fn census() -> Census {
    let ideal = SignalParams::ideal();
    let all = enumerate_all();
    let nonzero = all
        .iter()
        .filter(|p| nonzero_denominator(&p.plus, &ideal) && nonzero_denominator(&p.minus, &ideal))
        .count();
    let independent = independent_protocols(&all, &ideal);
    let lattice = probes();
    let mut classes: Vec<Vec<f64>> = Vec::new();
    for p in &independent {
        let m = ProtocolModel::new(*p, ideal).expect("independent protocols are valid");
        let s = signature(&m, Branch::Plus, &lattice);
        if !classes.iter().any(|c| same_function(c, &s, 1e-12)) {
            classes.push(s);
        }
    }
    let robust: Vec<ProtocolSpec> = independent.iter().copied().filter(is_parameter_insensitive).collect();
    // signal order within a measurement and the branch labels are conventions
    let unordered_set: BTreeSet<_> = robust
        .iter()
        .map(|p| {
            let (a, b) = (unordered(&p.plus), unordered(&p.minus));
            (a.min(b), a.max(b))
        })
        .collect();
    let mut pairs = BTreeSet::new();
    for p in &robust {
        pairs.insert(unordered(&p.plus));
        pairs.insert(unordered(&p.minus));
    }
    let zero = Signal::new(SpinState::Zero, SpinState::Zero);
    let mut labels: Vec<String> = robust
        .iter()
        .filter(|p| p.plus.second == zero && matches!(SpinState::Plus, s if s == p.plus.first.prep || s == p.plus.first.read))
        .map(ProtocolSpec::label)
        .collect();
    labels.sort();
    Census {
        raw: all.len(),
        nonzero_denominator: nonzero,
        independent: independent.len(),
        distinct_functions: classes.len(),
        robust_protocols: unordered_set.len(),
        robust_protocols_ordered: robust.len(),
        robust_signal_pairs: pairs.len(),
        robust_labels: labels,
    }
}

/// One ranked protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedProtocol {
    pub label: String,
    pub protocol: ProtocolSpec,
    pub delays: DelayPair,
    pub cost: f64,
    pub cost_ratio: f64,
    pub eta_insensitive: bool,
}

/// Protocols sorted by minimal cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolRanking {
    pub rates: RatePair,
    pub reference: String,
    pub entries: Vec<RankedProtocol>,
}

impl ProtocolRanking {
    pub fn find(&self, p: &ProtocolSpec) -> Option<&RankedProtocol> {
        self.entries.iter().find(|e| e.protocol == *p)
    }
}

/// A measurement whose normalized expectation stays at 1 on the probe lattice
/// cannot resolve the rates.
fn rate_insensitive(model: &ProtocolModel) -> bool {
    let lattice = probes();
    Branch::BOTH
        .iter()
        .any(|&b| signature(model, b, &lattice).iter().all(|v| (v - 1.0).abs() < 1e-9))
}

/// Minimal full cost of one protocol, with σ_M(τ) from expected counts.
pub fn optimal_cost(
    protocol: &ProtocolSpec,
    rates: &RatePair,
    params: &SignalParams,
    timing: &TimingModel,
    grid: &DelayGrid,
) -> Result<(DelayPair, f64)> {
    let model = ProtocolModel::new(*protocol, *params)?;
    if rate_insensitive(&model) {
        return Ok((DelayPair::new(grid.min_ms, grid.min_ms), f64::INFINITY));
    }
    let sigma = |b: Branch, t: f64| expected_sigma_m(protocol, b, t, rates, params).unwrap_or(f64::INFINITY);
    let c = full_cost_select(rates, sigma, timing, grid, &model);
    Ok((c.delays, c.cost))
}

/// Ranks `protocols` by minimal cost relative to the optimal `(±0, ±±)` protocol.
pub fn rank_protocols_among(
    protocols: &[ProtocolSpec],
    rates: &RatePair,
    params: &SignalParams,
    timing: &TimingModel,
    grid: &DelayGrid,
) -> Result<ProtocolRanking> {
    let reference = ProtocolSpec::optimal();
    let (_, ref_cost) = optimal_cost(&reference, rates, params, timing, grid)?;
    let mut entries: Vec<RankedProtocol> = protocols
        .par_iter()
        .map(|p| -> Result<RankedProtocol> {
            let (delays, cost) = optimal_cost(p, rates, params, timing, grid)?;
            Ok(RankedProtocol {
                label: p.label(),
                protocol: *p,
                delays,
                cost,
                cost_ratio: cost / ref_cost,
                eta_insensitive: is_parameter_insensitive(p),
            })
        })
        .collect::<Result<_>>()?;
    entries.sort_by(|a, b| a.cost.total_cmp(&b.cost).then_with(|| a.label.cmp(&b.label)));
    Ok(ProtocolRanking {
        rates: *rates,
        reference: reference.label(),
        entries,
    })
}

/// Ranks the 36 independent protocols.
pub fn rank_protocols(
    rates: &RatePair,
    params: &SignalParams,
    timing: &TimingModel,
    grid: &DelayGrid,
) -> Result<ProtocolRanking> {
    rank_protocols_among(&enumerate_protocols(), rates, params, timing, grid)
}

/// One row of the robust-versus-optimal sensitivity curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub rate_ratio: f64,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    pub cost_robust: f64,
    pub cost_optimal: f64,
    pub ratio: f64,
    pub robust_delays: DelayPair,
    pub optimal_delays: DelayPair,
}

/// Log-spaced `Γ+/Γ−` sweep from `lo` to `hi`; rates are placed at
/// `Γ+ = scale·sqrt(ratio)`, `Γ− = scale/sqrt(ratio)`.
pub fn ratio_sweep(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points < 2 {
        return vec![lo];
    }
    (0..points)
        .map(|k| lo * (hi / lo).powf(k as f64 / (points - 1) as f64))
        .collect()
}

/// Cost of the robust protocol over that of the optimal protocol along a
/// sweep of rate ratios.
pub fn sensitivity_ratio_curve(
    ratios: &[f64],
    scale: f64,
    params: &SignalParams,
    timing: &TimingModel,
    grid: &DelayGrid,
) -> Result<Vec<RatioRow>> {
    ratios
        .iter()
        .map(|&q| {
            let rates = RatePair::new(scale * q.sqrt(), scale / q.sqrt())?;
            let (rd, rc) = optimal_cost(&ProtocolSpec::robust(), &rates, params, timing, grid)?;
            let (od, oc) = optimal_cost(&ProtocolSpec::optimal(), &rates, params, timing, grid)?;
            Ok(RatioRow {
                rate_ratio: q,
                gamma_plus: rates.gamma_plus(),
                gamma_minus: rates.gamma_minus(),
                cost_robust: rc,
                cost_optimal: oc,
                ratio: rc / oc,
                robust_delays: rd,
                optimal_delays: od,
            })
        })
        .collect()
}
