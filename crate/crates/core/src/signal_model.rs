//! Expected fluorescence counts for prepared/read spin signals and shot-noise
//! sampling of the four signals that make up one normalized measurement.
//!
//! A signal `S_ij` prepares `|i⟩`, waits τ and reads the population of `|j⟩`.
//! Its expected count over `R` readouts is `R [c·B[j]·P(τ)·B[i]·s + b(τ)]`, with
//! `s` the imperfectly pumped initial state, `B[±]` imperfect π pulses, `B[0]`
//! the identity and `c` the state-dependent fluorescence.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{check_delay, Error, Result};
use crate::spin_model::{propagator, Branch, Matrix3, Propagator, RatePair, SpinState};

/// Delay-dependent background counts per readout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Background {
    #[default]
    None,
    Constant {
        counts: f64,
    },
    /// `amplitude · exp(−τ/decay_ms)`.
    Exponential {
        amplitude: f64,
        decay_ms: f64,
    },
}

impl Background {
    pub fn eval(&self, tau: f64) -> f64 {
        match *self {
            Background::None => 0.0,
            Background::Constant { counts } => counts,
            Background::Exponential {
                amplitude,
                decay_ms,
            } => amplitude * (-tau / decay_ms).exp(),
        }
    }
}

/// Photophysics and readout parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalParams {
    /// Expected photons per readout from `|0⟩`.
    pub f0: f64,
    pub contrast: f64,
    /// Probability of `|0⟩` after optical pumping.
    pub alpha: f64,
    pub eta_plus: f64,
    pub eta_minus: f64,
    #[serde(default)]
    pub background: Background,
    pub repetitions: u64,
}

impl SignalParams {
    /// Simulation parameters of the reference adaptive run.
    pub fn reference() -> Self {
        Self {
            f0: 0.02,
            contrast: 0.24,
            alpha: 0.8,
            eta_plus: 0.05,
            eta_minus: 0.05,
            background: Background::None,
            repetitions: 1_000_000,
        }
    }

    /// Perfect pumping and π pulses, used when comparing protocols.
    pub fn ideal() -> Self {
        Self {
            alpha: 1.0,
            eta_plus: 0.0,
            eta_minus: 0.0,
            ..Self::reference()
        }
    }

    pub fn with_repetitions(self, repetitions: u64) -> Self {
        Self {
            repetitions,
            ..self
        }
    }

    pub fn eta(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Plus => self.eta_plus,
            Branch::Minus => self.eta_minus,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name, value, reason| {
            Err(Error::InvalidParameter {
                name,
                value,
                reason,
            })
        };
        if !(self.f0.is_finite() && self.f0 > 0.0) {
            return bad("f0", self.f0, "must be positive");
        }
        if !(self.contrast.is_finite() && (0.0..1.0).contains(&self.contrast)) {
            return bad("contrast", self.contrast, "must lie in [0, 1)");
        }
        if !(self.alpha.is_finite() && self.alpha > 1.0 / 3.0 && self.alpha <= 1.0) {
            return bad("alpha", self.alpha, "must lie in (1/3, 1]");
        }
        for (name, eta) in [("eta_plus", self.eta_plus), ("eta_minus", self.eta_minus)] {
            if !(eta.is_finite() && (0.0..0.5).contains(&eta)) {
                return bad(name, eta, "must lie in [0, 0.5)");
            }
        }
        if self.repetitions == 0 {
            return bad("repetitions", 0.0, "must be positive");
        }
        match self.background {
            Background::Constant { counts } if !(counts.is_finite() && counts >= 0.0) => {
                return bad("background", counts, "must be non-negative");
            }
            Background::Exponential {
                amplitude,
                decay_ms,
            } if !(amplitude.is_finite() && amplitude >= 0.0 && decay_ms > 0.0) => {
                return bad("background", amplitude, "must be non-negative with positive decay");
            }
            _ => {}
        }
        Ok(())
    }

    /// Initial population vector after optical pumping.
    pub fn initial_state(&self) -> [f64; 3] {
        let side = (1.0 - self.alpha) / 2.0;
        [side, self.alpha, side]
    }

    /// Per-state fluorescence `c`.
    pub fn fluorescence(&self) -> [f64; 3] {
        let dark = self.f0 * (1.0 - self.contrast);
        [dark, self.f0, dark]
    }

    /// π-pulse operator `B[state]`.
    pub fn pulse(&self, state: SpinState) -> Matrix3 {
        match state {
            SpinState::Zero => [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            SpinState::Minus => {
                let e = self.eta_minus;
                [[e, 1.0 - e, 0.0], [1.0 - e, e, 0.0], [0.0, 0.0, 1.0]]
            }
            SpinState::Plus => {
                let e = self.eta_plus;
                [[1.0, 0.0, 0.0], [0.0, e, 1.0 - e], [0.0, 1.0 - e, e]]
            }
        }
    }
}

/// One prepared/read signal `S_ij`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Signal {
    pub prep: SpinState,
    pub read: SpinState,
}

impl Signal {
    pub const fn new(prep: SpinState, read: SpinState) -> Self {
        Self { prep, read }
    }

    pub fn mirrored(self) -> Self {
        Self::new(self.prep.mirrored(), self.read.mirrored())
    }

    pub fn transposed(self) -> Self {
        Self::new(self.read, self.prep)
    }

    pub fn label(&self) -> String {
        format!("{}{}", self.prep.symbol(), self.read.symbol())
    }

    pub fn parse(label: &str) -> Option<Self> {
        let mut chars = label.chars();
        let prep = SpinState::from_symbol(chars.next()?)?;
        let read = SpinState::from_symbol(chars.next()?)?;
        chars.next().is_none().then_some(Self { prep, read })
    }

    /// Row vector `c·B[read]` and column vector `B[prep]·s`, so that the expected
    /// count per readout (without background) is `left · P · right`.
    pub fn sandwich(&self, params: &SignalParams) -> ([f64; 3], [f64; 3]) {
        let c = params.fluorescence();
        let b_read = params.pulse(self.read);
        let b_prep = params.pulse(self.prep);
        let s = params.initial_state();
        let mut left = [0.0; 3];
        let mut right = [0.0; 3];
        for k in 0..3 {
            left[k] = (0..3).map(|j| c[j] * b_read[j][k]).sum();
            right[k] = (0..3).map(|j| b_prep[k][j] * s[j]).sum();
        }
        (left, right)
    }
}

pub(crate) fn bilinear(left: &[f64; 3], m: &Matrix3, right: &[f64; 3]) -> f64 {
    let mut acc = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            acc += left[i] * m[i][j] * right[j];
        }
    }
    acc
}

/// Two signals whose difference forms one measurement `(S1 − S2)(τ) / (S1 − S2)(0)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SignalPair {
    pub first: Signal,
    pub second: Signal,
}

impl SignalPair {
    pub const fn new(first: Signal, second: Signal) -> Self {
        Self { first, second }
    }

    /// `(±0, 00)`, insensitive to f0, C, α, η± and background.
    pub const fn robust(branch: Branch) -> Self {
        let s = match branch {
            Branch::Plus => SpinState::Plus,
            Branch::Minus => SpinState::Minus,
        };
        Self::new(
            Signal::new(s, SpinState::Zero),
            Signal::new(SpinState::Zero, SpinState::Zero),
        )
    }

    /// `(±0, ±±)`, the most sensitive pair.
    pub const fn optimal(branch: Branch) -> Self {
        let s = match branch {
            Branch::Plus => SpinState::Plus,
            Branch::Minus => SpinState::Minus,
        };
        Self::new(Signal::new(s, SpinState::Zero), Signal::new(s, s))
    }

    pub fn swapped(self) -> Self {
        Self::new(self.second, self.first)
    }

    pub fn mirrored(self) -> Self {
        Self::new(self.first.mirrored(), self.second.mirrored())
    }

    pub fn label(&self) -> String {
        format!("({},{})", self.first.label(), self.second.label())
    }

    /// The branch whose robust pair this is (in either order), if any.
    pub fn robust_branch(&self) -> Option<Branch> {
        Branch::BOTH.into_iter().find(|&b| {
            let r = SignalPair::robust(b);
            *self == r || *self == r.swapped()
        })
    }

    /// Expected τ = 0 denominator `S1(0) − S2(0)`.
    pub fn expected_denominator(&self, params: &SignalParams) -> f64 {
        let id = Propagator::identity();
        expected_counts_with(self.first, &id, params) - expected_counts_with(self.second, &id, params)
    }

    /// Orders the two signals so that the expected denominator is positive.
    pub fn oriented(self, params: &SignalParams) -> Self {
        if self.expected_denominator(params) < 0.0 {
            self.swapped()
        } else {
            self
        }
    }
}

/// A pair of measurements, one per branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub plus: SignalPair,
    pub minus: SignalPair,
}

impl ProtocolSpec {
    pub const fn new(plus: SignalPair, minus: SignalPair) -> Self {
        Self { plus, minus }
    }

    pub const fn robust() -> Self {
        Self::new(SignalPair::robust(Branch::Plus), SignalPair::robust(Branch::Minus))
    }

    pub const fn optimal() -> Self {
        Self::new(SignalPair::optimal(Branch::Plus), SignalPair::optimal(Branch::Minus))
    }

    pub fn measurement(&self, branch: Branch) -> SignalPair {
        match branch {
            Branch::Plus => self.plus,
            Branch::Minus => self.minus,
        }
    }

    pub fn is_robust(&self) -> bool {
        self.plus.robust_branch() == Some(Branch::Plus) && self.minus.robust_branch() == Some(Branch::Minus)
    }

    /// Label in `(ij,kl),(pq,rs)` notation.
    pub fn label(&self) -> String {
        format!("{},{}", self.plus.label(), self.minus.label())
    }

    /// Parses `(ij,kl),(pq,rs)`; whitespace is ignored.
    pub fn parse(label: &str) -> Option<Self> {
        let cleaned: String = label
            .chars()
            .filter(|c| !c.is_whitespace() && !matches!(c, '(' | ')' | ','))
            .collect();
        let chars: Vec<char> = cleaned.chars().collect();
        if chars.len() != 8 {
            return None;
        }
        let sig = |k: usize| -> Option<Signal> {
            Some(Signal::new(SpinState::from_symbol(chars[k])?, SpinState::from_symbol(chars[k + 1])?))
        };
        Some(Self::new(
            SignalPair::new(sig(0)?, sig(2)?),
            SignalPair::new(sig(4)?, sig(6)?),
        ))
    }

    /// Checks that both measurements have a nonzero τ = 0 denominator.
    pub fn validate(&self, params: &SignalParams) -> Result<()> {
        for b in Branch::BOTH {
            let m = self.measurement(b);
            if m.first == m.second {
                return Err(Error::InvalidConfig(format!(
                    "protocol {}: measurement uses the same signal twice",
                    self.label()
                )));
            }
            let scale = params.f0 * params.repetitions as f64;
            if m.expected_denominator(params).abs() <= 1e-12 * scale {
                return Err(Error::InvalidConfig(format!(
                    "protocol {}: measurement {} has a zero expected denominator",
                    self.label(),
                    m.label()
                )));
            }
        }
        Ok(())
    }
}

/// Expected counts summed over `R` readouts for one signal.
pub fn expected_counts(
    prep: SpinState,
    read: SpinState,
    tau: f64,
    rates: &RatePair,
    params: &SignalParams,
) -> Result<f64> {
    check_delay(tau)?;
    let p = propagator(tau, rates)?;
    Ok(expected_counts_with(Signal::new(prep, read), &p, params))
}

/// Same as [`expected_counts`] with a precomputed propagator.
pub fn expected_counts_with(signal: Signal, prop: &Propagator, params: &SignalParams) -> f64 {
    let (left, right) = signal.sandwich(params);
    params.repetitions as f64 * (bilinear(&left, &prop.entries, &right) + params.background.eval(prop.tau))
}

/// Expected `S1(τ) − S2(τ)`.
///
/// For the robust pair this uses the factored closed form
/// `R·C·f0·(3α−1)/2·(1−η±)·(p00 − p±0)`; any other pair is evaluated as a
/// difference of two expected counts.
pub fn expected_difference(pair: SignalPair, tau: f64, rates: &RatePair, params: &SignalParams) -> Result<f64> {
    let prop = propagator(tau, rates)?;
    Ok(match pair.robust_branch() {
        Some(branch) => {
            let d = robust_difference_closed_form(branch, &prop, params);
            // closed form is S00 − S±0
            if pair.first.read == SpinState::Zero && pair.first.prep == SpinState::Zero {
                d
            } else {
                -d
            }
        }
        None => generic_difference(pair, &prop, params),
    })
}

pub(crate) fn generic_difference(pair: SignalPair, prop: &Propagator, params: &SignalParams) -> f64 {
    expected_counts_with(pair.first, prop, params) - expected_counts_with(pair.second, prop, params)
}

fn robust_difference_closed_form(branch: Branch, prop: &Propagator, params: &SignalParams) -> f64 {
    let r = params.repetitions as f64;
    let zero = SpinState::Zero;
    r * params.contrast * params.f0 * (3.0 * params.alpha - 1.0) / 2.0
        * (1.0 - params.eta(branch))
        * (prop.get(zero, zero) - prop.get(branch.state(), zero))
}

/// One sampled signal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignalSample {
    pub counts: u64,
    pub expectation: f64,
    pub tau: f64,
    pub signal: Signal,
}

/// Poisson draw with the degenerate `mean = 0` case handled.
pub fn poisson<R: Rng + ?Sized>(mean: f64, rng: &mut R) -> Result<u64> {
    if !(mean.is_finite() && mean >= 0.0) {
        return Err(Error::NegativeExpectation {
            signal: "poisson".into(),
            value: mean,
        });
    }
    if mean == 0.0 {
        return Ok(0);
    }
    let dist = Poisson::new(mean).map_err(|_| Error::NegativeExpectation {
        signal: "poisson".into(),
        value: mean,
    })?;
    Ok(dist.sample(rng) as u64)
}

/// The four expectations `[S1(τ), S2(τ), S1(0), S2(0)]` of one measurement.
pub fn four_expectations(
    pair: SignalPair,
    tau: f64,
    rates: &RatePair,
    params: &SignalParams,
) -> Result<[f64; 4]> {
    let p = propagator(tau, rates)?;
    let id = Propagator::identity();
    let e = [
        expected_counts_with(pair.first, &p, params),
        expected_counts_with(pair.second, &p, params),
        expected_counts_with(pair.first, &id, params),
        expected_counts_with(pair.second, &id, params),
    ];
    for (k, v) in e.iter().enumerate() {
        if !(v.is_finite() && *v >= 0.0) {
            let s = if k % 2 == 0 { pair.first } else { pair.second };
            return Err(Error::NegativeExpectation {
                signal: s.label(),
                value: *v,
            });
        }
    }
    Ok(e)
}

/// Draws the four signals of one measurement as independent Poisson variates.
pub fn sample_signals<R: Rng + ?Sized>(
    pair: SignalPair,
    tau: f64,
    rates: &RatePair,
    params: &SignalParams,
    rng: &mut R,
) -> Result<[SignalSample; 4]> {
    let e = four_expectations(pair, tau, rates, params)?;
    let mut out = [SignalSample {
        counts: 0,
        expectation: 0.0,
        tau,
        signal: pair.first,
    }; 4];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = SignalSample {
            counts: poisson(e[k], rng)?,
            expectation: e[k],
            tau: if k < 2 { tau } else { 0.0 },
            signal: if k % 2 == 0 { pair.first } else { pair.second },
        };
    }
    Ok(out)
}

/// Time dependence of one parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Drift {
    #[default]
    Constant,
    /// Linear ramp from the base value to `end` over `duration_s`, constant afterwards.
    Linear { end: f64, duration_s: f64 },
    /// Multiplies the base value by `factor` from `after_s` on.
    Scale { factor: f64, after_s: f64 },
    /// `base · (1 + amplitude · sin(2πt/period_s))`.
    Sinusoid { amplitude: f64, period_s: f64 },
}

impl Drift {
    pub fn apply(&self, base: f64, t: f64) -> f64 {
        match *self {
            Drift::Constant => base,
            Drift::Linear { end, duration_s } => {
                let x = if duration_s > 0.0 {
                    (t / duration_s).clamp(0.0, 1.0)
                } else {
                    1.0
                };
                base + (end - base) * x
            }
            Drift::Scale { factor, after_s } => {
                if t >= after_s {
                    base * factor
                } else {
                    base
                }
            }
            Drift::Sinusoid {
                amplitude,
                period_s,
            } => base * (1.0 + amplitude * (std::f64::consts::TAU * t / period_s).sin()),
        }
    }

    pub fn is_constant(&self) -> bool {
        matches!(self, Drift::Constant)
    }
}

/// Per-parameter drift functions of wall-clock time (seconds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DriftSchedule {
    pub f0: Drift,
    pub contrast: Drift,
    pub alpha: Drift,
    pub eta_plus: Drift,
    pub eta_minus: Drift,
}

impl DriftSchedule {
    pub fn is_static(&self) -> bool {
        [self.f0, self.contrast, self.alpha, self.eta_plus, self.eta_minus]
            .iter()
            .all(Drift::is_constant)
    }
}

/// Instantaneous parameters at wall-clock time `t` (seconds).
pub fn drift_schedule(params: &SignalParams, schedule: &DriftSchedule, t: f64) -> Result<SignalParams> {
    let p = SignalParams {
        f0: schedule.f0.apply(params.f0, t),
        contrast: schedule.contrast.apply(params.contrast, t),
        alpha: schedule.alpha.apply(params.alpha, t),
        eta_plus: schedule.eta_plus.apply(params.eta_plus, t),
        eta_minus: schedule.eta_minus.apply(params.eta_minus, t),
        ..*params
    };
    p.validate()?;
    Ok(p)
}

/// Samples one measurement while the parameters drift.
///
/// All four signals are drawn per block of `block` repetitions with the
/// parameters at the block's start time, mimicking an interleaved pulse
/// sequence. Block `k` of the measurement starts at
/// `t_start + k · 2·block·τ`, i.e. the delayed signals dominate the duration.
#[allow(clippy::too_many_arguments)]
pub fn sample_signals_drifting<R: Rng + ?Sized>(
    pair: SignalPair,
    tau: f64,
    rates: &RatePair,
    params: &SignalParams,
    schedule: &DriftSchedule,
    t_start: f64,
    block: u64,
    rng: &mut R,
) -> Result<[SignalSample; 4]> {
    if schedule.is_static() {
        return sample_signals(pair, tau, rates, &drift_schedule(params, schedule, t_start)?, rng);
    }
    let block = block.max(1);
    let p = propagator(tau, rates)?;
    let id = Propagator::identity();
    let block_duration_s = 2.0 * block as f64 * tau * 1e-3;
    let mut counts = [0u64; 4];
    let mut expect = [0.0f64; 4];
    let mut done = 0u64;
    let mut k = 0u64;
    while done < params.repetitions {
        let n = block.min(params.repetitions - done);
        let t = t_start + k as f64 * block_duration_s;
        let local = drift_schedule(params, schedule, t)?.with_repetitions(n);
        let e = [
            expected_counts_with(pair.first, &p, &local),
            expected_counts_with(pair.second, &p, &local),
            expected_counts_with(pair.first, &id, &local),
            expected_counts_with(pair.second, &id, &local),
        ];
        for j in 0..4 {
            counts[j] += poisson(e[j], rng)?;
            expect[j] += e[j];
        }
        done += n;
        k += 1;
    }
    let mut out = [SignalSample {
        counts: 0,
        expectation: 0.0,
        tau,
        signal: pair.first,
    }; 4];
    for j in 0..4 {
        out[j] = SignalSample {
            counts: counts[j],
            expectation: expect[j],
            tau: if j < 2 { tau } else { 0.0 },
            signal: if j % 2 == 0 { pair.first } else { pair.second },
        };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn r13() -> RatePair {
        RatePair::new(1.0, 3.0).unwrap()
    }

    #[test]
    fn polarized_zero_state_reads_f0() {
        let p = SignalParams {
            alpha: 1.0,
            ..SignalParams::reference()
        };
        let z = SpinState::Zero;
        let c = expected_counts(z, z, 0.0, &r13(), &p).unwrap();
        assert!((c - p.repetitions as f64 * p.f0).abs() < 1e-9);
    }

    #[test]
    fn perfect_pulse_reads_dark_state() {
        let p = SignalParams::ideal();
        let c = expected_counts(SpinState::Zero, SpinState::Plus, 0.0, &r13(), &p).unwrap();
        let want = p.repetitions as f64 * p.f0 * (1.0 - p.contrast);
        assert!((c - want).abs() < 1e-9);
    }

    #[test]
    fn robust_difference_at_zero_delay() {
        let p = SignalParams {
            alpha: 1.0,
            ..SignalParams::reference()
        };
        for b in Branch::BOTH {
            let pair = SignalPair::robust(b).swapped();
            let d = expected_difference(pair, 0.0, &r13(), &p).unwrap();
            let want = p.repetitions as f64 * p.contrast * p.f0 * (1.0 - p.eta(b));
            assert!((d - want).abs() < 1e-9 * want);
        }
    }

    #[test]
    fn background_cancels_in_difference() {
        let mut p = SignalParams::reference();
        let pair = SignalPair::optimal(Branch::Plus);
        let a = expected_difference(pair, 0.4, &r13(), &p).unwrap();
        p.background = Background::Exponential {
            amplitude: 0.01,
            decay_ms: 0.2,
        };
        let b = expected_difference(pair, 0.4, &r13(), &p).unwrap();
        assert!((a - b).abs() < 1e-9 * a.abs());
    }

    #[test]
    fn pulses_are_involutions_without_error() {
        let p = SignalParams::ideal();
        for s in SpinState::ALL {
            let b = p.pulse(s);
            for i in 0..3 {
                for j in 0..3 {
                    let sq: f64 = (0..3).map(|k| b[i][k] * b[k][j]).sum();
                    assert_eq!(sq, if i == j { 1.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn params_validation() {
        let mut p = SignalParams::reference();
        p.alpha = 1.0 / 3.0;
        assert!(p.validate().is_err());
        p = SignalParams::reference();
        p.eta_minus = 0.5;
        assert!(p.validate().is_err());
        p = SignalParams::reference();
        p.contrast = 1.0;
        assert!(p.validate().is_err());
        assert!(SignalParams::reference().validate().is_ok());
    }

    #[test]
    fn zero_expectation_gives_zero_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(poisson(0.0, &mut rng).unwrap(), 0);
        }
        assert!(poisson(-1.0, &mut rng).is_err());
    }

    #[test]
    fn sampling_is_reproducible() {
        let pair = SignalPair::robust(Branch::Plus);
        let p = SignalParams::reference();
        let a = sample_signals(pair, 0.3, &r13(), &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_signals(pair, 0.3, &r13(), &p, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constant_schedule_is_identity() {
        let p = SignalParams::reference();
        let s = DriftSchedule::default();
        for t in [0.0, 10.0, 1e6] {
            assert_eq!(drift_schedule(&p, &s, t).unwrap(), p);
        }
    }

    #[test]
    fn drift_outside_bounds_is_rejected() {
        let p = SignalParams::reference();
        let s = DriftSchedule {
            alpha: Drift::Linear {
                end: 0.2,
                duration_s: 10.0,
            },
            ..Default::default()
        };
        assert!(drift_schedule(&p, &s, 1.0).is_ok());
        assert!(drift_schedule(&p, &s, 10.0).is_err());
    }

    #[test]
    fn protocol_label_round_trip() {
        for p in [ProtocolSpec::robust(), ProtocolSpec::optimal()] {
            assert_eq!(ProtocolSpec::parse(&p.label()), Some(p));
        }
        assert_eq!(ProtocolSpec::robust().label(), "(+0,00),(-0,00)");
        assert!(ProtocolSpec::parse("(+0,00)").is_none());
    }

    #[test]
    fn protocol_validation_rejects_zero_denominator() {
        let p = SignalParams::ideal();
        let bad = ProtocolSpec::parse("(00,++),(-0,00)").unwrap();
        assert!(bad.validate(&p).is_err());
        assert!(ProtocolSpec::robust().validate(&p).is_ok());
    }
}
