//! Closed-form solutions of the three-level relaxation rate equations.
//!
//! The spin sublevels are ordered `|-⟩, |0⟩, |+⟩` (indices 0, 1, 2). Relaxation
//! couples `|0⟩ ↔ |+⟩` at rate Γ+ and `|0⟩ ↔ |-⟩` at rate Γ−; there is no direct
//! `|-⟩ ↔ |+⟩` channel. Rates are in ms⁻¹ and delays in ms throughout.
//!
//! The rate matrix is symmetric with eigenvalues `0, −β+, −β−` where
//! `β± = Γ+ + Γ− ± G` and `G = sqrt(Γ+² + Γ−² − Γ+Γ−)`. The propagator is assembled
//! from the three spectral projectors, so no general matrix exponential is needed.

use serde::{Deserialize, Serialize};

use crate::error::{check_delay, Error, Result};

pub type Matrix3 = [[f64; 3]; 3];

/// One of the three Zeeman sublevels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpinState {
    #[serde(rename = "-")]
    Minus,
    #[serde(rename = "0")]
    Zero,
    #[serde(rename = "+")]
    Plus,
}

impl SpinState {
    pub const ALL: [SpinState; 3] = [SpinState::Minus, SpinState::Zero, SpinState::Plus];

    pub fn index(self) -> usize {
        match self {
            SpinState::Minus => 0,
            SpinState::Zero => 1,
            SpinState::Plus => 2,
        }
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn symbol(self) -> char {
        match self {
            SpinState::Minus => '-',
            SpinState::Zero => '0',
            SpinState::Plus => '+',
        }
    }

    pub fn from_symbol(c: char) -> Option<Self> {
        match c {
            '-' | '−' => Some(SpinState::Minus),
            '0' => Some(SpinState::Zero),
            '+' => Some(SpinState::Plus),
            _ => None,
        }
    }

    /// Exchange `|+⟩ ↔ |-⟩`.
    pub fn mirrored(self) -> Self {
        match self {
            SpinState::Minus => SpinState::Plus,
            SpinState::Zero => SpinState::Zero,
            SpinState::Plus => SpinState::Minus,
        }
    }
}

/// Which of the two measurements (and which rate it is primarily sensitive to).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Plus,
    Minus,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::Plus, Branch::Minus];

    pub fn other(self) -> Self {
        match self {
            Branch::Plus => Branch::Minus,
            Branch::Minus => Branch::Plus,
        }
    }

    pub fn state(self) -> SpinState {
        match self {
            Branch::Plus => SpinState::Plus,
            Branch::Minus => SpinState::Minus,
        }
    }
}

/// The two relaxation rates (Γ+, Γ−) in ms⁻¹.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawRatePair")]
pub struct RatePair {
    gamma_plus: f64,
    gamma_minus: f64,
}

#[derive(Deserialize)]
struct RawRatePair {
    gamma_plus: f64,
    gamma_minus: f64,
}

impl TryFrom<RawRatePair> for RatePair {
    type Error = Error;

    fn try_from(raw: RawRatePair) -> Result<Self> {
        RatePair::new(raw.gamma_plus, raw.gamma_minus)
    }
}

fn check_rate(name: &'static str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidRate { name, value })
    }
}

impl RatePair {
    pub fn new(gamma_plus: f64, gamma_minus: f64) -> Result<Self> {
        check_rate("gamma_plus", gamma_plus)?;
        check_rate("gamma_minus", gamma_minus)?;
        Ok(Self {
            gamma_plus,
            gamma_minus,
        })
    }

    pub fn gamma_plus(&self) -> f64 {
        self.gamma_plus
    }

    pub fn gamma_minus(&self) -> f64 {
        self.gamma_minus
    }

    pub fn rate(&self, branch: Branch) -> f64 {
        match branch {
            Branch::Plus => self.gamma_plus,
            Branch::Minus => self.gamma_minus,
        }
    }

    pub fn swapped(&self) -> Self {
        Self {
            gamma_plus: self.gamma_minus,
            gamma_minus: self.gamma_plus,
        }
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(self.gamma_plus * factor, self.gamma_minus * factor)
    }

    /// `G = sqrt(Γ+² + Γ−² − Γ+Γ−)`. The plain formula has no cancellation issue:
    /// the radicand is at least `max(Γ)²·3/4`.
    pub fn g(&self) -> f64 {
        let (a, b) = (self.gamma_plus, self.gamma_minus);
        (a * a + b * b - a * b).sqrt()
    }

    pub fn beta_plus(&self) -> f64 {
        self.gamma_plus + self.gamma_minus + self.g()
    }

    /// `β− = Γ+ + Γ− − G`, evaluated as `3Γ+Γ−/β+` to avoid cancellation when the
    /// rates are very different.
    pub fn beta_minus(&self) -> f64 {
        3.0 * self.gamma_plus * self.gamma_minus / self.beta_plus()
    }

    /// The rate matrix of the population dynamics in the `(-, 0, +)` basis.
    pub fn rate_matrix(&self) -> Matrix3 {
        let (p, m) = (self.gamma_plus, self.gamma_minus);
        [[-m, m, 0.0], [m, -(m + p), p], [0.0, p, -p]]
    }
}

/// Common quantities shared by the closed forms, written in terms of the rate a
/// measurement is primarily sensitive to (`own`) and the other rate.
#[derive(Debug, Clone, Copy)]
struct Spectrum {
    own: f64,
    other: f64,
    g: f64,
    /// `G − own`, in a form free of cancellation near `Γ+ = Γ−`.
    g_minus_own: f64,
    e_fast: f64,
    e_slow: f64,
}

impl Spectrum {
    fn new(tau: f64, own: f64, other: f64) -> Self {
        // Symmetric in (own, other) wherever the formula is, so that relabeling
        // the branches reproduces results bit for bit.
        let g = (own * own + other * other - own * other).sqrt();
        let sum = own + other;
        let beta_fast = sum + g;
        let beta_slow = 3.0 * own * other / beta_fast;
        Self {
            own,
            other,
            g,
            g_minus_own: other * (other - own) / (g + own),
            e_fast: (-beta_fast * tau).exp(),
            e_slow: (-beta_slow * tau).exp(),
        }
    }
}

fn own_other(rates: &RatePair, branch: Branch) -> (f64, f64) {
    (rates.rate(branch), rates.rate(branch.other()))
}

/// Transition probabilities `p_ij(τ)` (population in `j` a time τ after preparing `i`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Propagator {
    pub entries: Matrix3,
    pub tau: f64,
}

impl Propagator {
    pub fn identity() -> Self {
        let mut entries = [[0.0; 3]; 3];
        for (i, row) in entries.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self { entries, tau: 0.0 }
    }

    pub fn get(&self, prep: SpinState, read: SpinState) -> f64 {
        self.entries[prep.index()][read.index()]
    }
}

/// The three pieces of the spectral decomposition `exp(Qτ) = P0 + e^{−β+τ}P_fast + e^{−β−τ}P_slow`.
struct Projectors {
    fast: Matrix3,
    slow: Matrix3,
}

const THIRD: f64 = 1.0 / 3.0;

fn centering(i: usize, j: usize) -> f64 {
    if i == j {
        1.0 - THIRD
    } else {
        -THIRD
    }
}

fn projectors(rates: &RatePair) -> Projectors {
    let q = rates.rate_matrix();
    let g = rates.g();
    let beta_slow = rates.beta_minus();
    let mut fast = [[0.0; 3]; 3];
    let mut slow = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let k = centering(i, j);
            fast[i][j] = -(q[i][j] + beta_slow * k) / (2.0 * g);
            slow[i][j] = k - fast[i][j];
        }
    }
    Projectors { fast, slow }
}

/// Closed-form `exp(Qτ)` for the three-level rate matrix.
pub fn propagator(tau: f64, rates: &RatePair) -> Result<Propagator> {
    check_delay(tau)?;
    let Projectors { fast, slow } = projectors(rates);
    let e_fast = (-rates.beta_plus() * tau).exp();
    let e_slow = (-rates.beta_minus() * tau).exp();
    let mut entries = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let p = THIRD + e_fast * fast[i][j] + e_slow * slow[i][j];
            entries[i][j] = p.clamp(0.0, 1.0);
        }
    }
    Ok(Propagator { entries, tau })
}

/// Partial derivatives `(∂P/∂Γ+, ∂P/∂Γ−)` of the propagator.
pub fn propagator_gradient(tau: f64, rates: &RatePair) -> Result<[Matrix3; 2]> {
    check_delay(tau)?;
    let (p, m) = (rates.gamma_plus(), rates.gamma_minus());
    let g = rates.g();
    let Projectors { fast, slow } = projectors(rates);
    let q = rates.rate_matrix();
    let beta_slow = rates.beta_minus();
    let e_fast = (-rates.beta_plus() * tau).exp();
    let e_slow = (-beta_slow * tau).exp();

    let dq_plus: Matrix3 = [[0.0, 0.0, 0.0], [0.0, -1.0, 1.0], [0.0, 1.0, -1.0]];
    let dq_minus: Matrix3 = [[-1.0, 1.0, 0.0], [1.0, -1.0, 0.0], [0.0, 0.0, 0.0]];
    let dg = [(2.0 * p - m) / (2.0 * g), (2.0 * m - p) / (2.0 * g)];

    let mut out = [[[0.0; 3]; 3]; 2];
    for (k, dq) in [dq_plus, dq_minus].iter().enumerate() {
        let d_beta_fast = 1.0 + dg[k];
        let d_beta_slow = 1.0 - dg[k];
        let de_fast = -tau * e_fast * d_beta_fast;
        let de_slow = -tau * e_slow * d_beta_slow;
        for i in 0..3 {
            for j in 0..3 {
                let n = q[i][j] + beta_slow * centering(i, j);
                let dn = dq[i][j] + d_beta_slow * centering(i, j);
                let d_fast = -dn / (2.0 * g) + n * dg[k] / (2.0 * g * g);
                out[k][i][j] = (e_fast - e_slow) * d_fast + de_fast * fast[i][j] + de_slow * slow[i][j];
            }
        }
    }
    Ok(out)
}

/// Normalized drift-insensitive measurement `M̃±(τ)`:
/// `[(G+Γ±)e^{−β+τ} + (G−Γ±)e^{−β−τ}] / 2G`.
pub fn model_m(tau: f64, rates: &RatePair, branch: Branch) -> Result<f64> {
    check_delay(tau)?;
    let (own, other) = own_other(rates, branch);
    Ok(model_m_unchecked(tau, own, other))
}

pub(crate) fn model_m_unchecked(tau: f64, own: f64, other: f64) -> f64 {
    let s = Spectrum::new(tau, own, other);
    ((s.g + s.own) * s.e_fast + s.g_minus_own * s.e_slow) / (2.0 * s.g)
}

/// Derivatives of [`model_m`] with respect to `(Γ+, Γ−)`.
pub fn model_gradient(tau: f64, rates: &RatePair, branch: Branch) -> Result<[f64; 2]> {
    check_delay(tau)?;
    let (own, other) = own_other(rates, branch);
    let [d_own, d_other] = model_gradient_unchecked(tau, own, other);
    Ok(match branch {
        Branch::Plus => [d_own, d_other],
        Branch::Minus => [d_other, d_own],
    })
}

/// Returns `(∂M/∂own, ∂M/∂other)`.
pub(crate) fn model_gradient_unchecked(tau: f64, own: f64, other: f64) -> [f64; 2] {
    let s = Spectrum::new(tau, own, other);
    let u_plus = (s.g + s.own) / s.g;
    let u_minus = s.g_minus_own / s.g;
    let diff = s.e_fast - s.e_slow;
    let partial = |dg: f64, d_own: f64| {
        let du = (d_own * s.g - s.own * dg) / (s.g * s.g);
        let de_fast = -tau * s.e_fast * (1.0 + dg);
        let de_slow = -tau * s.e_slow * (1.0 - dg);
        0.5 * (du * diff + u_plus * de_fast + u_minus * de_slow)
    };
    let dg_own = (2.0 * s.own - s.other) / (2.0 * s.g);
    let dg_other = (2.0 * s.other - s.own) / (2.0 * s.g);
    [partial(dg_own, 1.0), partial(dg_other, 0.0)]
}

/// Normalized expectation of the `(±±, ±0)` measurement, which is the most
/// sensitive protocol but keeps a dependence on the π-pulse error `eta`.
pub fn model_m_optimal(tau: f64, rates: &RatePair, eta: f64, branch: Branch) -> Result<f64> {
    check_delay(tau)?;
    if !(eta.is_finite() && (0.0..0.5).contains(&eta)) {
        return Err(Error::InvalidParameter {
            name: "eta",
            value: eta,
            reason: "pi-pulse error must lie in [0, 0.5)",
        });
    }
    let (own, other) = own_other(rates, branch);
    let s = Spectrum::new(tau, own, other);
    // e^{−τ(Γ++Γ−)}cosh(τG) and e^{−τ(Γ++Γ−)}sinh(τG) without overflow.
    let cosh_part = 0.5 * (s.e_slow + s.e_fast);
    let sinh_part = 0.5 * (s.e_slow - s.e_fast);
    let coeff = (own - other + eta * (other - 2.0 * own)) / ((2.0 * eta - 1.0) * s.g);
    Ok(cosh_part + coeff * sinh_part)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rates(p: f64, m: f64) -> RatePair {
        RatePair::new(p, m).unwrap()
    }

    #[test]
    fn rejects_non_positive_rates() {
        assert!(RatePair::new(0.0, 1.0).is_err());
        assert!(RatePair::new(1.0, -2.0).is_err());
        assert!(RatePair::new(f64::NAN, 1.0).is_err());
        assert!(RatePair::new(1.0, f64::INFINITY).is_err());
    }

    #[test]
    fn rejects_bad_delays() {
        let r = rates(1.0, 3.0);
        assert!(propagator(-1.0, &r).is_err());
        assert!(model_m(f64::NAN, &r, Branch::Plus).is_err());
    }

    #[test]
    fn g_bounds() {
        for (p, m) in [(1.0, 3.0), (0.01, 100.0), (5.0, 5.0)] {
            let r = rates(p, m);
            let g = r.g();
            assert!(g >= p.max(m) / 2.0 && g <= p + m);
        }
    }

    #[test]
    fn propagator_at_zero_is_identity() {
        let p = propagator(0.0, &rates(1.0, 3.0)).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((p.entries[i][j] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn propagator_equilibrates() {
        let p = propagator(1e4, &rates(1.0, 3.0)).unwrap();
        for row in p.entries {
            for v in row {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn model_m_reference_values() {
        let r = rates(1.0, 3.0);
        assert_eq!(model_m(0.0, &r, Branch::Plus).unwrap(), 1.0);
        assert!((model_m(1.0, &r, Branch::Plus).unwrap() - 0.081_181_842_349_303).abs() < 1e-13);
        assert!((model_m(1.0, &r, Branch::Minus).unwrap() + 0.015_895_170_578_945).abs() < 1e-13);
        let eq = rates(1.0, 1.0);
        for b in Branch::BOTH {
            assert!((model_m(1.0, &eq, b).unwrap() - (-3.0f64).exp()).abs() < 1e-15);
        }
    }

    #[test]
    fn optimal_model_limits() {
        let r = rates(1.0, 3.0);
        assert_eq!(model_m_optimal(0.0, &r, 0.1, Branch::Plus).unwrap(), 1.0);
        assert!(model_m_optimal(1.0, &r, 0.5, Branch::Plus).is_err());
        let gamma = 2.0;
        let eq = rates(gamma, gamma);
        let tau = 0.3;
        let want = (-2.0 * gamma * tau).exp() * (gamma * tau).cosh();
        for b in Branch::BOTH {
            assert!((model_m_optimal(tau, &eq, 0.0, b).unwrap() - want).abs() < 1e-15);
        }
    }

    #[test]
    fn gradient_vanishes_at_zero_delay() {
        let g = model_gradient(0.0, &rates(1.0, 3.0), Branch::Minus).unwrap();
        assert_eq!(g, [0.0, 0.0]);
    }
}
