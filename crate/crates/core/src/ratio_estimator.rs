//! Estimation of the normalized measurement `M = A/Δ` from four shot-noise
//! limited signals, with `A = S1(τ) − S2(τ)` and `Δ = S1(0) − S2(0)`.
//!
//! The plain ratio is biased (and unbounded) when Δ is only a few standard
//! deviations from zero. Instead of `1/Δ` we use the mode `z_max` of the
//! distribution of `Z = 1/Δ` for Gaussian Δ, and a width from the curvature of
//! `log P(Z)` at that mode.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::random::stream_rng;
use crate::signal_model::{expected_counts_with, poisson, SignalPair, SignalParams, SignalSample};
use crate::spin_model::{Branch, Propagator};

/// One normalized measurement with its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatioEstimate {
    pub m_bar: f64,
    pub sigma_m: f64,
    pub z_max: f64,
    pub sigma_z: f64,
    pub numerator_a: f64,
    pub denominator_delta: f64,
    /// The sampled Δ was not positive despite the protocol ordering.
    pub nonpositive_denominator: bool,
}

/// Mode and width of the distribution of `1/Δ` for `Δ ~ N(delta_mean, delta_sigma²)`.
///
/// `z_max = (sqrt(Δ² + 8σ²) − Δ)/(4σ²)`, evaluated for `Δ ≥ 0` in the equivalent
/// form `2/(sqrt(Δ² + 8σ²) + Δ)`, which does not cancel when `σ ≪ Δ`.
/// `σ_z = z_max² σ / sqrt(2 − z_max Δ)`.
pub fn reciprocal_mode(delta_mean: f64, delta_sigma: f64) -> Result<(f64, f64)> {
    if !delta_mean.is_finite() || !(delta_sigma.is_finite() && delta_sigma >= 0.0) {
        return Err(Error::Estimation("non-finite denominator statistics"));
    }
    if delta_sigma == 0.0 {
        if delta_mean <= 0.0 {
            return Err(Error::Estimation("noiseless non-positive denominator"));
        }
        return Ok((1.0 / delta_mean, 0.0));
    }
    let root = delta_mean.hypot(8f64.sqrt() * delta_sigma);
    let z = if delta_mean >= 0.0 {
        2.0 / (root + delta_mean)
    } else {
        (root - delta_mean) / (4.0 * delta_sigma * delta_sigma)
    };
    let sigma_z = z * z * delta_sigma / (2.0 - z * delta_mean).sqrt();
    Ok((z, sigma_z))
}

/// Ratio estimate from four (possibly non-integer) signal values, each taken as
/// its own Poisson variance.
///
/// The signal order is `[S1(τ), S2(τ), S1(0), S2(0)]`.
pub fn estimate_from_counts(signals: [f64; 4]) -> Result<RatioEstimate> {
    if signals.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::Estimation("signals must be finite and non-negative"));
    }
    if signals.iter().all(|&s| s == 0.0) {
        return Err(Error::Estimation("all four signals are zero"));
    }
    let a = signals[0] - signals[1];
    let delta = signals[2] - signals[3];
    // A zero-count pair still carries the uncertainty of one count.
    let var_a = (signals[0] + signals[1]).max(1.0);
    let var_delta = (signals[2] + signals[3]).max(1.0);
    let (z_max, sigma_z) = reciprocal_mode(delta, var_delta.sqrt())?;
    let m_bar = a * z_max;
    // Absolute form; the relative form is singular at A = 0.
    let sigma_m = (z_max * z_max * var_a + a * a * sigma_z * sigma_z).sqrt();
    Ok(RatioEstimate {
        m_bar,
        sigma_m,
        z_max,
        sigma_z,
        numerator_a: a,
        denominator_delta: delta,
        nonpositive_denominator: delta <= 0.0,
    })
}

/// Ratio estimate from four sampled signals in the order produced by
/// [`crate::signal_model::sample_signals`].
pub fn measurement_estimate(samples: &[SignalSample; 4]) -> Result<RatioEstimate> {
    estimate_from_counts(samples.map(|s| s.counts as f64))
}

/// First-order (linear) propagation: `M = A/Δ`, `σ_M² = (σ_A² + M²σ_Δ²)/Δ²`.
pub fn linear_estimate(signals: [f64; 4]) -> (f64, f64) {
    let a = signals[0] - signals[1];
    let delta = signals[2] - signals[3];
    let m = a / delta;
    let var = (signals[0] + signals[1] + m * m * (signals[2] + signals[3])) / (delta * delta);
    (m, var.sqrt())
}

/// Which Δ variance enters the reciprocal mode in [`bias_study`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaSource {
    /// Sum of the observed counts.
    #[default]
    Observed,
    /// Sum of the expected counts.
    Exact,
}

/// One row of the estimator bias table. Ratios are relative to `Z_true`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasRow {
    pub repetitions: u64,
    pub mean_ratio_nonlinear: f64,
    pub std_nonlinear: f64,
    pub mean_ratio_linear: f64,
    pub std_linear: f64,
    pub zero_denominator_count: usize,
    pub nonpositive_denominator_count: usize,
}

impl BiasRow {
    pub fn bias_nonlinear(&self) -> f64 {
        self.mean_ratio_nonlinear - 1.0
    }

    pub fn bias_linear(&self) -> f64 {
        self.mean_ratio_linear - 1.0
    }
}

/// Configuration of the Monte Carlo bias study of `Z = 1/Δ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasStudy {
    pub params: SignalParams,
    pub branch: Branch,
    pub repetitions: Vec<u64>,
    pub replicates: usize,
    pub sigma_source: SigmaSource,
    pub seed: u64,
}

/// `Z_true = 1/[C f0 R (3α−1)(1−η)/2]` for the robust pair.
pub fn z_true(params: &SignalParams, branch: Branch) -> f64 {
    1.0 / (0.5
        * params.contrast
        * params.f0
        * params.repetitions as f64
        * (3.0 * params.alpha - 1.0)
        * (1.0 - params.eta(branch)))
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Samples the τ = 0 denominator of the robust pair `replicates` times for each
/// `R` and compares the reciprocal-mode estimate and the plain `1/Δ` with `Z_true`.
///
/// The linear mean is infinite for a row in which any sampled Δ was exactly 0;
/// such rows carry a nonzero `zero_denominator_count`.
pub fn bias_study(study: &BiasStudy) -> Result<Vec<BiasRow>> {
    if study.replicates < 2 {
        return Err(Error::InvalidConfig("bias study needs at least two replicates".into()));
    }
    study.params.validate()?;
    let pair = SignalPair::robust(study.branch).oriented(&study.params);
    study
        .repetitions
        .iter()
        .enumerate()
        .map(|(row, &r)| {
            let params = study.params.with_repetitions(r);
            params.validate()?;
            let id = Propagator::identity();
            let e1 = expected_counts_with(pair.first, &id, &params);
            let e2 = expected_counts_with(pair.second, &id, &params);
            let truth = z_true(&params, study.branch);
            let draws: Vec<(f64, f64)> = (0..study.replicates)
                .into_par_iter()
                .map(|k| -> Result<(f64, f64)> {
                    let mut rng = stream_rng(study.seed, ((row as u64) << 40) | k as u64);
                    let s1 = poisson(e1, &mut rng)? as f64;
                    let s2 = poisson(e2, &mut rng)? as f64;
                    let var = match study.sigma_source {
                        SigmaSource::Observed => (s1 + s2).max(1.0),
                        SigmaSource::Exact => e1 + e2,
                    };
                    let (z, _) = reciprocal_mode(s1 - s2, var.sqrt())?;
                    Ok((z / truth, 1.0 / (s1 - s2) / truth))
                })
                .collect::<Result<_>>()?;
            let nonlinear: Vec<f64> = draws.iter().map(|d| d.0).collect();
            let linear: Vec<f64> = draws.iter().map(|d| d.1).collect();
            let (mn, sn) = mean_std(&nonlinear);
            let (ml, sl) = mean_std(&linear);
            Ok(BiasRow {
                repetitions: r,
                mean_ratio_nonlinear: mn,
                std_nonlinear: sn,
                mean_ratio_linear: ml,
                std_linear: sl,
                zero_denominator_count: linear.iter().filter(|v| v.is_infinite()).count(),
                nonpositive_denominator_count: linear.iter().filter(|v| !(**v > 0.0)).count(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reciprocal_mode_exact_case() {
        let (z, _) = reciprocal_mode(1.0, 1.0).unwrap();
        assert_eq!(z, 0.5);
    }

    #[test]
    fn reciprocal_mode_below_naive() {
        let (z, _) = reciprocal_mode(3.0, 1.0).unwrap();
        assert!((z - (17f64.sqrt() - 3.0) / 4.0).abs() < 1e-15);
        assert!(z < 1.0 / 3.0);
    }

    #[test]
    fn reciprocal_mode_small_noise() {
        let (z, _) = reciprocal_mode(100.0, 1.0).unwrap();
        assert!((z * 100.0 - 1.0).abs() < 1e-3);
        assert_eq!(reciprocal_mode(4.0, 0.0).unwrap(), (0.25, 0.0));
        assert!(reciprocal_mode(-4.0, 0.0).is_err());
    }

    #[test]
    fn negative_mean_is_finite() {
        let (z, s) = reciprocal_mode(-5.0, 2.0).unwrap();
        assert!(z > 0.0 && z.is_finite() && s.is_finite());
    }

    #[test]
    fn zero_numerator() {
        let e = estimate_from_counts([500.0, 500.0, 3000.0, 1000.0]).unwrap();
        assert_eq!(e.m_bar, 0.0);
        assert!((e.sigma_m - e.z_max * 1000f64.sqrt()).abs() < 1e-15);
        assert!(e.sigma_m > 0.0);
    }

    #[test]
    fn all_zero_is_an_error() {
        assert!(estimate_from_counts([0.0; 4]).is_err());
    }

    #[test]
    fn large_counts_match_linear_propagation() {
        let s = [4.0e6, 2.5e6, 9.0e6, 1.0e6];
        let e = estimate_from_counts(s).unwrap();
        let (m, sm) = linear_estimate(s);
        assert!((e.m_bar / m - 1.0).abs() < 1e-6);
        assert!((e.sigma_m / sm - 1.0).abs() < 1e-3);
    }

    #[test]
    fn nonpositive_denominator_is_flagged() {
        let e = estimate_from_counts([10.0, 5.0, 100.0, 120.0]).unwrap();
        assert!(e.nonpositive_denominator);
        assert!(e.z_max > 0.0);
    }
}
