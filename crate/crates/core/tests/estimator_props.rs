use proptest::prelude::*;
use spinrelax::ratio_estimator::{
    bias_study, estimate_from_counts, linear_estimate, reciprocal_mode, z_true, BiasStudy, SigmaSource,
};
use spinrelax::signal_model::SignalParams;
use spinrelax::Branch;

/// `(sqrt(Δ² + 8σ²) − Δ)/(4σ²)` written out directly.
fn textbook_mode(delta: f64, sigma: f64) -> f64 {
    ((delta * delta + 8.0 * sigma * sigma).sqrt() - delta) / (4.0 * sigma * sigma)
}

#[test]
fn worked_values() {
    assert_eq!(reciprocal_mode(1.0, 1.0).unwrap().0, 0.5);
    let z = reciprocal_mode(3.0, 1.0).unwrap().0;
    assert!((z - (17f64.sqrt() - 3.0) / 4.0).abs() < 1e-15);
    assert!((z - 0.28078).abs() < 1e-5);
    let z = reciprocal_mode(100.0, 1.0).unwrap().0;
    assert!((z * 100.0 - 1.0).abs() < 1e-3);
}

#[test]
fn zero_numerator() {
    let e = estimate_from_counts([500.0, 500.0, 2000.0, 1000.0]).unwrap();
    assert_eq!(e.m_bar, 0.0);
    assert!((e.sigma_m - e.z_max * 1000f64.sqrt()).abs() < 1e-15);
}

fn bias_rows(source: SigmaSource, reps: Vec<u64>) -> Vec<spinrelax::ratio_estimator::BiasRow> {
    bias_study(&BiasStudy {
        params: SignalParams::reference(),
        branch: Branch::Plus,
        repetitions: reps,
        replicates: 4000,
        sigma_source: source,
        seed: 11,
    })
    .unwrap()
}

#[test]
fn bias_vanishes_at_large_r_and_not_at_small() {
    let rows = bias_rows(SigmaSource::Observed, vec![1_000, 1_000_000]);
    assert!(rows[0].bias_nonlinear().abs() > 0.05, "{:?}", rows[0]);
    assert!(rows[1].bias_nonlinear().abs() < 0.01, "{:?}", rows[1]);
}

#[test]
fn observed_and_exact_variance_agree_at_large_r() {
    let obs = bias_rows(SigmaSource::Observed, vec![1_000_000]);
    let exact = bias_rows(SigmaSource::Exact, vec![1_000_000]);
    // same draws, different variance source
    assert!((obs[0].mean_ratio_nonlinear - exact[0].mean_ratio_nonlinear).abs() < 2e-3);
    assert!((obs[0].mean_ratio_linear - exact[0].mean_ratio_linear).abs() < 1e-15);
}

#[test]
fn z_true_is_reciprocal_of_expected_denominator() {
    let p = SignalParams::reference();
    for b in Branch::BOTH {
        let pair = spinrelax::signal_model::SignalPair::robust(b).oriented(&p);
        let d = pair.expected_denominator(&p);
        assert!((z_true(&p, b) * d - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn mode_formula_and_monotonicity(delta in -50.0f64..50.0, s1 in 0.1f64..10.0, s2 in 0.1f64..10.0) {
        let (lo, hi) = (s1.min(s2), s1.max(s2));
        let z_lo = reciprocal_mode(delta, lo).unwrap().0;
        let z_hi = reciprocal_mode(delta, hi).unwrap().0;
        prop_assert!((z_lo - textbook_mode(delta, lo)).abs() <= 1e-9 * z_lo.abs().max(1e-3));
        if delta > 0.0 {
            prop_assert!(z_hi <= z_lo);
            prop_assert!(z_lo * delta < 1.0);
        }
    }

    #[test]
    fn reduces_to_linear_propagation(
        a in 1e5f64..1e7,
        b in 1e5f64..1e7,
        c in 1e6f64..1e7,
        frac in 0.3f64..0.9,
    ) {
        let d = c * frac;
        prop_assume!((c - d) / (c + d).sqrt() > 100.0);
        let e = estimate_from_counts([a, b, c, d]).unwrap();
        let (m, s) = linear_estimate([a, b, c, d]);
        prop_assert!((e.m_bar - m).abs() <= 1e-3 * m.abs().max(s));
        prop_assert!((e.sigma_m / s - 1.0).abs() < 1e-3);
    }
}
