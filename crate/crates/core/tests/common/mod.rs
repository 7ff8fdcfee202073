//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use spinrelax::signal_model::SignalParams;

pub type M3 = [[f64; 3]; 3];

/// Generator of the population dynamics in the (−, 0, +) basis.
pub fn generator(gp: f64, gm: f64) -> M3 {
    [[-gm, gm, 0.0], [gm, -gm - gp, gp], [0.0, gp, -gp]]
}

pub fn matmul(a: &M3, b: &M3) -> M3 {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// `exp(A)` by scaling and squaring with a 30-term Taylor series.
pub fn expm(a: &M3) -> M3 {
    let norm = a.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let mut s = 0;
    while norm / 2f64.powi(s) > 0.25 {
        s += 1;
    }
    let scale = 2f64.powi(s);
    let x = a.map(|r| r.map(|v| v / scale));
    let mut term = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let mut sum = term;
    for k in 1..30 {
        term = matmul(&term, &x).map(|r| r.map(|v| v / k as f64));
        for i in 0..3 {
            for j in 0..3 {
                sum[i][j] += term[i][j];
            }
        }
    }
    for _ in 0..s {
        sum = matmul(&sum, &sum);
    }
    sum
}

pub fn propagator(tau: f64, gp: f64, gm: f64) -> M3 {
    expm(&generator(gp, gm).map(|r| r.map(|v| v * tau)))
}

/// `p00(τ) − p±0(τ)` with `idx` 2 for + and 0 for −.
pub fn normalized(tau: f64, gp: f64, gm: f64, idx: usize) -> f64 {
    let p = propagator(tau, gp, gm);
    p[1][1] - p[idx][1]
}

fn pulse(idx: usize, eta: f64) -> M3 {
    let mut b = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    if idx != 1 {
        b[idx][idx] = eta;
        b[1][1] = eta;
        b[idx][1] = 1.0 - eta;
        b[1][idx] = 1.0 - eta;
    }
    b
}

/// Dense evaluation of `R[c·B[read]·P·B[prep]·s + b]` with states as indices.
pub fn expected_counts(prep: usize, read: usize, tau: f64, gp: f64, gm: f64, p: &SignalParams, background: f64) -> f64 {
    let eta = |i: usize| if i == 0 { p.eta_minus } else { p.eta_plus };
    let s = [(1.0 - p.alpha) / 2.0, p.alpha, (1.0 - p.alpha) / 2.0];
    let c = [p.f0 * (1.0 - p.contrast), p.f0, p.f0 * (1.0 - p.contrast)];
    let chain = matmul(&matmul(&pulse(prep, eta(prep)), &propagator(tau, gp, gm)), &pulse(read, eta(read)));
    let mut v = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            v += s[i] * chain[i][j] * c[j];
        }
    }
    p.repetitions as f64 * (v + background)
}

/// Five-point central difference of `f` at `x` with step `h`.
pub fn derivative(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (-f(x + 2.0 * h) + 8.0 * f(x + h) - 8.0 * f(x - h) + f(x - 2.0 * h)) / (12.0 * h)
}

pub fn log_uniform(rng: &mut impl rand::Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi / lo).ln()).exp()
}
