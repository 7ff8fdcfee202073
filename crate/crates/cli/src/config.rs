//! Run files, presets and command-line value parsers.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use spinrelax::design::DelayGrid;
use spinrelax::harness::{ExperimentConfig, Optimizer, SpeedupStudy, FIG5_RELATIVE_BOUNDS};
use spinrelax::protocol_zoo::ratio_sweep;
use spinrelax::ratio_estimator::{BiasStudy, SigmaSource};
use spinrelax::signal_model::SignalParams;
use spinrelax::{Branch, RatePair};

use crate::Failure;

/// Input of `simulate`: the experiment plus the number of replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateFile {
    #[serde(default = "one")]
    pub replicates: usize,
    pub experiment: ExperimentConfig,
}

fn one() -> usize {
    1
}

/// Log-spaced sweep of Γ+/Γ− at fixed geometric-mean rate `scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioSweep {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    /// ms⁻¹
    #[serde(default = "unit")]
    pub scale: f64,
}

fn unit() -> f64 {
    1.0
}

/// Input of `rank-protocols`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RankFile {
    pub rates: RatePair,
    pub params: SignalParams,
    /// Fixed overhead per measurement pair, s.
    #[serde(default)]
    pub overhead_s: f64,
    pub delay_grid: DelayGrid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio_sweep: Option<RatioSweep>,
}

/// Parses a TOML or JSON file into `T`; JSON is chosen by the `.json` extension.
pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text, is_json(path)).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

fn parse<T: DeserializeOwned>(text: &str, json: bool) -> Result<T, String> {
    if json {
        serde_json::from_str(text).map_err(|e| e.to_string())
    } else {
        toml::from_str(text).map_err(|e| e.to_string().trim_end().to_string())
    }
}

/// A bare experiment is accepted in place of a full simulate file.
pub fn load_simulate(path: &Path) -> Result<SimulateFile, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
    let json = is_json(path);
    let wrapped = if json {
        serde_json::from_str::<serde_json::Value>(&text)
            .map(|v| v.get("experiment").is_some())
            .unwrap_or(true)
    } else {
        toml::from_str::<toml::Table>(&text)
            .map(|t| t.contains_key("experiment"))
            .unwrap_or(true)
    };
    let fail = |e: String| Failure::Config(format!("{}: {e}", path.display()));
    if wrapped {
        parse(&text, json).map_err(fail)
    } else {
        let experiment = parse(&text, json).map_err(fail)?;
        Ok(SimulateFile {
            replicates: 1,
            experiment,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    Fig2,
    Fig5,
    Fig6,
    Fig7,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Fig2 => "fig2",
            Preset::Fig5 => "fig5",
            Preset::Fig6 => "fig6",
            Preset::Fig7 => "fig7",
        }
    }
}

pub fn wrong_preset(preset: Preset, command: &str) -> Failure {
    Failure::Config(format!("preset {} does not apply to {command}", preset.name()))
}

pub fn fig5_study() -> SpeedupStudy {
    let mut base = ExperimentConfig::fig5(1.0).expect("unit rate is valid");
    base.params.repetitions = 100_000;
    SpeedupStudy {
        base,
        rates: ratio_sweep(0.05, 100.0, 5),
        adaptive_replicates: 10,
        nap_replicates: 10,
        nap_budget_factor: 20.0,
        relative_bounds: Some(FIG5_RELATIVE_BOUNDS),
    }
}

pub fn fig6_study() -> BiasStudy {
    BiasStudy {
        params: SignalParams::reference(),
        branch: Branch::Plus,
        repetitions: vec![1_000, 10_000, 100_000, 1_000_000, 10_000_000],
        replicates: 10_000,
        sigma_source: SigmaSource::Observed,
        seed: 0,
    }
}

pub fn fig7_rank() -> RankFile {
    RankFile {
        rates: RatePair::new(1.0, 3.0).expect("valid rates"),
        params: SignalParams::ideal(),
        overhead_s: 0.0,
        delay_grid: DelayGrid::WIDE,
        ratio_sweep: None,
    }
}

pub fn fig2_simulate(optimizer: Optimizer) -> SimulateFile {
    SimulateFile {
        replicates: 1,
        experiment: ExperimentConfig::fig2(optimizer),
    }
}

/// `lo:hi` or `lo:hi:n`.
pub fn parse_span(s: &str) -> Result<(f64, f64, Option<usize>), String> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |p: &str| p.trim().parse::<f64>().map_err(|_| format!("'{p}' is not a number"));
    match parts.as_slice() {
        [lo, hi] => Ok((num(lo)?, num(hi)?, None)),
        [lo, hi, n] => {
            let n = n.trim().parse::<usize>().map_err(|_| format!("'{n}' is not a point count"))?;
            Ok((num(lo)?, num(hi)?, Some(n)))
        }
        _ => Err(format!("expected lo:hi or lo:hi:n, got '{s}'")),
    }
}

/// A repetition count such as `1e6`.
pub fn parse_count(s: &str) -> Result<u64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("'{s}' is not a number"))?;
    if !(v >= 1.0 && v.fract() == 0.0 && v <= 1e15) {
        return Err(format!("repetition count must be a positive integer, got '{s}'"));
    }
    Ok(v as u64)
}

/// Lists parsed from a single argument (clap treats a bare `Vec` as a repeated flag).
pub type Counts = Vec<u64>;
pub type RateList = Vec<f64>;

/// Every decade from `lo` to `hi` (`1e3:1e7`) or an explicit list (`1e3,1e5`).
pub fn parse_counts(s: &str) -> Result<Counts, String> {
    if s.contains(':') {
        let (lo, hi, n) = parse_span(s)?;
        let (lo, hi) = (parse_count(&lo.to_string())?, parse_count(&hi.to_string())?);
        if hi < lo {
            return Err(format!("empty range '{s}'"));
        }
        return Ok(match n {
            Some(n) if n >= 2 => ratio_sweep(lo as f64, hi as f64, n).iter().map(|v| v.round() as u64).collect(),
            Some(_) => vec![lo],
            None => {
                let mut out = vec![lo];
                while out[out.len() - 1] * 10 <= hi {
                    out.push(out[out.len() - 1] * 10);
                }
                out
            }
        });
    }
    s.split(',').map(parse_count).collect()
}

/// `p,m` or a single value for equal rates.
pub fn parse_rates(s: &str) -> Result<RatePair, String> {
    let vals: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("'{p}' is not a rate")))
        .collect::<Result<_, _>>()?;
    let (p, m) = match vals.as_slice() {
        [g] => (*g, *g),
        [p, m] => (*p, *m),
        _ => return Err(format!("expected 'gamma' or 'gamma_plus,gamma_minus', got '{s}'")),
    };
    RatePair::new(p, m).map_err(|e| e.to_string())
}

/// `lo:hi[:n]` log-spaced (5 points by default) or a comma list.
pub fn parse_rate_list(s: &str) -> Result<RateList, String> {
    let v: Vec<f64> = if s.contains(':') {
        let (lo, hi, n) = parse_span(s)?;
        ratio_sweep(lo, hi, n.unwrap_or(5))
    } else {
        s.split(',')
            .map(|p| p.trim().parse::<f64>().map_err(|_| format!("'{p}' is not a rate")))
            .collect::<Result<_, _>>()?
    };
    if v.iter().all(|g| g.is_finite() && *g > 0.0) && !v.is_empty() {
        Ok(v)
    } else {
        Err(format!("rates must be positive, got '{s}'"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_and_counts() {
        assert_eq!(parse_span("0.125:8:25").unwrap(), (0.125, 8.0, Some(25)));
        assert_eq!(parse_counts("1e3:1e7").unwrap(), vec![1_000, 10_000, 100_000, 1_000_000, 10_000_000]);
        assert_eq!(parse_counts("1e3,5e4").unwrap(), vec![1_000, 50_000]);
        assert!(parse_count("0.5").is_err());
        assert_eq!(parse_rate_list("0.05:100").unwrap().len(), 5);
        assert!(parse_rate_list("1,-2").is_err());
    }

    #[test]
    fn rates_accept_one_or_two_values() {
        assert_eq!(parse_rates("2").unwrap(), RatePair::new(2.0, 2.0).unwrap());
        assert_eq!(parse_rates("1, 3").unwrap(), RatePair::new(1.0, 3.0).unwrap());
        assert!(parse_rates("0,1").is_err());
    }

    #[test]
    fn run_files_round_trip_through_toml() {
        let file = fig2_simulate(Optimizer::Nob);
        let text = toml::to_string(&file).unwrap();
        assert_eq!(parse::<SimulateFile>(&text, false).unwrap(), file);
        let rank = RankFile {
            ratio_sweep: Some(RatioSweep {
                lo: 0.125,
                hi: 8.0,
                points: 25,
                scale: 1.0,
            }),
            ..fig7_rank()
        };
        assert_eq!(parse::<RankFile>(&toml::to_string(&rank).unwrap(), false).unwrap(), rank);
        let study = fig5_study();
        assert_eq!(parse::<SpeedupStudy>(&toml::to_string(&study).unwrap(), false).unwrap(), study);
        let bias = fig6_study();
        assert_eq!(parse::<BiasStudy>(&toml::to_string(&bias).unwrap(), false).unwrap(), bias);
    }
}
