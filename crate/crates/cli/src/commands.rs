use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spinrelax::design::{DelayPair, TimingModel};
use spinrelax::harness::{run_replicates, speedup_study, IterationRecord, Optimizer, RunRecord, SpeedupStudy};
use spinrelax::inference::{MeasurementPair, Moments};
use spinrelax::protocol_zoo::{rank_protocols, ratio_sweep, sensitivity_ratio_curve};
use spinrelax::ratio_estimator::{bias_study, BiasStudy};
use spinrelax::{Branch, RatePair};

use crate::config::{self, Preset, RankFile, RatioSweep, SimulateFile};
use crate::output::{num, Artifacts};
use crate::{Failure, Common};

fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

fn print_done(dir: &Path) {
    println!("wrote {}", dir.display());
}

// ---------------------------------------------------------------- simulate

pub struct SimulateArgs {
    pub common: Common,
    pub optimizer: Option<Optimizer>,
    pub iterations: Option<usize>,
}

/// One line of `record.jsonl`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RecordLine {
    pub replicate: u64,
    pub iteration: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delays: Option<DelayPair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweeps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measurement: Option<MeasurementPair>,
    pub moments: Moments,
    pub elapsed_s: f64,
    pub elapsed_with_cpu_s: f64,
    pub delay_time_s: f64,
    pub cpu_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

impl RecordLine {
    fn new(replicate: u64, it: &IterationRecord) -> Self {
        Self {
            replicate,
            iteration: it.iteration,
            delays: it.delays,
            sweeps: it.sweeps,
            measurement: it.measurement,
            moments: it.moments,
            elapsed_s: it.elapsed_s,
            elapsed_with_cpu_s: it.elapsed_with_cpu_s,
            delay_time_s: it.delay_time_s,
            cpu_s: it.cpu_s,
            flag: it.flag.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub replicate: u64,
    pub final_moments: Moments,
    pub total_time_s: f64,
    pub total_time_with_cpu_s: f64,
    pub delay_time_s: f64,
    pub duty_cycle: f64,
    pub flagged: usize,
    pub within_3_sigma: bool,
    pub fit_exponent_plus: Option<f64>,
    pub fit_exponent_minus: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub optimizer: Optimizer,
    pub seed: u64,
    pub true_rates: RatePair,
    pub replicates: Vec<ReplicateSummary>,
    pub fraction_within_3_sigma: f64,
}

fn summarize(runs: &[RunRecord], cfg: &SimulateFile) -> SimulateSummary {
    let replicates: Vec<ReplicateSummary> = runs
        .iter()
        .map(|r| ReplicateSummary {
            replicate: r.replicate,
            final_moments: r.final_moments,
            total_time_s: r.total_time_s,
            total_time_with_cpu_s: r.total_time_with_cpu_s,
            delay_time_s: r.delay_time_s,
            duty_cycle: r.duty_cycle,
            flagged: r.flagged,
            within_3_sigma: r.within(3.0),
            fit_exponent_plus: r.fit_exponent(Branch::Plus),
            fit_exponent_minus: r.fit_exponent(Branch::Minus),
        })
        .collect();
    let inside = replicates.iter().filter(|r| r.within_3_sigma).count();
    SimulateSummary {
        optimizer: cfg.experiment.optimizer,
        seed: cfg.experiment.seed,
        true_rates: cfg.experiment.rates,
        fraction_within_3_sigma: inside as f64 / replicates.len().max(1) as f64,
        replicates,
    }
}

const TRACE_HEADER: [&str; 17] = [
    "replicate",
    "iteration",
    "sweeps",
    "elapsed [s]",
    "elapsed_with_cpu [s]",
    "delay_time [s]",
    "cpu [s]",
    "tau_plus [ms]",
    "tau_minus [ms]",
    "m_plus",
    "m_minus",
    "gamma_plus_mean [ms^-1]",
    "gamma_plus_sigma [ms^-1]",
    "gamma_minus_mean [ms^-1]",
    "gamma_minus_sigma [ms^-1]",
    "covariance [ms^-2]",
    "flag",
];

fn trace_row(replicate: u64, it: &IterationRecord) -> Vec<String> {
    let m = &it.moments;
    vec![
        replicate.to_string(),
        it.iteration.to_string(),
        it.sweeps.map(|s| s.to_string()).unwrap_or_default(),
        num(it.elapsed_s),
        num(it.elapsed_with_cpu_s),
        num(it.delay_time_s),
        num(it.cpu_s),
        opt_num(it.delays.map(|d| d.tau_plus)),
        opt_num(it.delays.map(|d| d.tau_minus)),
        opt_num(it.measurement.map(|x| x.m_plus)),
        opt_num(it.measurement.map(|x| x.m_minus)),
        num(m.mean_plus),
        num(m.sigma_plus),
        num(m.mean_minus),
        num(m.sigma_minus),
        num(m.covariance),
        it.flag.clone().unwrap_or_default(),
    ]
}

pub fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let c = &args.common;
    let mut file = match (&c.config, c.preset) {
        (Some(_), Some(_)) => return Err(Failure::Config("use either --config or --preset, not both".into())),
        (Some(path), None) => config::load_simulate(path)?,
        (None, None) | (None, Some(Preset::Fig2)) => config::fig2_simulate(args.optimizer.unwrap_or_default()),
        (None, Some(Preset::Fig5)) => {
            let g = c.rates.map(|r| r.gamma_plus()).unwrap_or(1.0);
            SimulateFile {
                replicates: 1,
                experiment: spinrelax::harness::ExperimentConfig::fig5(g).map_err(Failure::from)?,
            }
        }
        (None, Some(p)) => return Err(config::wrong_preset(p, "simulate")),
    };
    let e = &mut file.experiment;
    if let Some(o) = args.optimizer {
        e.optimizer = o;
    }
    if let Some(s) = c.seed {
        e.seed = s;
    }
    if let Some(r) = c.repetitions {
        e.params.repetitions = r;
    }
    if let Some(r) = c.rates {
        e.rates = r;
    }
    if let Some(n) = args.iterations {
        e.iterations = n;
    }
    if let Some(n) = c.replicates {
        file.replicates = n;
    }
    if file.replicates == 0 {
        return Err(Failure::Config("replicates must be at least 1".into()));
    }
    e.validate()?;

    let runs = run_replicates(&file.experiment, file.replicates)?;
    let mut out = Artifacts::create(&c.out)?;
    out.jsonl(
        "record.jsonl",
        runs.iter()
            .flat_map(|r| r.iterations.iter().map(move |it| RecordLine::new(r.replicate, it))),
    )?;
    let rows: Vec<Vec<String>> = runs
        .iter()
        .flat_map(|r| r.iterations.iter().map(move |it| trace_row(r.replicate, it)))
        .collect();
    out.csv("trace.csv", &TRACE_HEADER, &rows)?;
    let summary = summarize(&runs, &file);
    out.json("summary.json", &summary)?;
    for r in &summary.replicates {
        let m = &r.final_moments;
        println!(
            "replicate {}: Γ+ = {:.4} ± {:.4} ms⁻¹, Γ− = {:.4} ± {:.4} ms⁻¹ after {:.1} s{}",
            r.replicate,
            m.mean_plus,
            m.sigma_plus,
            m.mean_minus,
            m.sigma_minus,
            r.total_time_s,
            if r.flagged > 0 { format!(" ({} flagged)", r.flagged) } else { String::new() }
        );
    }
    print_done(&out.finish("simulate", &file, file.experiment.seed)?);
    Ok(())
}

// ---------------------------------------------------------- rank-protocols

pub struct RankArgs {
    pub common: Common,
    pub ratio_sweep: Option<(f64, f64, Option<usize>)>,
}

pub fn rank(args: RankArgs) -> Result<(), Failure> {
    let c = &args.common;
    let mut file = match (&c.config, c.preset) {
        (Some(_), Some(_)) => return Err(Failure::Config("use either --config or --preset, not both".into())),
        (Some(path), None) => config::load::<RankFile>(path)?,
        (None, None) | (None, Some(Preset::Fig7)) => config::fig7_rank(),
        (None, Some(p)) => return Err(config::wrong_preset(p, "rank-protocols")),
    };
    if let Some(r) = c.rates {
        file.rates = r;
    }
    if let Some(r) = c.repetitions {
        file.params.repetitions = r;
    }
    if let Some((lo, hi, n)) = args.ratio_sweep {
        file.ratio_sweep = Some(RatioSweep {
            lo,
            hi,
            points: n.unwrap_or(25),
            scale: file.ratio_sweep.map(|s| s.scale).unwrap_or(1.0),
        });
    }
    file.params.validate()?;
    file.delay_grid.validate()?;
    if !(file.overhead_s >= 0.0) {
        return Err(Failure::Config("overhead_s must be non-negative".into()));
    }
    if let Some(s) = file.ratio_sweep {
        if !(s.lo > 0.0 && s.hi >= s.lo && s.points >= 1 && s.scale > 0.0) {
            return Err(Failure::Config("ratio_sweep needs 0 < lo <= hi, points >= 1 and scale > 0".into()));
        }
    }
    let timing = TimingModel {
        overhead_s: file.overhead_s,
        ..TimingModel::new(file.params.repetitions)
    };

    let ranking = rank_protocols(&file.rates, &file.params, &timing, &file.delay_grid)?;
    let mut out = Artifacts::create(&c.out)?;
    let rows: Vec<Vec<String>> = ranking
        .entries
        .iter()
        .enumerate()
        .map(|(k, e)| {
            vec![
                (k + 1).to_string(),
                e.label.clone(),
                num(e.cost),
                num(e.cost_ratio),
                num(e.delays.tau_plus),
                num(e.delays.tau_minus),
                e.eta_insensitive.to_string(),
            ]
        })
        .collect();
    out.csv(
        "ranking.csv",
        &["rank", "protocol", "cost [s^1/2]", "cost_ratio", "tau_plus [ms]", "tau_minus [ms]", "eta_insensitive"],
        &rows,
    )?;
    println!("{:>4}  {:<22} {:>10}  {:>10} {:>10}", "rank", "protocol", "cost ratio", "τ+ [ms]", "τ− [ms]");
    for (k, e) in ranking.entries.iter().enumerate() {
        println!(
            "{:>4}  {:<22} {:>10.4}  {:>10.4} {:>10.4}{}",
            k + 1,
            e.label,
            e.cost_ratio,
            e.delays.tau_plus,
            e.delays.tau_minus,
            if e.eta_insensitive { "  robust" } else { "" }
        );
    }

    let mut summary = serde_json::json!({ "ranking": ranking });
    if let Some(s) = file.ratio_sweep {
        let curve = sensitivity_ratio_curve(&ratio_sweep(s.lo, s.hi, s.points), s.scale, &file.params, &timing, &file.delay_grid)?;
        let rows: Vec<Vec<String>> = curve
            .iter()
            .map(|r| {
                vec![
                    num(r.rate_ratio),
                    num(r.gamma_plus),
                    num(r.gamma_minus),
                    num(r.cost_robust),
                    num(r.cost_optimal),
                    num(r.ratio),
                    num(r.robust_delays.tau_plus),
                    num(r.robust_delays.tau_minus),
                    num(r.optimal_delays.tau_plus),
                    num(r.optimal_delays.tau_minus),
                ]
            })
            .collect();
        out.csv(
            "ratio.csv",
            &[
                "rate_ratio",
                "gamma_plus [ms^-1]",
                "gamma_minus [ms^-1]",
                "cost_robust [s^1/2]",
                "cost_optimal [s^1/2]",
                "cost_ratio",
                "robust_tau_plus [ms]",
                "robust_tau_minus [ms]",
                "optimal_tau_plus [ms]",
                "optimal_tau_minus [ms]",
            ],
            &rows,
        )?;
        let (lo, hi) = curve
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), r| (a.min(r.ratio), b.max(r.ratio)));
        println!("robust/optimal cost ratio over Γ+/Γ− ∈ [{}, {}]: {lo:.4} – {hi:.4}", s.lo, s.hi);
        summary["ratio_curve"] = serde_json::to_value(&curve).expect("rows serialize");
    }
    out.json("summary.json", &summary)?;
    print_done(&out.finish("rank-protocols", &file, 0)?);
    Ok(())
}

// -------------------------------------------------------------- bias-study

pub struct BiasArgs {
    pub common: Common,
    pub counts: Option<Vec<u64>>,
    pub branch: Option<Branch>,
}

pub fn bias(args: BiasArgs) -> Result<(), Failure> {
    let c = &args.common;
    let mut study = match (&c.config, c.preset) {
        (Some(_), Some(_)) => return Err(Failure::Config("use either --config or --preset, not both".into())),
        (Some(path), None) => config::load::<BiasStudy>(path)?,
        (None, None) | (None, Some(Preset::Fig6)) => config::fig6_study(),
        (None, Some(p)) => return Err(config::wrong_preset(p, "bias-study")),
    };
    if let Some(v) = &args.counts {
        study.repetitions = v.clone();
    }
    if let Some(b) = args.branch {
        study.branch = b;
    }
    if let Some(n) = c.replicates {
        study.replicates = n;
    }
    if let Some(s) = c.seed {
        study.seed = s;
    }
    if c.rates.is_some() {
        return Err(Failure::Config("--rates does not apply to bias-study".into()));
    }
    if study.repetitions.is_empty() {
        return Err(Failure::Config("repetitions must not be empty".into()));
    }
    let rows = bias_study(&study)?;
    let mut out = Artifacts::create(&c.out)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.repetitions.to_string(),
                num(r.mean_ratio_nonlinear),
                num(r.std_nonlinear),
                num(r.bias_nonlinear()),
                num(r.mean_ratio_linear),
                num(r.std_linear),
                num(r.bias_linear()),
                r.zero_denominator_count.to_string(),
                r.nonpositive_denominator_count.to_string(),
            ]
        })
        .collect();
    out.csv(
        "bias.csv",
        &[
            "repetitions",
            "mean_z_over_true_nonlinear",
            "std_nonlinear",
            "bias_nonlinear",
            "mean_z_over_true_linear",
            "std_linear",
            "bias_linear",
            "zero_denominators",
            "nonpositive_denominators",
        ],
        &table,
    )?;
    println!("{:>10}  {:>12}  {:>12}", "R", "bias (mode)", "bias (1/Δ)");
    for r in &rows {
        println!("{:>10.0e}  {:>+12.5}  {:>+12.5}", r.repetitions as f64, r.bias_nonlinear(), r.bias_linear());
    }
    out.json("summary.json", &rows)?;
    print_done(&out.finish("bias-study", &study, study.seed)?);
    Ok(())
}

// ----------------------------------------------------------------- speedup

pub struct SpeedupArgs {
    pub common: Common,
    pub rate_list: Option<Vec<f64>>,
    pub budget_factor: Option<f64>,
}

pub fn speedup(args: SpeedupArgs) -> Result<(), Failure> {
    let c = &args.common;
    let mut study: SpeedupStudy = match (&c.config, c.preset) {
        (Some(_), Some(_)) => return Err(Failure::Config("use either --config or --preset, not both".into())),
        (Some(path), None) => config::load(path)?,
        (None, None) | (None, Some(Preset::Fig5)) => config::fig5_study(),
        (None, Some(p)) => return Err(config::wrong_preset(p, "speedup")),
    };
    if let Some(v) = &args.rate_list {
        study.rates = v.clone();
    }
    if let Some(n) = c.replicates {
        study.adaptive_replicates = n;
        study.nap_replicates = n;
    }
    if let Some(r) = c.repetitions {
        study.base.params.repetitions = r;
    }
    if let Some(s) = c.seed {
        study.base.seed = s;
    }
    if let Some(f) = args.budget_factor {
        study.nap_budget_factor = f;
    }
    study.base.validate()?;
    if study.rates.is_empty() {
        return Err(Failure::Config("rates must not be empty".into()));
    }
    let rows = speedup_study(&study)?;
    let mut out = Artifacts::create(&c.out)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                num(r.gamma),
                r.pairings.to_string(),
                num(r.speedup_plus_mean),
                num(r.speedup_plus_std),
                num(r.speedup_minus_mean),
                num(r.speedup_minus_std),
                num(r.delay_speedup_plus_mean),
                num(r.delay_speedup_minus_mean),
                r.lower_bounds.to_string(),
                r.extrapolated.to_string(),
                num(r.adaptive_time_mean_s),
                num(r.adaptive_duty_cycle),
                num(r.nap_duty_cycle),
                r.adaptive_flagged.to_string(),
            ]
        })
        .collect();
    out.csv(
        "speedup.csv",
        &[
            "gamma [ms^-1]",
            "pairings",
            "speedup_plus_mean",
            "speedup_plus_std",
            "speedup_minus_mean",
            "speedup_minus_std",
            "delay_speedup_plus_mean",
            "delay_speedup_minus_mean",
            "lower_bound_pairings",
            "extrapolated_pairings",
            "adaptive_time_mean [s]",
            "adaptive_duty_cycle",
            "nap_duty_cycle",
            "adaptive_flagged_runs",
        ],
        &table,
    )?;
    println!("{:>12}  {:>16}  {:>16}  {:>6}", "Γ [ms⁻¹]", "speedup σΓ+", "speedup σΓ−", "bound");
    for r in &rows {
        println!(
            "{:>12.4}  {:>8.2} ± {:<5.2}  {:>8.2} ± {:<5.2}  {:>6}",
            r.gamma, r.speedup_plus_mean, r.speedup_plus_std, r.speedup_minus_mean, r.speedup_minus_std, r.lower_bounds
        );
    }
    out.json("summary.json", &rows)?;
    print_done(&out.finish("speedup", &study, study.base.seed)?);
    Ok(())
}

// -------------------------------------------------------------------- show

fn record_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("record.jsonl")
    } else {
        path.to_path_buf()
    }
}

pub fn show(path: &Path, replicate: Option<u64>) -> Result<(), Failure> {
    let file = record_path(path);
    let f = fs::File::open(&file).map_err(|e| Failure::Runtime(format!("cannot open {}: {e}", file.display())))?;
    let mut lines = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Failure::Runtime(format!("{}: {e}", file.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RecordLine = serde_json::from_str(&line)
            .map_err(|e| Failure::Runtime(format!("{}:{}: not a run record: {e}", file.display(), k + 1)))?;
        if replicate.is_none_or(|r| r == rec.replicate) {
            lines.push(rec);
        }
    }
    if lines.is_empty() {
        return Err(Failure::Runtime(format!("{}: no matching records", file.display())));
    }
    if let Some(dir) = file.parent() {
        if let Ok(text) = fs::read_to_string(dir.join("summary.json")) {
            if let Ok(s) = serde_json::from_str::<SimulateSummary>(&text) {
                println!(
                    "{} run, seed {}, true Γ = ({}, {}) ms⁻¹, {} replicate(s), {:.0}% within 3σ",
                    s.optimizer.name(),
                    s.seed,
                    s.true_rates.gamma_plus(),
                    s.true_rates.gamma_minus(),
                    s.replicates.len(),
                    100.0 * s.fraction_within_3_sigma
                );
            }
        }
    }
    println!(
        "{:>4} {:>5} {:>10} {:>10} {:>22} {:>22} {:>12}",
        "rep", "iter", "τ+ [ms]", "τ− [ms]", "Γ+ [ms⁻¹]", "Γ− [ms⁻¹]", "T [s]"
    );
    for l in &lines {
        let (tp, tm) = l
            .delays
            .map(|d| (format!("{:.5}", d.tau_plus), format!("{:.5}", d.tau_minus)))
            .unwrap_or_else(|| (format!("sweep {}", l.sweeps.unwrap_or(0)), String::new()));
        println!(
            "{:>4} {:>5} {:>10} {:>10} {:>22} {:>22} {:>12.2}{}",
            l.replicate,
            l.iteration,
            tp,
            tm,
            format!("{:.4} ± {:.4}", l.moments.mean_plus, l.moments.sigma_plus),
            format!("{:.4} ± {:.4}", l.moments.mean_minus, l.moments.sigma_minus),
            l.elapsed_s,
            l.flag.as_deref().map(|f| format!("  [{f}]")).unwrap_or_default()
        );
    }
    Ok(())
}
