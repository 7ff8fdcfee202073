use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_spinrelax"));
    c.env_remove("SPINRELAX_OUT");
    c
}

fn run(args: &[&str], out: &Path) -> Output {
    bin().args(args).arg("--out").arg(out).output().expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const SHORT_RUN: [&str; 5] = ["simulate", "--seed", "7", "--iterations", "12"];

#[test]
fn simulate_is_byte_reproducible() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&run(&SHORT_RUN, &a));
    ok(&run(&SHORT_RUN, &b));
    let ra = fs::read(a.join("record.jsonl")).unwrap();
    assert_eq!(ra, fs::read(b.join("record.jsonl")).unwrap());
    assert_eq!(String::from_utf8(ra).unwrap().lines().count(), 12);
    assert_eq!(fs::read(a.join("trace.csv")).unwrap(), fs::read(b.join("trace.csv")).unwrap());
    let (ma, mb) = (json(&a.join("manifest.json")), json(&b.join("manifest.json")));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["seed"], 7);

    let c = d.path().join("c");
    ok(&run(&["simulate", "--seed", "8", "--iterations", "12"], &c));
    assert_ne!(fs::read(a.join("record.jsonl")).unwrap(), fs::read(c.join("record.jsonl")).unwrap());
}

#[test]
fn emitted_config_reproduces_the_run() {
    let d = tempfile::tempdir().unwrap();
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    ok(&run(&["simulate", "--seed", "3", "--iterations", "8", "--replicates", "2", "--R", "1e5"], &a));
    let cfg = a.join("config.toml");
    ok(&run(&["simulate", "--config", cfg.to_str().unwrap()], &b));
    assert_eq!(fs::read(a.join("record.jsonl")).unwrap(), fs::read(b.join("record.jsonl")).unwrap());
    assert_eq!(
        json(&a.join("manifest.json"))["config_hash"],
        json(&b.join("manifest.json"))["config_hash"]
    );
}

#[test]
fn json_config_is_accepted() {
    let d = tempfile::tempdir().unwrap();
    let a = d.path().join("a");
    ok(&run(&SHORT_RUN, &a));
    let toml_text = fs::read_to_string(a.join("config.toml")).unwrap();
    let value: toml::Value = toml::from_str(&toml_text).unwrap();
    let path = d.path().join("run.json");
    fs::write(&path, serde_json::to_string(&value).unwrap()).unwrap();
    let b = d.path().join("b");
    ok(&run(&["simulate", "--config", path.to_str().unwrap()], &b));
    assert_eq!(fs::read(a.join("record.jsonl")).unwrap(), fs::read(b.join("record.jsonl")).unwrap());
}

#[test]
fn fig2_preset_ends_near_the_truth() {
    let d = tempfile::tempdir().unwrap();
    let o = run(&["simulate", "--preset", "fig2", "--seed", "11"], d.path());
    ok(&o);
    let s = json(&d.path().join("summary.json"));
    let r = &s["replicates"][0];
    let m = &r["final_moments"];
    let (gp, gm) = (m["mean_plus"].as_f64().unwrap(), m["mean_minus"].as_f64().unwrap());
    let (sp, sm) = (m["sigma_plus"].as_f64().unwrap(), m["sigma_minus"].as_f64().unwrap());
    assert!((gp - 1.0).abs() < 3.0 * sp, "Γ+ = {gp} ± {sp}");
    assert!((gm - 3.0).abs() < 3.0 * sm, "Γ− = {gm} ± {sm}");
    assert_eq!(r["within_3_sigma"], true);

    let trace = fs::read_to_string(d.path().join("trace.csv")).unwrap();
    let header = trace.lines().next().unwrap();
    assert!(header.contains("tau_plus [ms]") && header.contains("gamma_minus_mean [ms^-1]"));
    assert_eq!(trace.lines().count(), 51);

    let shown = bin().arg("show").arg(d.path()).output().unwrap();
    ok(&shown);
    let text = String::from_utf8(shown.stdout).unwrap();
    assert!(text.starts_with("nob run, seed 11"));
    assert_eq!(text.lines().count(), 52);
}

#[test]
fn missing_field_is_a_config_error() {
    let d = tempfile::tempdir().unwrap();
    let path = d.path().join("bad.toml");
    fs::write(&path, "replicates = 1\n\n[experiment]\noptimizer = \"nob\"\n").unwrap();
    let o = run(&["simulate", "--config", path.to_str().unwrap()], &d.path().join("out"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing field `rates`"));
    assert!(!d.path().join("out").exists());
}

#[test]
fn bad_values_are_config_errors() {
    let d = tempfile::tempdir().unwrap();
    for args in [
        &["simulate", "--rates", "0,1"][..],
        &["simulate", "--R", "0.5"],
        &["simulate", "--preset", "fig7"],
        &["simulate", "--replicates", "0"],
        &["bias-study", "--preset", "fig2"],
        &["rank-protocols", "--ratio-sweep", "4:1:3"],
        &["speedup", "--rates", "-1,2"],
    ] {
        let o = run(args, d.path());
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let unknown = d.path().join("extra.toml");
    let a = d.path().join("a");
    ok(&run(&SHORT_RUN, &a));
    let text = fs::read_to_string(a.join("config.toml")).unwrap();
    fs::write(&unknown, format!("bogus = 1\n{text}")).unwrap();
    let o = run(&["simulate", "--config", unknown.to_str().unwrap()], &d.path().join("x"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn io_failures_are_runtime_errors() {
    let d = tempfile::tempdir().unwrap();
    let o = bin().arg("show").arg(d.path().join("nothing")).output().unwrap();
    assert_eq!(o.status.code(), Some(3));

    let blocker = d.path().join("file");
    fs::write(&blocker, "").unwrap();
    let o = run(&["bias-study", "--R", "1e3", "--replicates", "10"], &blocker.join("sub"));
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn out_directory_comes_from_the_environment() {
    let d = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["bias-study", "--R", "1e4", "--replicates", "20"])
        .env("SPINRELAX_OUT", d.path())
        .output()
        .unwrap();
    ok(&o);
    assert!(d.path().join("bias.csv").exists());
}

#[test]
fn rank_protocols_ratio_sweep() {
    let d = tempfile::tempdir().unwrap();
    ok(&run(&["rank-protocols", "--preset", "fig7", "--ratio-sweep", "0.125:8:9"], d.path()));
    let ranking = fs::read_to_string(d.path().join("ranking.csv")).unwrap();
    assert_eq!(ranking.lines().count(), 37);
    let mut rdr = csv::Reader::from_path(d.path().join("ratio.csv")).unwrap();
    let ratios: Vec<f64> = rdr.records().map(|r| r.unwrap()[5].parse().unwrap()).collect();
    assert_eq!(ratios.len(), 9);
    assert!(ratios.iter().all(|r| (1.2..=1.6).contains(r)), "{ratios:?}");
    let first = ranking.lines().nth(1).unwrap();
    assert!(first.starts_with("1,"), "{first}");
}

#[test]
fn bias_study_table() {
    let d = tempfile::tempdir().unwrap();
    ok(&run(&["bias-study", "--R", "1e3:1e6", "--replicates", "2000", "--seed", "5"], d.path()));
    let mut rdr = csv::Reader::from_path(d.path().join("bias.csv")).unwrap();
    let rows: Vec<(u64, f64)> = rdr
        .records()
        .map(|r| {
            let r = r.unwrap();
            (r[0].parse().unwrap(), r[3].parse::<f64>().unwrap())
        })
        .collect();
    assert_eq!(rows.iter().map(|r| r.0).collect::<Vec<_>>(), vec![1_000, 10_000, 100_000, 1_000_000]);
    assert!(rows[0].1.abs() > 0.05);
    assert!(rows[3].1.abs() < 0.01);
    assert!(rows.windows(2).all(|w| w[1].1.abs() < w[0].1.abs()));
}

#[test]
fn small_speedup_table() {
    let d = tempfile::tempdir().unwrap();
    ok(&run(&["speedup", "--rates", "0.5", "--replicates", "2", "--R", "1e4", "--seed", "1"], d.path()));
    let mut rdr = csv::Reader::from_path(d.path().join("speedup.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 1);
    assert_eq!(&rows[0][1], "4");
    let s: f64 = rows[0][2].parse().unwrap();
    assert!(s.is_finite() && s > 0.0);
    let cfg = fs::read_to_string(d.path().join("config.toml")).unwrap();
    assert!(cfg.contains("nap_budget_factor"));
}
