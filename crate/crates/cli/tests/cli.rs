use std::path::Path;
use std::process::Command as Process;

use jumpres_cli::config::{apply_override, Severity};
use jumpres_cli::series::read_series;
use jumpres_cli::{parse_config, run, validate_config, Command, RunConfig, SeriesError};

const BIN: &str = env!("CARGO_BIN_EXE_jumpres");

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.numerics.horizon = Some(24.0);
    c.numerics.paths = 64;
    c.experiment.sample_paths = 4;
    c
}

#[test]
fn three_row_series() {
    let csv = "timestamp,inflow_m3s,outflow_m3s,volume_m3\n\
               2020-01-01T00:00:00,1.5,1.0,3600\n\
               2020-01-01T01:00:00,2.0,,7200\n\
               2020-01-01T02:00:00,2.5,1.2,10800\n";
    let s = read_series(csv.as_bytes()).unwrap();
    assert_eq!(s.len(), 3);
    assert_eq!(s.volume.as_ref().unwrap(), &vec![1.0, 2.0, 3.0]);
    assert!(s.outflow.as_ref().unwrap()[1].is_nan());
}

#[test]
fn inflow_only_series() {
    let csv = "timestamp,inflow_m3s\n2020-01-01 00:00,1\n2020-01-01 01:00,2\n";
    let s = read_series(csv.as_bytes()).unwrap();
    assert_eq!(s.len(), 2);
    assert!(s.outflow.is_none() && s.volume.is_none());
}

#[test]
fn negative_inflow_names_its_line() {
    let csv = "timestamp,inflow_m3s\n2020-01-01T00:00:00,1\n2020-01-01T01:00:00,-1\n";
    match read_series(csv.as_bytes()) {
        Err(SeriesError::NegativeDischarge { line, .. }) => assert_eq!(line, 3),
        other => panic!("{other:?}"),
    }
}

#[test]
fn shuffled_timestamps() {
    let csv = "timestamp,inflow_m3s\n2020-01-01T02:00:00,1\n2020-01-01T00:00:00,1\n2020-01-01T01:00:00,1\n";
    assert!(matches!(read_series(csv.as_bytes()), Err(SeriesError::NonMonotoneTime { line: 3 })));
}

#[test]
fn malformed_number_names_its_line() {
    let csv = "timestamp,inflow_m3s\n2020-01-01T00:00:00,1\n2020-01-01T01:00:00,abc\n";
    assert!(matches!(read_series(csv.as_bytes()), Err(SeriesError::ParseError { line: 3, .. })));
}

#[test]
fn default_config_is_valid() {
    assert!(validate_config(&RunConfig::default()).is_empty());
}

#[test]
fn horizon_mismatch() {
    let mut c = RunConfig::default();
    c.numerics.steps = Some(100);
    c.numerics.horizon = Some(720.0);
    let v = validate_config(&c);
    assert!(v.iter().any(|v| v.message.contains("horizon mismatch")), "{v:?}");
}

#[test]
fn bundles_must_divide_paths() {
    let mut c = RunConfig::default();
    c.numerics.bundles = 3;
    c.numerics.paths = 40_000;
    let v = validate_config(&c);
    assert!(v.iter().any(|v| v.message.contains("B must divide S") && v.severity == Severity::Error));
}

#[test]
fn hinge_terms_need_a_nonlinear_basis() {
    let mut c = RunConfig::default();
    c.objective.w4 = 1.0;
    let v = validate_config(&c);
    assert_eq!(v.len(), 1);
    assert_eq!(v[0].severity, Severity::Warning);
    assert!(v[0].message.contains("hinge terms unrepresentable"));
}

#[test]
fn all_violations_are_listed() {
    let mut c = RunConfig::default();
    c.numerics.bundles = 3;
    c.objective.w1 = -1.0;
    c.experiment.bins = 0;
    let errors = validate_config(&c).into_iter().filter(|v| v.severity == Severity::Error).count();
    assert_eq!(errors, 3);
}

#[test]
fn overrides_follow_dotted_paths() {
    let mut doc = serde_json::json!({});
    apply_override(&mut doc, "numerics.h=0.5").unwrap();
    apply_override(&mut doc, "experiment.policy=lq").unwrap();
    let c = parse_config(&doc.to_string(), &["numerics.basis=\"NLQ2\"".into()]).unwrap();
    assert_eq!(c.numerics.h, 0.5);
    assert_eq!(c.experiment.policy, jumpres_cli::config::SimulatePolicy::Lq);
    assert_eq!(c.numerics.basis, jumpres_core::lsmc::BasisId::Nlq2);
    assert!(parse_config("{\"numerics\": {\"hh\": 1}}", &[]).is_err());
}

#[test]
fn moments_csv_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    run(Command::Moments, &RunConfig::default(), dir.path()).unwrap();
    let mut r = csv::Reader::from_path(dir.path().join("moments.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    let row = r.records().next().unwrap().unwrap();
    let get = |name: &str| row[headers.iter().position(|h| h == name).unwrap()].parse::<f64>().unwrap();
    let model = jumpres_cli::config::ModelConfig::default().build().unwrap();
    let m = jumpres_core::jump_process::stationary_moment_summary(&model).unwrap();
    assert!((get("Ave") - m.ave).abs() <= 1e-8 * m.ave);
    assert!((get("Kur") - m.kur).abs() <= 1e-8 * m.kur);
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file() && p.file_name().unwrap() != "manifest.json")
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}

#[test]
fn manifest_reproduces_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut c = small();
    c.numerics.basis = jumpres_core::lsmc::BasisId::Nlq2;
    c.objective.w4 = 1.0;
    c.numerics.bundles = 4;
    run(Command::SolveFbsde, &c, a.path()).unwrap();
    let status = Process::new(BIN)
        .args(["solve-fbsde", "--config"])
        .arg(a.path().join("manifest.json"))
        .arg("--out-dir")
        .arg(b.path())
        .output()
        .unwrap();
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 6);
    for ((name, x), (_, y)) in fa.iter().zip(&fb) {
        if name == "iterations.json" {
            // Wall-clock time is the only non-reproducible field.
            let strip = |bytes: &[u8]| {
                let mut v: serde_json::Value = serde_json::from_slice(bytes).unwrap();
                v.as_array_mut().unwrap().iter_mut().for_each(|r| r["wall_time_s"] = 0.into());
                v
            };
            assert_eq!(strip(x), strip(y));
        } else {
            assert_eq!(x, y, "{name} differs");
        }
    }
}

#[test]
fn statistics_csvs_are_consistent() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small();
    c.numerics.bundles = 4;
    run(Command::SolveFbsde, &c, dir.path()).unwrap();
    let mut r = csv::Reader::from_path(dir.path().join("density.csv")).unwrap();
    assert_eq!(r.headers().unwrap().len(), 101);
    for row in r.records() {
        let total: f64 = row.unwrap().iter().skip(1).map(|x| x.parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }
    let mut r = csv::Reader::from_path(dir.path().join("bands.csv")).unwrap();
    assert_eq!(r.headers().unwrap().len(), 6);
    assert_eq!(r.records().count(), 25);
}

#[test]
fn simulate_dumps_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small();
    c.experiment.dump_format = jumpres_cli::config::DumpFormat::Binary;
    c.experiment.policy = jumpres_cli::config::SimulatePolicy::Lq;
    run(Command::Simulate, &c, dir.path()).unwrap();
    let bytes = std::fs::read(dir.path().join("ensemble.bin")).unwrap();
    let (paths, nodes, _) = jumpres_core::dynamics::read_binary(bytes.as_slice()).unwrap();
    assert_eq!((paths, nodes), (64, 25));
    c.experiment.dump_format = jumpres_cli::config::DumpFormat::Csv;
    run(Command::Simulate, &c, dir.path()).unwrap();
    let rows = csv::Reader::from_path(dir.path().join("ensemble.csv")).unwrap().records().count();
    assert_eq!(rows, 64 * 25);
}

#[test]
fn fit_rule_recovers_synthetic_rule() {
    use jumpres_core::calibration::{simulate_rule, OperationRule};
    let truth = OperationRule { c1: 0.4, c_inflow: 0.25, c_outflow: -0.28, c_volume: -1e-5, r_squared: f64::NAN };
    let n = 400;
    let inflow: Vec<f64> = (0..n).map(|k| 5.0 + 3.0 * (k as f64 / 13.0).sin()).collect();
    let volume: Vec<f64> = (0..n).map(|k| 9000.0 + 400.0 * (k as f64 / 40.0).cos()).collect();
    let q = simulate_rule(&truth, &inflow, &volume, 4.0, 1.0);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("oso.csv");
    let mut text = String::from("timestamp,inflow_m3s,outflow_m3s,volume_m3\n");
    let start = chrono::NaiveDate::from_ymd_opt(2019, 6, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    for k in 0..n {
        let t = start + chrono::Duration::hours(k as i64);
        text += &format!("{},{},{},{}\n", t.format("%Y-%m-%dT%H:%M:%S"), inflow[k], q[k], volume[k] * 3600.0);
    }
    std::fs::write(&path, text).unwrap();
    let mut c = RunConfig::default();
    c.experiment.series = Some(path);
    let out = run(Command::FitRule, &c, dir.path()).unwrap();
    assert!((out.summary["r_squared"].as_f64().unwrap() - 1.0).abs() <= 1e-8);
    assert!((out.summary["cq"].as_f64().unwrap() - truth.c_outflow).abs() <= 1e-8);
    let rows = csv::Reader::from_path(dir.path().join("operation_rule_fit.csv")).unwrap().records().count();
    assert_eq!(rows, n);
}

fn exit_code(args: &[&str]) -> i32 {
    Process::new(BIN).args(args).output().unwrap().status.code().unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(exit_code(&["moments", "--out-dir", d]), 0);
    assert_eq!(exit_code(&["moments", "--out-dir", d, "--override", "numerics.bundles=3"]), 2);
    assert_eq!(exit_code(&["moments", "--out-dir", d, "--override", "model.a=0"]), 3);
    assert_eq!(exit_code(&["moments", "--out-dir", d, "--config", "/nonexistent/config.json"]), 4);
    assert_eq!(exit_code(&["fit-rule", "--out-dir", d, "--override", "experiment.series=\"/nonexistent.csv\""]), 4);
    let no_convergence = [
        "solve-fbsde",
        "--out-dir",
        d,
        "--override",
        "numerics.horizon=24",
        "--override",
        "numerics.paths=64",
        "--override",
        "numerics.max_iter=1",
    ];
    assert_eq!(exit_code(&no_convergence), 3);
}
