use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_excess-cusum"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(out.status.success(), "command failed: {args:?}");
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn simulate(dir: &Path, extra: &[&str]) -> std::path::PathBuf {
    let mut args = vec!["simulate", "--out-dir", p(dir)];
    args.extend_from_slice(extra);
    ok(&args);
    dir.join("patients.csv")
}

#[test]
fn simulate_writes_a_readable_patient_file() {
    let tmp = TempDir::new().unwrap();
    let csv = simulate(tmp.path(), &["--scenario", "in_control", "--lambda-a", "10", "--t-m", "1", "--seed", "1"]);
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "arrival,sex,age_at_entry,entry_year,icd,morphology,stage,surgery,follow_up,status"
    );
    for line in lines {
        let fields: Vec<_> = line.split(',').collect();
        assert_eq!(fields.len(), 10);
        let arrival: f64 = fields[0].parse().unwrap();
        let follow_up: f64 = fields[8].parse().unwrap();
        assert!((0.0..1.0).contains(&arrival));
        assert!(follow_up >= 0.0 && arrival + follow_up <= 1.0 + 1e-9);
        assert!(fields[9] == "event" || fields[9] == "censored");
    }
    assert!(tmp.path().join("manifest.toml").exists());
    // The written file reads back through the monitoring path.
    ok(&[
        "run",
        "--patients",
        p(&csv),
        "--alternative",
        "proportional:0.8",
        "--threshold",
        "4",
        "--out-dir",
        p(tmp.path()),
    ]);
}

#[test]
fn calibration_is_byte_identical_across_runs_and_worker_counts() {
    let tmp = TempDir::new().unwrap();
    let mut outputs = Vec::new();
    for (i, workers) in ["1", "4", "4"].iter().enumerate() {
        let dir = tmp.path().join(format!("c{i}"));
        ok(&[
            "--workers",
            workers,
            "calibrate",
            "--alternative",
            "proportional:0.8",
            "--alpha",
            "0.05",
            "--n",
            "100",
            "--lambda-a",
            "50",
            "--t-m",
            "5",
            "--seed",
            "11",
            "--histogram",
            "--out-dir",
            p(&dir),
        ]);
        outputs.push((
            std::fs::read(dir.join("calibration.toml")).unwrap(),
            std::fs::read(dir.join("statistics.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[1], outputs[2]);
}

#[test]
fn config_file_values_apply_and_flags_override() {
    let tmp = TempDir::new().unwrap();
    std::fs::write(
        tmp.path().join("run.toml"),
        "seed = 5\nlambda_a = 20.0\nt_m = 2.0\n[simulate]\nscenario = \"in_control\"\nout_dir = \"sim\"\n",
    )
    .unwrap();
    let cfg = tmp.path().join("run.toml");
    ok(&["--config", p(&cfg), "simulate"]);
    let a = std::fs::read(tmp.path().join("sim/patients.csv")).unwrap();
    ok(&["--config", p(&cfg), "simulate", "--seed", "6", "--out-dir", p(&tmp.path().join("sim6"))]);
    let b = std::fs::read(tmp.path().join("sim6/patients.csv")).unwrap();
    assert_ne!(a, b);
    ok(&["--config", p(&cfg), "simulate", "--seed", "5", "--out-dir", p(&tmp.path().join("sim5"))]);
    assert_eq!(a, std::fs::read(tmp.path().join("sim5/patients.csv")).unwrap());
}

#[test]
fn missing_status_column_is_reported() {
    let tmp = TempDir::new().unwrap();
    let csv = tmp.path().join("bad.csv");
    std::fs::write(
        &csv,
        "arrival,sex,age_at_entry,entry_year,icd,morphology,stage,surgery,follow_up\n0.1,F,70,2010.1,0,adenocarcinoma,localised,0,1.0\n",
    )
    .unwrap();
    let out = run(&[
        "run",
        "--patients",
        p(&csv),
        "--alternative",
        "proportional:0.8",
        "--threshold",
        "4",
        "--out-dir",
        p(tmp.path()),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("status"));
}

#[test]
fn identity_alternative_never_signals() {
    let tmp = TempDir::new().unwrap();
    let csv = simulate(
        &tmp.path().join("sim"),
        &[
            "--scenario",
            "all_from:0",
            "--alternative",
            "proportional:1.5",
            "--lambda-a",
            "100",
            "--t-m",
            "3",
            "--seed",
            "2",
        ],
    );
    let stdout = ok(&[
        "run",
        "--patients",
        p(&csv),
        "--alternative",
        "proportional:1",
        "--threshold",
        "0.5",
        "--out-dir",
        p(tmp.path()),
    ]);
    assert!(stdout.contains("no signal"));
    let chart = std::fs::read_to_string(tmp.path().join("chart_proportional_1.csv")).unwrap();
    for line in chart.lines().skip(1) {
        let psi: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert_eq!(psi, 0.0);
    }
}

#[test]
fn fit_with_explicit_bands_writes_a_loadable_model() {
    let tmp = TempDir::new().unwrap();
    let csv =
        simulate(&tmp.path().join("sim"), &["--lambda-a", "400", "--t-m", "10", "--origin", "2000", "--seed", "3"]);
    let out = tmp.path().join("fit");
    ok(&["fit", "--patients", p(&csv), "--bands", "0,1,2,3,4,5,10", "--out-dir", p(&out)]);
    let report = std::fs::read_to_string(out.join("fit_report.toml")).unwrap();
    assert!(report.contains("converged = true"));
    assert!(report.contains("[5, 10)"));
    // The fitted model drives a calibration directly.
    ok(&[
        "calibrate",
        "--model",
        p(&out.join("model.toml")),
        "--alternative",
        "proportional:0.9",
        "--alpha",
        "0.1",
        "--n",
        "20",
        "--lambda-a",
        "50",
        "--t-m",
        "2",
        "--out-dir",
        p(&tmp.path().join("cal")),
    ]);
}

#[test]
fn fit_rejects_an_empty_band() {
    let tmp = TempDir::new().unwrap();
    let csv = simulate(&tmp.path().join("sim"), &["--lambda-a", "50", "--t-m", "2", "--seed", "4"]);
    let out = run(&["fit", "--patients", p(&csv), "--bands", "0,1,2,3,4,5,10", "--out-dir", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("[3, 4)"));
}

#[test]
fn rolling_mode_produces_one_report_per_window_pair() {
    let tmp = TempDir::new().unwrap();
    let csv =
        simulate(&tmp.path().join("sim"), &["--lambda-a", "150", "--t-m", "50", "--origin", "1970", "--seed", "7"]);
    let out = tmp.path().join("roll");
    ok(&[
        "run",
        "--rolling",
        "--patients",
        p(&csv),
        "--from",
        "1970",
        "--to",
        "2020",
        "--window",
        "10",
        "--alternative",
        "proportional:0.8",
        "proportional:1.2",
        "--threshold",
        "5",
        "--out-dir",
        p(&out),
    ]);
    let report = std::fs::read_to_string(out.join("report.toml")).unwrap();
    assert_eq!(report.matches("[[periods]]").count(), 4);
    let charts = std::fs::read_dir(&out)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().starts_with("period_"))
        .count();
    assert_eq!(charts, 8);
}

#[test]
fn signal_table_study_at_small_scale() {
    let tmp = TempDir::new().unwrap();
    ok(&["study", "table2", "--scale", "0.01", "--out-dir", p(tmp.path())]);
    let text = std::fs::read_to_string(tmp.path().join("table2.csv")).unwrap();
    // 4 alternatives x 2 levels x 3 scenarios.
    assert_eq!(text.lines().count(), 1 + 24);
}

#[test]
fn bad_arguments_use_the_configuration_exit_code() {
    let tmp = TempDir::new().unwrap();
    let out = run(&[
        "calibrate",
        "--alternative",
        "sideways:2",
        "--alpha",
        "0.05",
        "--lambda-a",
        "10",
        "--t-m",
        "1",
        "--out-dir",
        p(tmp.path()),
    ]);
    assert!(!out.status.success());
    let out = run(&["study", "nope", "--out-dir", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(2));
}
