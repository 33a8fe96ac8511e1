use std::path::Path;
use std::process::{Command, Output};

fn cslim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cslim")).args(args).output().unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    std::fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn simulate_then_fit_every_estimator() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sim");
    ok(&cslim(&["simulate", "--tf", "30", "--burn-in", "1", "--seed", "4", "--out", s(&out)]));
    let path = out.join("path.csv");
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("t,x1\n"));
    assert_eq!(text.lines().count(), 1 + 30 * 100 + 1);
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("system.json")).unwrap()).unwrap();
    assert_eq!(meta["seed"], 4);

    let fitted = dir.path().join("fit");
    ok(&cslim(&["fit", "--input", s(&path), "--out", s(&fitted)]));
    for est in ["lim", "cslim", "ecslim", "lcslim"] {
        let json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(fitted.join(format!("model_{est}.json"))).unwrap()).unwrap();
        assert_eq!(json["estimator"], est);
        let csv = std::fs::read_to_string(fitted.join(format!("model_{est}.csv"))).unwrap();
        assert!(csv.starts_with("t,i,j,A_ij,Q_ij"));
    }

    // same seed, same bytes
    let again = dir.path().join("sim2");
    ok(&cslim(&["simulate", "--tf", "30", "--burn-in", "1", "--seed", "4", "--out", s(&again)]));
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(again.join("path.csv")).unwrap());
}

#[test]
fn multivariate_simulation_writes_all_components() {
    let dir = tempfile::tempdir().unwrap();
    ok(&cslim(&["simulate", "--dim", "3", "--tf", "5", "--burn-in", "1", "--out", s(dir.path())]));
    let text = std::fs::read_to_string(dir.path().join("path.csv")).unwrap();
    assert!(text.starts_with("t,x1,x2,x3\n"));
}

#[test]
fn configuration_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = small_config(dir.path(), r#"{"intervals": 7}"#);
    let out = cslim(&["oned", "--config", &bad, "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let unknown = small_config(dir.path(), r#"{"no_such_field": 1}"#);
    assert_eq!(cslim(&["oned", "--config", &unknown]).status.code(), Some(2));
    assert_eq!(cslim(&["oned", "--config", "/nonexistent.json"]).status.code(), Some(2));
    assert_eq!(cslim(&["enso", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(cslim(&["bogus"]).status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = cslim(&["enso", "--data", "/nonexistent/nino34.csv", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    let gap = dir.path().join("gap.csv");
    std::fs::write(&gap, "year,month,value\n1900,1,26.0\n1900,3,26.5\n").unwrap();
    let out = cslim(&["enso", "--data", s(&gap), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("1900-02"));
}

#[test]
fn experiment_reports_are_reproducible_and_feed_plotdata() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#"{"tf_list": [20], "burn_in_periods": 1}"#);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&cslim(&["oned", "--config", &cfg, "--trials", "3", "--seed", "11", "--out", s(out)]));
    }
    let report = std::fs::read(a.join("report.json")).unwrap();
    assert_eq!(report, std::fs::read(b.join("report.json")).unwrap());
    assert!(a.join("timing.json").is_file());

    let plots = dir.path().join("plots");
    ok(&cslim(&["plotdata", "--report", s(&a.join("report.json")), "--out", s(&plots)]));
    for f in ["curves.csv", "boxes.csv", "phases.csv"] {
        assert!(plots.join(f).is_file(), "{f}");
    }
    let out = cslim(&["plotdata", "--report", s(&a.join("report.json")), "--kind", "pie", "--out", s(&plots)]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn nd_and_convergence_run_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), r#"{"tf_list": [20], "burn_in_periods": 1}"#);
    ok(&cslim(&["nd", "--dims", "1,2", "--config", &cfg, "--trials", "2", "--out", s(&dir.path().join("nd"))]));
    ok(&cslim(&["convergence", "--config", &cfg, "--trials", "2", "--out", s(&dir.path().join("cv"))]));
    let text = std::fs::read_to_string(dir.path().join("cv/report.json")).unwrap();
    assert!(text.contains("ecslim_vs_lcslim.diff_A"));
}

#[test]
fn synthetic_enso_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = cslim(&[
        "enso",
        "--synthetic",
        "--members",
        "8",
        "--polarity",
        "signed",
        "--seed",
        "3",
        "--out",
        s(dir.path()),
    ]);
    ok(&out);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("enso_report.json")).unwrap()).unwrap();
    assert_eq!(report["source"], "synthetic");
    assert_eq!(report["config"]["polarity"], "signed");
    assert_eq!(report["models"].as_array().unwrap().len(), 2);
    assert!(dir.path().join("plot_models.csv").is_file());
}
