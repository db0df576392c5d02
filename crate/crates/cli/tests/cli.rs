use std::path::Path;
use std::process::{Command, Output};

use effpolicy::simlab::{benchmark_dgp, benchmark_study, run_dgp};

fn effpolicy(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_effpolicy")).args(args).current_dir(dir).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn with_data(n: usize) -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    run_dgp(&benchmark_dgp(), n, 1).unwrap().data.write_csv(tmp.path().join("d.csv")).unwrap();
    tmp
}

const POLICY: &str = r#"{"features":["x1"],"intercept":false,"offsets":[0.5]}"#;

#[test]
fn learn_writes_estimate_and_assignments() {
    let tmp = with_data(400);
    let dir = tmp.path();
    let out = effpolicy(&["learn", "--data", "d.csv", "--estimator", "ep", "--policy", POLICY, "--out", "o"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let est = json(&dir.join("o/estimate.json"));
    assert_eq!(est["theta_hat"].as_array().unwrap().len(), 1);
    let rows = std::fs::read_to_string(dir.join("o/assignments.csv")).unwrap();
    assert_eq!(rows.lines().next().unwrap(), "row,p_0,p_1");
    assert_eq!(rows.lines().count(), 401);
    assert!(dir.join("o/manifest.json").exists());
}

#[test]
fn exit_codes_follow_error_class() {
    let tmp = with_data(300);
    let dir = tmp.path();
    // unknown estimator
    assert_eq!(code(&effpolicy(&["learn", "--data", "d.csv", "--estimator", "ols", "--policy", POLICY], dir)), 2);
    // unknown policy field
    let bad = r#"{"features":["x1"],"slope":1}"#;
    let out = effpolicy(&["learn", "--data", "d.csv", "--estimator", "ep", "--policy", bad], dir);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("slope"));
    // missing data file and missing column
    assert_eq!(code(&effpolicy(&["weights", "--data", "nope.csv"], dir)), 3);
    assert_eq!(code(&effpolicy(&["weights", "--data", "d.csv", "--y", "outcome"], dir)), 3);
    // dual stopped before the tolerance
    let out = effpolicy(&["weights", "--data", "d.csv", "--max-iter", "1", "--out", "w"], dir);
    assert_eq!(code(&out), 4);
    assert_eq!(json(&dir.join("w/weights.json"))["converged"], false);
}

#[test]
fn replay_reproduces_and_rejects_changed_data() {
    let tmp = with_data(300);
    let dir = tmp.path();
    assert_eq!(code(&effpolicy(&["weights", "--data", "d.csv", "--out", "a"], dir)), 0);
    assert_eq!(code(&effpolicy(&["replay", "--manifest", "a/manifest.json", "--out", "b"], dir)), 0);
    for f in ["weights.json", "weights.csv", "iterations.csv", "manifest.json"] {
        assert_eq!(std::fs::read(dir.join("a").join(f)).unwrap(), std::fs::read(dir.join("b").join(f)).unwrap(), "{f}");
    }
    run_dgp(&benchmark_dgp(), 300, 2).unwrap().data.write_csv(dir.join("d.csv")).unwrap();
    assert_eq!(code(&effpolicy(&["replay", "--manifest", "a/manifest.json", "--out", "c"], dir)), 3);
}

#[test]
fn simulate_fills_every_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let mut study = benchmark_study(vec![200, 300], 3, 100_000, 5);
    study.optimizer.restarts = 2;
    study.oracle_optimizer = Some(effpolicy::optim::MaximizeOptions { restarts: 2, ..Default::default() });
    std::fs::write(dir.join("study.json"), serde_json::to_string(&study).unwrap()).unwrap();
    let out = effpolicy(&["simulate", "--study", "study.json", "--out", "s"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.join("s/report.json"));
    let cells = report["cells"].as_array().unwrap();
    assert_eq!(cells.len(), 6);
    for c in cells {
        assert_eq!(c["draws"].as_array().unwrap().len(), 3);
        assert!(c["mean_regret"].as_f64().unwrap() >= 0.0);
    }
    let draws = std::fs::read_to_string(dir.join("s/regret_draws.csv")).unwrap();
    assert_eq!(draws.lines().count(), 1 + 18);
    assert!(dir.join("s/histogram.csv").exists());
}
