use std::path::Path;
use std::process::{Command, Output};

fn tboa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tboa")).args(args).output().expect("binary runs")
}

fn stderr_report(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stderr).expect("stderr holds a JSON report")
}

const LINEAR: &str = r#"{
  "name": "linear",
  "model": { "kind": "linear", "matrix": [[-1.0, 0.0], [0.0, -3.0]] },
  "objective": { "level": 2 },
  "level_set": { "epsilon": { "value": 0.1 }, "region": { "lo": [-1.0, -1.0], "hi": [1.0, 1.0] } },
  "horizons": [1.0, 2.0, 3.0],
  "starts": { "count": 4 },
  "seed": 3,
  "optimizer": { "keep": 2, "simplex_evals": 100, "polish_evals": 300 },
  "emit": { "span": [-0.5, 2.0], "dt": 0.25 }
}"#;

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_headered_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "linear.json", LINEAR);
    let out = dir.path().join("out");
    let res = tboa(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for f in ["config.json", "sweep.json", "certificates.json", "trajectory_1.csv", "trajectory_3.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = std::fs::read_to_string(out.join("trajectory_2.csv")).unwrap();
    assert!(csv.lines().any(|l| l.starts_with("# time:")));
    assert!(csv.lines().any(|l| l.starts_with("# coordinates:")));
    assert!(csv.lines().any(|l| l == "t,x_1,x_2,speed"), "{csv}");
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 1 + 11);
}

#[test]
fn identical_runs_are_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "linear.json", LINEAR);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        assert!(tboa(&["run", "--config", &cfg, "--out", d.to_str().unwrap()]).status.success());
    }
    for entry in std::fs::read_dir(&a).unwrap() {
        let name = entry.unwrap().file_name();
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap(), "{name:?}");
    }
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "linear.json", LINEAR);
    let out = dir.path().join("out");
    let res = tboa(&["sweep", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "9", "--stiff", "--tol-rel", "1e-7"]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let saved: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(saved["seed"], 9);
    assert_eq!(saved["tolerances"]["method"], "rodas3");
    assert_eq!(saved["tolerances"]["rel"], 1e-7);
    assert_eq!(saved["tolerances"]["abs"], 1e-12);
    assert!(!out.join("trajectory_1.csv").exists());
}

#[test]
fn unknown_keys_exit_with_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.json", &LINEAR.replacen("\"seed\"", "\"sede\"", 1));
    let out = dir.path().join("out");
    let res = tboa(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2));
    let report = stderr_report(&res);
    assert_eq!(report["error"], "config");
    assert!(report["message"].as_str().unwrap().contains("sede"));
    assert!(out.join("error.json").exists());
}

#[test]
fn missing_config_is_a_config_error() {
    let res = tboa(&["run"]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr_report(&res)["error"], "config");
}

fn analytic_arc(dir: &Path) -> String {
    let mut text = String::from("# coordinates: points on y = x/(1+x)\nt,x,y,speed\n");
    for k in 1..=6 {
        let x = k as f64 / 6.0;
        text.push_str(&format!("0,{x},{},0\n", x / (1.0 + x)));
    }
    write(dir, "arc.csv", &text)
}

#[test]
fn certify_accepts_and_refutes_rates_on_the_analytic_curve() {
    let dir = tempfile::tempdir().unwrap();
    let arc = analytic_arc(dir.path());
    let good = dir.path().join("good.json");
    let res = tboa(&[
        "certify", "--preset", "davis_skodje", "--trajectory", &arc, "--nu", "0.9", "--nu-c", "0.1", "--level", "3",
        "--out", good.to_str().unwrap(),
    ]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let cert: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&good).unwrap()).unwrap();
    assert_eq!(cert["passed"], true);
    assert_eq!(cert["bundle"], "oracle");
    assert!(cert["worst_slack"].as_f64().unwrap() >= 0.0);

    let res = tboa(&["certify", "--preset", "davis_skodje", "--trajectory", &arc, "--nu", "1.5", "--nu-c", "0.1", "--level", "3"]);
    assert!(res.status.success());
    let cert: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("attraction_arc.json")).unwrap()).unwrap();
    assert_eq!(cert["passed"], false);
    assert!(cert["worst_slack"].as_f64().unwrap() < 0.0);
}

#[test]
fn certify_rejects_empty_and_mismatched_trajectories() {
    let dir = tempfile::tempdir().unwrap();
    let empty = write(dir.path(), "empty.csv", "");
    let res = tboa(&["certify", "--preset", "davis_skodje", "--trajectory", &empty, "--nu", "0.9", "--nu-c", "0.1"]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr_report(&res)["error"], "schema_mismatch");

    let wrong = write(dir.path(), "wrong.csv", "t,a,b,speed\n0,0.1,0.1,0\n");
    let res = tboa(&["certify", "--preset", "davis_skodje", "--trajectory", &wrong, "--nu", "0.9", "--nu-c", "0.1"]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(stderr_report(&res)["error"], "schema_mismatch");
}

#[test]
fn mech_validate_reports_rates_and_rank() {
    let res = tboa(&["mech-validate", "--temperature", "3000"]);
    assert!(res.status.success());
    let report: serde_json::Value = serde_json::from_slice(&res.stdout).unwrap();
    assert_eq!(report["reactions"].as_array().unwrap().len(), 6);
    assert_eq!(report["conservation_rank"], 2);
    assert_eq!(report["elements"], serde_json::json!(["H", "O"]));
    let k = report["reactions"][4]["k_forward"].as_f64().unwrap();
    assert!((k - 1.57e15).abs() <= 1e-12 * 1.57e15);
}

#[test]
fn mech_validate_names_the_unbalanced_element() {
    let dir = tempfile::tempdir().unwrap();
    let mut mech: serde_json::Value = serde_json::from_str(tboa_core::models::HYDROGEN_MECHANISM).unwrap();
    mech["reactions"][0]["products"] = serde_json::json!({ "H": 1, "O": 1 });
    let path = write(dir.path(), "unbalanced.json", &mech.to_string());
    let res = tboa(&["mech-validate", &path]);
    assert_eq!(res.status.code(), Some(2));
    let report = stderr_report(&res);
    assert_eq!(report["error"], "mechanism_validation");
    assert!(report["details"].as_array().unwrap().iter().any(|d| d.as_str().unwrap().contains('H')), "{report}");
}

#[test]
fn models_lists_builtins_and_presets() {
    let res = tboa(&["models"]);
    assert!(res.status.success());
    let text = String::from_utf8(res.stdout).unwrap();
    for name in ["davis_skodje", "michaelis_menten", "mechanism", "davis_skodje", "michaelis_menten", "hydrogen"] {
        assert!(text.contains(name), "{name}");
    }
}
