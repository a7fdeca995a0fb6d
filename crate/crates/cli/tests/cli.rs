use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use smoothcert::transforms::{write_tensor, ImageTensor, MST1_MAGIC};
use tempfile::TempDir;

fn smoothcert(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_smoothcert"))
        .args(args)
        .env_remove("SMOOTHCERT_SEED")
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(out)))
}

fn schema(name: &str) -> jsonschema::Validator {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(name);
    let value: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::validator_for(&value).unwrap()
}

fn assert_valid(validator: &jsonschema::Validator, instance: &Value) {
    let errors: Vec<String> = validator.iter_errors(instance).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?} in {instance}");
}

fn write(dir: &TempDir, name: &str, contents: &str) -> String {
    let path = dir.path().join(name);
    std::fs::write(&path, contents).unwrap();
    path.to_str().unwrap().to_string()
}

fn write_tensor_file(dir: &TempDir, name: &str, dims: Vec<usize>, data: Vec<f64>) -> String {
    let path = dir.path().join(name);
    write_tensor(&ImageTensor::new(dims, data).unwrap(), &path).unwrap();
    path.to_str().unwrap().to_string()
}

/// MST1 bytes for values outside [0, 1], as linear weights need.
fn write_raw_tensor(dir: &TempDir, name: &str, data: &[f64]) {
    let mut buf = MST1_MAGIC.to_vec();
    buf.extend_from_slice(&1u32.to_le_bytes());
    buf.extend_from_slice(&(data.len() as u32).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(dir.path().join(name), buf).unwrap();
}

#[test]
fn table_csv() {
    let out = smoothcert(&["table"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "pa,pb,gamma1,gamma2,gamma1_full,gamma2_full");
    assert_eq!(lines.len(), 9);
    assert!(lines.contains(&"0.990,0.010,0.12,2.58,0.12041415903149755,2.577567882670337"));
    let row: Vec<&str> = lines.iter().find(|l| l.starts_with("0.800,0.200")).unwrap().split(',').collect();
    assert_eq!(&row[2..4], ["0.57", "1.52"]);
    let row: Vec<&str> = lines.iter().find(|l| l.starts_with("0.600,0.200")).unwrap().split(',').collect();
    let g1: f64 = row[4].parse().unwrap();
    assert!((g1 - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9);
    assert!(!text.contains('\r'));
}

#[test]
fn table_manifest_file_accompanies_csv() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("manifest.json");
    let out = smoothcert(&["table", "--manifest", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(manifest["command"], "table");
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
}

#[test]
fn cert_trivial_pb() {
    let out = smoothcert(&["cert", "--pa", "0.9", "--trivial-pb", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_valid(&schema("run_output.schema.json"), &v);
    let r = &v["result"];
    assert_eq!(r["outcome"], "certified");
    assert_eq!(format!("{:.4}", r["gamma1"].as_f64().unwrap()), "0.3899");
    assert_eq!(format!("{:.4}", r["gamma2"].as_f64().unwrap()), "1.8226");

    let plain = stdout(&smoothcert(&["cert", "--pa", "0.9", "--trivial-pb"]));
    assert!(plain.contains("gamma1 = 0.3899, gamma2 = 1.8226"), "{plain}");
}

#[test]
fn cert_exit_codes() {
    assert_eq!(smoothcert(&["cert", "--pa", "0.4", "--trivial-pb"]).status.code(), Some(2));
    assert_eq!(smoothcert(&["cert", "--pa", "0.9", "--pb", "0.95"]).status.code(), Some(1));
    assert_eq!(smoothcert(&["cert", "--pa", "0.9"]).status.code(), Some(1));
    assert_eq!(smoothcert(&["cert", "--pa", "1.5", "--trivial-pb"]).status.code(), Some(1));
    assert_eq!(smoothcert(&["cert", "--pa", "0.9", "--trivial-pb", "--dist", "nope"]).status.code(), Some(1));
    assert_eq!(smoothcert(&["--help"]).status.code(), Some(0));
}

#[test]
fn cert_inverse_rayleigh_is_reciprocal() {
    let get = |dist: &str| {
        let v = json(&smoothcert(&["cert", "--pa", "0.8", "--pb", "0.1", "--dist", dist, "--json"]));
        (v["result"]["gamma1"].as_f64().unwrap(), v["result"]["gamma2"].as_f64().unwrap())
    };
    let (r1, r2) = get("rayleigh");
    let (i1, i2) = get("inv-rayleigh");
    assert!((i1 - 1.0 / r2).abs() < 1e-9 && (i2 - 1.0 / r1).abs() < 1e-9);
}

fn oracle_fixture(dir: &TempDir) -> (String, String) {
    let input = write_tensor_file(dir, "x.mst1", vec![1], vec![0.5]);
    let classifier = write(dir, "oracle.json", r#"{"kind": "threshold", "threshold": 0.25}"#);
    (input, classifier)
}

#[test]
fn smooth_oracle_with_sweep() {
    let dir = TempDir::new().unwrap();
    let (input, classifier) = oracle_fixture(&dir);
    let args = [
        "smooth", "--input", &input, "--classifier", &classifier, "--n", "100000", "--alpha", "0.001", "--sweep",
        "--step", "0.01",
    ];
    let out = smoothcert(&args);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_valid(&schema("run_output.schema.json"), &v);
    let cert = &v["result"]["prediction"]["certificate"];
    let gamma2 = cert["gamma2"].as_f64().unwrap();
    assert!(gamma2 <= 2.0);
    let right = v["result"]["sweep"]["right"].as_f64().unwrap();
    assert!(gamma2 <= right && right <= 2.0 + 1e-9, "sweep right end {right}");

    let again = json(&smoothcert(&args));
    assert_eq!(v["result"], again["result"], "payload differs between identical runs");
}

#[test]
fn smooth_seed_from_environment() {
    let dir = TempDir::new().unwrap();
    let (input, classifier) = oracle_fixture(&dir);
    let out = Command::new(env!("CARGO_BIN_EXE_smoothcert"))
        .args(["smooth", "--input", &input, "--classifier", &classifier, "--n", "1000"])
        .env("SMOOTHCERT_SEED", "42")
        .output()
        .unwrap();
    let v = json(&out);
    assert_eq!(v["manifest"]["seed"], 42);
    assert_eq!(v["manifest"]["config"]["smoothing"]["seed"], 42);
}

#[test]
fn smooth_errors() {
    let dir = TempDir::new().unwrap();
    let (input, classifier) = oracle_fixture(&dir);
    let missing = dir.path().join("missing.mst1");
    let out = smoothcert(&["smooth", "--input", missing.to_str().unwrap(), "--classifier", &classifier, "--n", "100"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.mst1"));
    let out = smoothcert(&["smooth", "--input", &input, "--classifier", &classifier, "--n", "0"]);
    assert_eq!(out.status.code(), Some(1));
    let bad = write(&dir, "bad.mst1", "not a tensor");
    let out = smoothcert(&["smooth", "--input", &bad, "--classifier", &classifier, "--n", "100"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));
}

#[test]
fn smooth_linear_classifier_manifest() {
    let dir = TempDir::new().unwrap();
    write_raw_tensor(&dir, "w.mst1", &[4.0, -4.0, -4.0, 4.0]);
    write_raw_tensor(&dir, "b.mst1", &[0.0, 0.0]);
    let manifest = r#"{"weights": "w.mst1", "bias": "b.mst1", "classes": 2}"#;
    let manifest_value: Value = serde_json::from_str(manifest).unwrap();
    assert_valid(&schema("classifier_manifest.schema.json"), &manifest_value);
    let classifier = write(&dir, "linear.json", manifest);
    let input = write_tensor_file(&dir, "x.mst1", vec![2], vec![0.9, 0.1]);
    let out = smoothcert(&["smooth", "--input", &input, "--classifier", &classifier, "--n", "2000"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(json(&out)["result"]["prediction"]["label"], serde_json::json!({"class": 0}));
}

fn realistic_fixture(dir: &TempDir, budget: &str) -> Vec<String> {
    let budget_path = write(dir, "budget.json", budget);
    let config = write(dir, "cfg.json", r#"{"n_eps": 20, "n_gamma": 200, "sigma_gauss": 0.25, "alpha": 0.001}"#);
    let input = write_tensor_file(dir, "x.mst1", vec![2], vec![0.3, 0.6]);
    let classifier = write(dir, "c.json", r#"{"kind": "constant", "label": 1}"#);
    for (file, name) in [(&budget_path, "error_budget.schema.json"), (&config, "realistic_config.schema.json")] {
        let v: Value = serde_json::from_str(&std::fs::read_to_string(file).unwrap()).unwrap();
        assert_valid(&schema(name), &v);
    }
    ["realistic", "--budget", &budget_path, "--config", &config, "--input", &input, "--classifier", &classifier]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

#[test]
fn realistic_certifies_inside_interval() {
    let dir = TempDir::new().unwrap();
    let args = realistic_fixture(&dir, r#"{"E": 0.0, "q_E": 0.9, "alpha_E": 0.01, "gamma_interval": [0.71, 1.33]}"#);
    let out = smoothcert(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_valid(&schema("run_output.schema.json"), &v);
    let r = &v["result"];
    assert_eq!(r["rho"], 0.111);
    let (g1, g2) = (r["certificate"]["gamma1"].as_f64().unwrap(), r["certificate"]["gamma2"].as_f64().unwrap());
    assert!(0.71 <= g1 && g2 <= 1.33);
    assert_eq!(v["manifest"]["config"]["sampling"]["seed"], 0);
}

#[test]
fn realistic_infeasible_budget_abstains() {
    let dir = TempDir::new().unwrap();
    let args = realistic_fixture(
        &dir,
        r#"{"E": 0.0, "q_E": 0.9, "alpha_E": 0.01, "rho": 0.6, "gamma_interval": [0.71, 1.33]}"#,
    );
    let out = smoothcert(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(2));
    let r = &json(&out)["result"];
    assert_eq!(r["label"], "abstain");
    assert_eq!(r["abstain_reason"]["reason"], "budget_infeasible");
}

#[test]
fn estimate_error_binary_dataset() {
    let dir = TempDir::new().unwrap();
    for i in 0..50 {
        let data = (0..12).map(|k| ((i + k) % 2) as f64).collect();
        write_tensor_file(&dir, &format!("img{i:03}.mst1"), vec![3, 2, 2], data);
    }
    let d = dir.path().to_str().unwrap();
    let out = smoothcert(&["estimate-error", "--dataset", d, "--gamma-min", "0.71", "--gamma-max", "1.33"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let v = json(&out);
    assert_valid(&schema("run_output.schema.json"), &v);
    assert_eq!(v["result"]["E"], 0.0);
    assert_eq!(v["manifest"]["config"]["files"], 50);
}

#[test]
fn estimate_error_too_few_samples() {
    let dir = TempDir::new().unwrap();
    write_tensor_file(&dir, "one.mst1", vec![1], vec![0.3]);
    let d = dir.path().to_str().unwrap();
    let out = smoothcert(&["estimate-error", "--dataset", d, "--gamma-min", "0.9", "--gamma-max", "1.1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("insufficient samples"));
}

#[test]
fn compare_csv_rows() {
    let out = smoothcert(&["compare"]);
    assert_eq!(out.status.code(), Some(0));
    let text = stdout(&out);
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("distribution,scale,pa,pb,gamma1,gamma2,log_width"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 6 * 4);
    let find = |dist: &str, pa: &str| rows.iter().find(|r| r[0] == dist && r[2] == pa).unwrap().clone();
    let ray = find("rayleigh", "0.9");
    assert_eq!(ray[3], "0.1");
    let (g1, g2): (f64, f64) = (ray[4].parse().unwrap(), ray[5].parse().unwrap());
    assert_eq!((format!("{g1:.2}"), format!("{g2:.2}")), ("0.39".into(), "1.82".into()));
    let gauss = find("log_gaussian", "0.9");
    assert!(gauss[4].parse::<f64>().unwrap() > g1);
}

#[test]
fn compare_custom_grid_json() {
    let out = smoothcert(&["compare", "--dists", "rayleigh,log-uniform", "--pa-grid", "0.6:0.9:0.1", "--json"]);
    assert_eq!(out.status.code(), Some(0));
    let v = json(&out);
    assert_valid(&schema("run_output.schema.json"), &v);
    assert_eq!(v["result"]["rows"].as_array().unwrap().len(), 8);
    assert_eq!(smoothcert(&["compare", "--pa-grid", "0.5,1.2"]).status.code(), Some(1));
}
