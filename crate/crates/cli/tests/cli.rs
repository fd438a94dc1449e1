use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn cafbifpn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cafbifpn"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn write_config(dir: &Path, json: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, json).unwrap();
    path.to_str().unwrap().to_string()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fixture_then_forward_is_deterministic() {
    let tmp = TempDir::new().unwrap();
    let fx = tmp.path().join("fixture");
    let o = cafbifpn(&["gen-fixture", "--seed", "11", "--out", path(&fx)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let manifest: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(manifest["tensors"][0]["dims"], serde_json::json!([16, 64, 64]));

    let cfg = write_config(tmp.path(), r#"{"seed": 4}"#);
    let mut runs = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = cafbifpn(&["forward", "--config", &cfg, "--input", path(&fx), "--output", path(&out)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
        assert_eq!(report["ba_invocations"], 2);
        let dims: Vec<Value> = report["levels"].as_array().unwrap().iter().map(|l| l["dims"].clone()).collect();
        assert_eq!(serde_json::json!(dims), serde_json::json!([[48, 64, 64], [48, 32, 32], [48, 16, 16], [48, 8, 8]]));
        let files: Vec<Vec<u8>> = ["P2O.tnsr", "P3O.tnsr", "P4O.tnsr", "P5O.tnsr", "report.json"]
            .iter()
            .map(|f| fs::read(out.join(f)).unwrap())
            .collect();
        runs.push(files);
    }
    assert!(runs[0] == runs[1], "reruns must be byte-identical");
}

#[test]
fn ablated_forward_skips_attention() {
    let tmp = TempDir::new().unwrap();
    let fx = tmp.path().join("fixture");
    assert_eq!(cafbifpn(&["gen-fixture", "--seed", "1", "--out", path(&fx)]).status.code(), Some(0));
    let cfg = write_config(tmp.path(), r#"{"attention_fusion_enabled": false, "cfe_enabled": false}"#);
    let o = cafbifpn(&["forward", "--config", &cfg, "--input", path(&fx), "--output", path(&tmp.path().join("o"))]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report["ba_invocations"], 0);
    assert_eq!(report["flops"]["qk_logits"], 0);
}

#[test]
fn bad_config_is_a_usage_error() {
    let tmp = TempDir::new().unwrap();
    let fx = tmp.path().join("fixture");
    assert_eq!(cafbifpn(&["gen-fixture", "--seed", "1", "--out", path(&fx)]).status.code(), Some(0));
    for (json, needle) in [
        (r#"{"fusion_width": 50}"#, "fusion_width % 3"),
        (r#"{"topk_k": 5}"#, "topk_k ≤ S²"),
        (r#"{"topdown_source": "output"}"#, "cyclic"),
        (r#"{"not_a_key": 1}"#, "not_a_key"),
    ] {
        let cfg = write_config(tmp.path(), json);
        let o = cafbifpn(&["forward", "--config", &cfg, "--input", path(&fx), "--output", path(&tmp.path().join("o"))]);
        assert_eq!(o.status.code(), Some(2), "{json}");
        assert!(stderr(&o).contains(needle), "{json}: {}", stderr(&o));
        assert!(stdout(&o).is_empty());
    }
}

#[test]
fn broken_inputs_fail_gracefully() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "{}");
    let out = tmp.path().join("o");

    let o = cafbifpn(&["forward", "--config", &cfg, "--input", path(&tmp.path().join("none")), "--output", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("C2"), "{}", stderr(&o));

    let fx = tmp.path().join("fixture");
    assert_eq!(cafbifpn(&["gen-fixture", "--seed", "1", "--out", path(&fx)]).status.code(), Some(0));
    let c4 = fx.join("C4.tnsr");
    let bytes = fs::read(&c4).unwrap();
    fs::write(&c4, &bytes[..bytes.len() - 3]).unwrap();
    let o = cafbifpn(&["forward", "--config", &cfg, "--input", path(&fx), "--output", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("payload length mismatch"), "{}", stderr(&o));
    assert!(!stderr(&o).contains("panicked"));
}

#[test]
fn selfcheck_passes_and_catches_planted_fault() {
    let o = cafbifpn(&["selfcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.lines().filter(|l| l.starts_with("PASS ")).count() >= 19);
    assert!(!text.contains("FAIL"));

    let o = cafbifpn(&["selfcheck", "--inject-fault", "topk-tiebreak"]);
    assert_eq!(o.status.code(), Some(1));
    let failing: Vec<String> = stdout(&o).lines().filter(|l| l.starts_with("FAIL")).map(String::from).collect();
    assert!(failing.iter().any(|l| l.contains("routing.topk_tiebreak")), "{failing:?}");
}

#[test]
fn gradcheck_reports_every_group() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "{}");
    let o = cafbifpn(&["gradcheck", "--config", &cfg, "--seed", "7"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let groups: Vec<&str> = r["groups"].as_array().unwrap().iter().map(|g| g["group"].as_str().unwrap()).collect();
    for want in ["cfe_kernels", "offsets", "ba_projections", "lce", "fusion_weights"] {
        assert!(groups.contains(&want), "{groups:?}");
    }
    for g in r["groups"].as_array().unwrap() {
        assert!(g["max_rel_error"].as_f64().unwrap() <= 1e-5);
        assert!(g["max_abs_gradient"].as_f64().unwrap() > 0.0);
    }

    let o = cafbifpn(&["gradcheck", "--config", &cfg, "--seed", "7", "--engineered-kink"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let first = &r["resamples"][0];
    assert_eq!(first["instance"], "cfe");
    assert!(first["reason"].as_str().unwrap().contains("relu"));
}

#[test]
fn bench_ratios_are_exact() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), r#"{"topk_k": 2, "fusion_width": 12}"#);
    let o = cafbifpn(&["bench", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&stdout(&o)).unwrap();
    let cases = r["cases"].as_array().unwrap();
    let find = |s: u64, k: u64| cases.iter().find(|c| c["s"] == s && c["k"] == k).expect("case swept");
    assert_eq!(find(4, 2)["qk_ratio"], 0.125);
    assert_eq!(find(4, 16)["av_ratio"], 1.0);
    assert!(cases.iter().all(|c| c["runtime_matches_formula"] == true));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(cafbifpn(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cafbifpn(&["gradcheck", "--seed", "x"]).status.code(), Some(2));
}
