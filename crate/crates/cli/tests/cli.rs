use std::path::Path;
use std::process::{Command, Output};

fn hdg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hdg"))
        .args(args)
        .env_remove("HDG_CACHE_DIR")
        .output()
        .expect("run hdg")
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn validate_quick_passes() {
    let out = hdg(&["validate", "--quick", "--log-level", "warn"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let checks: Vec<serde_json::Value> = text.lines().skip(1).map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(checks.len() >= 9);
    assert!(checks.iter().all(|c| c["passed"] == true));
}

#[test]
fn rg_flow_emits_one_record_per_level() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("flow.jsonl");
    let status = hdg(&["rg-flow", "--b", "2", "--beta-ratio", "0.5", "--levels", "40", "--out", out.to_str().unwrap()]);
    assert!(status.status.success());
    let l = lines(&out);
    assert_eq!(l.len(), 41);
    let header: serde_json::Value = serde_json::from_str(&l[0]).unwrap();
    assert_eq!(header["kind"], "header");
    let r: Vec<f64> = l[1..]
        .iter()
        .map(|s| serde_json::from_str::<serde_json::Value>(s).unwrap()["R_k"].as_f64().unwrap())
        .collect();
    assert!(r[1..].windows(2).all(|w| w[1] < w[0]));
    assert!(dir.path().join("flow.jsonl.manifest.json").exists());
}

#[test]
fn sample_output_is_reproducible_across_workers() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        let o = hdg(&[
            "sample", "--model", "dg", "--b", "2", "--beta", "14", "--depth", "5,6", "--reps", "300", "--seed", "9",
            "--workers", workers, "--out", out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        std::fs::read(out).unwrap()
    };
    let a = run("a.jsonl", "1");
    assert_eq!(a, run("b.jsonl", "1"));
    assert_eq!(a, run("c.jsonl", "3"));
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 601);
}

#[test]
fn csv_and_subseq() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("subseq.csv");
    let o = hdg(&[
        "subseq", "--b", "2", "--beta", "1", "--s", "0.3", "--tol", "0.05", "--range", "10:200", "--format", "csv",
        "--out", out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let l = lines(&out);
    assert!(l[0].starts_with("# "));
    assert!(l[1].split(',').any(|c| c == "frac"));
    assert!(l.len() >= 2 + 5);
}

#[test]
fn bad_arguments_exit_with_two() {
    assert_eq!(hdg(&["rg-flow", "--b", "2", "--levels", "4"]).status.code(), Some(2));
    assert_eq!(
        hdg(&["rg-flow", "--b", "2", "--beta", "1", "--beta-ratio", "0.5", "--levels", "4"]).status.code(),
        Some(2)
    );
    assert_eq!(hdg(&["subseq", "--b", "2", "--beta", "1", "--s", "0.3", "--tol", "0.1", "--range", "5"]).status.code(), Some(2));
    assert_eq!(hdg(&["rg-flow", "--b", "1", "--beta", "1", "--levels", "4"]).status.code(), Some(2));
}

#[test]
fn critical_coupling_is_refused() {
    let o = hdg(&["couple", "--b", "2", "--beta-ratio", "1.0", "--depth", "4", "--reps", "10"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error"));
}
