use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn exe() -> Command {
    Command::new(env!("CARGO_BIN_EXE_psbma"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn run(args: &[&str]) -> Output {
    exe().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["batch", "--help"]).status.code(), Some(0));
    let out = run(&["fit", "--frobnicate"]);
    assert_eq!(out.status.code(), Some(64));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(run(&["no-such-command"]).status.code(), Some(64));
}

#[test]
fn input_errors_exit_1() {
    assert_eq!(run(&["validate", "--input", "/does/not/exist.csv"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "ma_id,study_id,metric,value,se\nA,1,COHEN_D,abc,0.1\n").unwrap();
    let out = run(&["validate", "--input", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
    let out = run(&["fit", "--input", s(&fixture("fit_input.csv")), "--ma", "MA3"]);
    assert_eq!(out.status.code(), Some(1), "MA3 is removed by the filters");
}

#[test]
fn validate_reports_filters() {
    let out = run(&["validate", "--input", s(&fixture("fit_input.csv"))]);
    assert!(out.status.success());
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(r["input_rows"], 13);
    assert_eq!(r["rejected_non_positive_se"], 1);
    assert_eq!(r["ma_too_small"], 1);
    assert_eq!(r["surviving_mas"], 2);
    assert_eq!(r["surviving_estimates"], 10);
}

#[test]
fn convert_single_value() {
    let out = run(&["convert", "--value", "0.5", "--from", "CORRELATION_R", "--to", "COHEN_D", "--format", "json"]);
    assert!(out.status.success());
    let rows: Value = serde_json::from_slice(&out.stdout).unwrap();
    let d = rows[0]["value"].as_f64().unwrap();
    assert!((d - 1.0 / 0.75f64.sqrt()).abs() < 1e-12);
    let out = run(&["convert", "--input", s(&fixture("fit_input.csv")), "--to", "FISHER_Z"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().count(), 1 + 12);
}

#[test]
fn fit_matches_frozen_report() {
    let out = run(&["fit", "--input", s(&fixture("fit_input.csv")), "--ma", "MA1", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_slice(&out.stdout).unwrap();

    // internal consistency of the report
    let models = r["models"].as_array().unwrap();
    let mass = |f: &dyn Fn(&Value) -> bool| -> f64 { models.iter().filter(|m| f(m)).map(|m| m["posterior_prob"].as_f64().unwrap()).sum() };
    assert!((mass(&|_| true) - 1.0).abs() < 1e-10);
    let post_effect = mass(&|m| m["effect"].as_bool().unwrap());
    assert!((post_effect - r["post_effect_adj"].as_f64().unwrap()).abs() < 1e-12);
    let post_psb = mass(&|m| m["bias"]["kind"] != "none");
    assert!((post_psb - r["post_psb"].as_f64().unwrap()).abs() < 1e-12);
    // equal prior odds make the inclusion BF the posterior odds
    let odds = (post_effect / (1.0 - post_effect)).ln();
    assert!((odds - r["bf_effect"]["log"].as_f64().unwrap()).abs() < 1e-9);
    let mu = &r["mu_conditional"];
    assert!(mu["ci_low"].as_f64().unwrap() < mu["mean"].as_f64().unwrap());
    assert!(mu["mean"].as_f64().unwrap() < mu["ci_high"].as_f64().unwrap());

    let frozen: Value = serde_json::from_str(&std::fs::read_to_string(fixture("fit_MA1_seed7.json")).unwrap()).unwrap();
    for key in ["post_effect_adj", "post_effect_unadj", "post_psb", "post_heterogeneity"] {
        assert_eq!(r[key], frozen[key], "{key}");
    }
    assert_eq!(r["mu_conditional"], frozen["mu_conditional"]);
    assert_eq!(r, frozen);
}

#[test]
fn fit_without_ma_needs_single_meta_analysis() {
    let out = run(&["fit", "--input", s(&fixture("fit_input.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn batch_summarize_and_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let b = dir.path().join("batch");
    let out = run(&["batch", "--input", s(&fixture("fit_input.csv")), "--seed", "3", "--jobs", "2", "--out-dir", s(&b)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(b.join("measures.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2, "one row per surviving meta-analysis");
    assert_eq!(std::fs::read_to_string(b.join("fits.jsonl")).unwrap().lines().count(), 2);
    let m: Value = serde_json::from_slice(&std::fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "batch");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(!m["warnings"].as_array().unwrap().is_empty(), "filter removals are reported");

    let again = dir.path().join("again");
    assert!(run(&["batch", "--input", s(&fixture("fit_input.csv")), "--seed", "3", "--jobs", "1", "--out-dir", s(&again)]).status.success());
    assert_eq!(csv, std::fs::read_to_string(again.join("measures.csv")).unwrap());

    let sdir = dir.path().join("summary");
    let out = run(&["summarize", "--input", s(&b.join("measures.csv")), "--out-dir", s(&sdir), "--format", "csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["field_summary.csv", "kbins_seif.csv", "violins.json", "manifest.json"] {
        assert!(sdir.join(f).exists(), "{f}");
    }
    let manifests = std::fs::read_dir(&sdir).unwrap().filter(|e| e.as_ref().unwrap().file_name() == "manifest.json").count();
    assert_eq!(manifests, 1);
}

#[test]
fn simulate_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sim.toml");
    std::fs::write(&cfg, "true_mu = 0.1\nn_mas = 3\nseed = 5\n").unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run(&["simulate", "--config", s(&cfg), "--out-dir", s(&a)]).status.success());
    assert!(run(&["simulate", "--config", s(&cfg), "--out-dir", s(&b)]).status.success());
    for f in ["corpus.csv", "truth.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let c = dir.path().join("c");
    assert!(run(&["simulate", "--config", s(&cfg), "--seed", "6", "--out-dir", s(&c)]).status.success());
    assert_ne!(std::fs::read(a.join("corpus.csv")).unwrap(), std::fs::read(c.join("corpus.csv")).unwrap());
    std::fs::write(&cfg, "true_mu = 0.1\nbogus = 1\n").unwrap();
    assert_eq!(run(&["simulate", "--config", s(&cfg), "--out-dir", s(&c)]).status.code(), Some(1));
}

#[test]
fn config_overrides_are_applied() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[integration]\nquadrature_nodes = 4\n").unwrap();
    let out = run(&["fit", "--input", s(&fixture("fit_input.csv")), "--ma", "MA1", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(1), "too few nodes is rejected");
}
