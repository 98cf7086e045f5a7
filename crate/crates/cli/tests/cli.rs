use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use headshare_core::report::memory_report_for_counts;
use headshare_core::sharing::SharePlan;
use headshare_core::store::load_store;
use serde_json::Value;

fn headshare(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_headshare"))
        .current_dir(dir)
        .args(args)
        .env_remove("HEADSHARE_THREADS")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = headshare(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn ratio_zero_share_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-toy", "--out", "m.hws"]);
    ok(d, &["share", "--model", "m.hws", "--ratio", "0.0", "--out", "o.hws"]);
    assert_eq!(fs::read(d.join("m.hws")).unwrap(), fs::read(d.join("o.hws")).unwrap());
    let plan: SharePlan = serde_json::from_str(&fs::read_to_string(d.join("o.plan.json")).unwrap()).unwrap();
    assert!(plan.pairs.is_empty());
}

#[test]
fn ratio_out_of_range_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-toy", "--out", "m.hws"]);
    let out = headshare(d, &["share", "--model", "m.hws", "--ratio", "1.5", "--out", "o.hws"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error: AlphaOutOfRange:"), "{err}");
    assert!(!d.join("o.hws").exists());

    let out = headshare(d, &["share", "--model", "m.hws", "--out", "o.hws"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error: UsageError:"));
}

#[test]
fn domain_errors_exit_one_with_the_error_name() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-toy", "--out", "m.hws"]);
    fs::write(
        d.join("bad.plan.json"),
        r#"{"pairs":[{"keep":{"layer":2,"head":0},"replace":{"layer":1,"head":0}}],"ratio":0.2,"match_function":"qk"}"#,
    )
    .unwrap();
    let out = headshare(d, &["share", "--model", "m.hws", "--plan", "bad.plan.json", "--out", "o.hws"]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: PlanConfigMismatch:"), "{err}");

    fs::write(d.join("junk.hws"), b"HWS0........").unwrap();
    let out = headshare(d, &["analyze", "--model", "junk.hws", "--out", "s.csv"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: MagicMismatch:"), "{}", stderr(&out));
}

#[test]
fn toy_pipeline_report_matches_formula() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "7", "gen-toy", "--out", "toy.hws"]);
    ok(d, &["analyze", "--model", "toy.hws", "--out", "scores.csv"]);
    ok(d, &["share", "--model", "toy.hws", "--ratio", "0.3", "--out", "tied.hws"]);
    let table = ok(d, &["report", "--model", "toy.hws", "--plan", "tied.plan.json", "--out", "report.json"]);
    assert!(table.contains("ratio"));

    let scores = fs::read_to_string(d.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().next(), Some("layer_i,head_i,layer_j,head_j,score"));
    // 6 heads -> 15 unordered pairs.
    assert_eq!(scores.lines().count(), 16);

    let store = load_store(d.join("toy.hws")).unwrap();
    let cfg = store.require_config().unwrap();
    let total: u64 = store.iter().map(|(_, t)| t.len() as u64).sum();
    let n = (0.3 * cfg.total_heads() as f64).round() as u64;
    let per_head = (cfg.embed_dim * (cfg.head_dim_q + cfg.head_dim_k + cfg.head_dim_v) + cfg.head_dim_v * cfg.embed_dim) as u64;
    let want = (total - n * per_head) as f64 / total as f64;
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["ratio_vs_base"].as_f64().unwrap(), want);
    assert_eq!(
        report["ratio_vs_base"].as_f64().unwrap(),
        memory_report_for_counts(&cfg, n as usize, 0, total).unwrap().ratio_vs_base
    );
}

#[test]
fn every_run_writes_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "3", "gen-toy", "--out", "toy.hws", "--sequences", "6", "--seq-len", "5"]);
    ok(d, &["share", "--model", "toy.hws", "--ratio", "0.5", "--out", "tied.hws"]);
    ok(d, &["trace", "--model", "toy.hws", "--inputs", "toy.corpus.txt", "--out", "trace.csv"]);
    ok(d, &["heatmap", "--model", "toy.hws", "--inputs", "toy.corpus.txt", "--out", "heat"]);
    ok(d, &["--seed", "4", "postshare", "--model", "toy.hws", "--corpus", "toy.corpus.txt", "--ratio", "0.5", "--steps", "4", "--batch-size", "2", "--checkpoint-every", "2", "--out", "ps.hws"]);
    for m in ["toy", "tied", "trace", "heat", "ps"] {
        let v: Value = serde_json::from_str(&fs::read_to_string(d.join(format!("{m}.manifest.json"))).unwrap()).unwrap();
        assert_eq!(v["config_hash"].as_str().unwrap().len(), 64, "{m}");
        assert!(v["version"].is_string());
        assert!(v.get("threads").is_none());
    }
    let gen: Value = serde_json::from_str(&fs::read_to_string(d.join("toy.manifest.json")).unwrap()).unwrap();
    assert_eq!(gen["seed"], 3);
    assert_eq!(gen["command"], "gen-toy");
    let ps: Value = serde_json::from_str(&fs::read_to_string(d.join("ps.manifest.json")).unwrap()).unwrap();
    assert_eq!(ps["inputs"].as_array().unwrap().len(), 2);
    assert!(d.join("ps.step2.hws").exists() && d.join("ps.step4.hws").exists());
    let loss = fs::read_to_string(d.join("ps.loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("step,task,reg,total"));
    assert_eq!(loss.lines().count(), 5);
    let trace = fs::read_to_string(d.join("trace.csv")).unwrap();
    // 6 sequences x 6 heads x 5 x 5 entries.
    assert_eq!(trace.lines().count(), 1 + 6 * 6 * 25);
}

#[test]
fn thread_flag_and_env_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-toy", "--out", "toy.hws"]);
    ok(d, &["--threads", "1", "heatmap", "--model", "toy.hws", "--inputs", "toy.corpus.txt", "--out", "a"]);
    let out = Command::new(env!("CARGO_BIN_EXE_headshare"))
        .current_dir(d)
        .args(["heatmap", "--model", "toy.hws", "--inputs", "toy.corpus.txt", "--out", "b"])
        .env("HEADSHARE_THREADS", "8")
        .output()
        .unwrap();
    assert!(out.status.success());
    for suffix in ["layers.csv", "heads.csv"] {
        assert_eq!(fs::read(d.join(format!("a.{suffix}"))).unwrap(), fs::read(d.join(format!("b.{suffix}"))).unwrap());
    }
    let out = headshare(d, &["--threads", "0", "heatmap", "--model", "toy.hws", "--inputs", "toy.corpus.txt", "--out", "c"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn degree_on_planted_toy() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["--seed", "2", "gen-toy", "--out", "p.hws", "--plant", "0.1:1.0", "--plant", "0.0:2.1"]);
    let line = ok(d, &["degree", "--model", "p.hws", "--inputs", "p.corpus.txt", "--ratio", "0.33", "--out", "deg.csv"]);
    assert!(line.contains("overlap_ratio=1"), "{line}");
    let report: Value = serde_json::from_str(&fs::read_to_string(d.join("deg.json")).unwrap()).unwrap();
    assert_eq!(report["k"], 2);
    assert_eq!(report["overlap_ratio"], 1.0);
}
