use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

fn hypr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hypr"))
        .args(args)
        .env_remove("HYPR_WORKERS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn sha256_hex(path: &Path) -> String {
    let bytes = std::fs::read(path).unwrap();
    Sha256::digest(&bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .join(rel)
}

#[test]
fn verify_default_runs_every_suite() {
    let o = hypr(&["verify"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let out = text(&o.stdout);
    assert!(out.contains("in 5 suites"), "{out}");
    assert!(!out.contains("FAIL"));
}

#[test]
fn verify_restricted_matrix() {
    let o = hypr(&[
        "verify",
        "--model",
        "brf",
        "--lambda",
        "1,4,16",
        "--suite",
        "lambda,rtrl",
    ]);
    assert_eq!(code(&o), 0);
    let out = text(&o.stdout);
    let rows: Vec<&str> = out.lines().filter(|l| l.starts_with("lambda")).collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.iter().all(|r| r.contains("brf")));
    assert!(!out.contains("alif"));
}

#[test]
fn verify_catches_injected_fault() {
    let o = hypr(&[
        "verify",
        "--inject-fault",
        "--suite",
        "lambda",
        "--model",
        "alif",
    ]);
    assert_eq!(code(&o), 1);
    assert!(
        text(&o.stderr).contains("relative error"),
        "{}",
        text(&o.stderr)
    );
}

#[test]
fn verify_usage_errors() {
    assert_eq!(code(&hypr(&["verify", "--model", "lstm"])), 2);
    assert_eq!(code(&hypr(&["verify", "--lambda", "0"])), 2);
    assert_eq!(code(&hypr(&["verify", "--tol", "-1"])), 2);
}

#[test]
fn gen_cue_matches_fixture_and_seeds_differ() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.hypr");
    let b = dir.path().join("b.hypr");
    let o = hypr(&[
        "gen",
        "cue",
        "--delay",
        "1000",
        "--seed",
        "7",
        "--out",
        a.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let want = std::fs::read_to_string(repo_file(
        "crates/cli/tests/fixtures/cue_delay1000_seed7.sha256",
    ))
    .unwrap();
    assert_eq!(sha256_hex(&a), want.trim());
    let ds = hypr::container::load_dataset(&a).unwrap();
    assert_eq!((ds.len(), ds.samples[0].t_len), (256, 1040));
    assert_eq!(
        code(&hypr(&[
            "gen",
            "cue",
            "--delay",
            "1000",
            "--seed",
            "8",
            "--out",
            b.to_str().unwrap()
        ])),
        0
    );
    assert_ne!(sha256_hex(&a), sha256_hex(&b));
}

#[test]
fn gen_rejects_negative_delay() {
    assert_eq!(code(&hypr(&["gen", "cue", "--delay", "-1"])), 2);
}

#[test]
fn train_is_deterministic_and_writes_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = repo_file("configs/cue_quick.toml");
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = hypr(&[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    let metrics = std::fs::read_to_string(a.join("cue_quick.metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 4);
    for l in metrics.lines() {
        serde_json::from_str::<serde_json::Value>(l).unwrap();
    }
    assert_eq!(
        sha256_hex(&a.join("cue_quick.metrics.jsonl")),
        sha256_hex(&b.join("cue_quick.metrics.jsonl"))
    );
    assert_eq!(
        sha256_hex(&a.join("cue_quick.ckpt")),
        sha256_hex(&b.join("cue_quick.ckpt"))
    );
    let ck = hypr::container::load_checkpoint::<f64>(&a.join("cue_quick.ckpt")).unwrap();
    assert!(ck.adam.is_some());
}

#[test]
fn train_reports_missing_data_path() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(
        &cfg,
        "[data]\nkind = \"idx\"\nimages = \"missing-images\"\nlabels = \"missing-labels\"\n",
    )
    .unwrap();
    let o = hypr(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(
        text(&o.stderr).contains("missing-images"),
        "{}",
        text(&o.stderr)
    );
}

#[test]
fn train_reports_config_line() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[data]\nkind = \"cue\"\n\n[run]\nlambda = 0\n").unwrap();
    let o = hypr(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("line 5"), "{}", text(&o.stderr));
}

#[test]
fn bench_rows_have_equal_peak_bytes_across_lengths() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.jsonl");
    let o = hypr(&[
        "bench",
        "--T",
        "128,512",
        "--lambda",
        "32",
        "--workers",
        "1,2",
        "--width",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let rows: Vec<serde_json::Value> = std::fs::read_to_string(&out)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 4);
    assert!(rows
        .iter()
        .all(|r| r["schema"] == 1 && r["peak_bytes"] == rows[0]["peak_bytes"]));
    assert!(rows.iter().all(|r| r["speedup"].as_f64().unwrap() > 0.0));
}
