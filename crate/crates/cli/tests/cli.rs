use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn toy(file: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../data/toy")
        .join(file)
}

fn star(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_star"))
        .current_dir(dir)
        .args(args)
        .args(["--log-level", "warn"])
        .output()
        .expect("star binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn summary(out: &Output) -> Value {
    serde_json::from_str(ok(out).lines().last().unwrap()).unwrap()
}

fn corpus_arg() -> String {
    toy("corpus.jsonl").display().to_string()
}

fn queries_arg() -> String {
    toy("queries.jsonl").display().to_string()
}

#[test]
fn ingest_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    let out = star(
        dir.path(),
        &[
            "ingest",
            "--corpus",
            &corpus_arg(),
            "--queries",
            &queries_arg(),
            "--out",
            "merged.jsonl",
        ],
    );
    let stats: Value = serde_json::from_str(ok(&out).trim()).unwrap();
    assert_eq!(stats["tables"], 20);
    assert_eq!(stats["queries"], 40);
    assert_eq!(
        fs::read_to_string(dir.path().join("merged.jsonl"))
            .unwrap()
            .lines()
            .count(),
        20
    );
}

#[test]
fn represent_resumes_without_rebuilding() {
    let dir = tempfile::tempdir().unwrap();
    let args = [
        "represent",
        "--corpus",
        &corpus_arg(),
        "--out",
        "reps.jsonl",
    ];
    let first = summary(&star(dir.path(), &args));
    assert_eq!(
        (first["built"].as_u64(), first["reused"].as_u64()),
        (Some(20), Some(0))
    );
    let second = summary(&star(dir.path(), &args));
    assert_eq!(
        (second["built"].as_u64(), second["reused"].as_u64()),
        (Some(0), Some(20))
    );
    assert_eq!(second["encoder_calls"], 0);

    // an interrupted run leaves a prefix and possibly a torn line
    let path = dir.path().join("reps.jsonl");
    let text = fs::read_to_string(&path).unwrap();
    let mut kept: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
    kept.push_str(&text.lines().nth(5).unwrap()[..40]);
    fs::write(&path, kept).unwrap();
    let third = summary(&star(dir.path(), &args));
    assert_eq!(
        (third["built"].as_u64(), third["reused"].as_u64()),
        (Some(15), Some(5))
    );
    assert_eq!(fs::read_to_string(&path).unwrap(), text);
}

#[test]
fn lambda_change_rebuilds_from_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let run = |lambda: &str| {
        summary(&star(
            dir.path(),
            &[
                "represent",
                "--corpus",
                &corpus_arg(),
                "--out",
                "reps.jsonl",
                "--cache",
                "cache.jsonl",
                "--strategy",
                "fixed",
                "--lambda",
                lambda,
            ],
        ))
    };
    let a = run("0.3");
    assert!(a["encoder_calls"].as_u64().unwrap() > 0);
    let b = run("0.4");
    assert_ne!(a["fingerprint"], b["fingerprint"]);
    assert_eq!(b["built"], 20);
    assert_eq!(b["encoder_calls"], 0);
}

#[test]
fn empty_corpus_is_not_an_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let s = summary(&star(dir.path(), &["represent", "--corpus", "empty.jsonl"]));
    assert_eq!(s["tables"], 0);
}

#[test]
fn search_with_stored_query_finds_its_table() {
    let dir = tempfile::tempdir().unwrap();
    ok(&star(
        dir.path(),
        &[
            "index",
            "--corpus",
            &corpus_arg(),
            "--out",
            "idx.star",
            "--strategy",
            "fixed",
            "--lambda",
            "1",
        ],
    ));
    let archive = fs::read_to_string(dir.path().join("idx.star.reps.jsonl")).unwrap();
    for line in archive.lines().step_by(4) {
        let rep: Value = serde_json::from_str(line).unwrap();
        let query = rep["queries_text"].as_str().unwrap();
        let out = ok(&star(
            dir.path(),
            &["search", "--index", "idx.star", "--top-k", "1", query],
        ));
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 1);
        let hit: Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(hit["table_id"], rep["table_id"]);
        assert_eq!(hit["rank"], 1);
        assert!((hit["score"].as_f64().unwrap() - 1.0).abs() < 1e-5);
    }
    let out = ok(&star(
        dir.path(),
        &[
            "search",
            "--index",
            "idx.star",
            "--top-k",
            "3",
            "volcano eruption",
        ],
    ));
    assert_eq!(out.lines().count(), 3);
}

#[test]
fn usage_and_input_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = star(dir.path(), &["eval", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));

    let out = star(
        dir.path(),
        &[
            "eval",
            "--corpus",
            &corpus_arg(),
            "--queries",
            "missing-queries.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing-queries.jsonl"));

    let out = star(
        dir.path(),
        &[
            "eval",
            "--corpus",
            &corpus_arg(),
            "--queries",
            &queries_arg(),
            "--lambda",
            "1.5",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "fusion": {"strategy": "fixed", "lambda": 0.2},
        "paths": {"corpus": [corpus_arg()], "queries": [queries_arg()]},
    });
    fs::write(dir.path().join("run.json"), config.to_string()).unwrap();
    ok(&star(
        dir.path(),
        &[
            "eval",
            "--config",
            "run.json",
            "--lambda",
            "0.7",
            "--out",
            "eval.json",
        ],
    ));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["variants"][0]["name"], "STAR w/ FWF (lambda=0.7)");
    assert!(dir.path().join("eval.txt").exists());

    fs::write(dir.path().join("bad.json"), r#"{"fusion": {"lamda": 0.2}}"#).unwrap();
    let out = star(dir.path(), &["eval", "--config", "bad.json"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn sweep_and_ablation_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = ["--corpus", &corpus_arg(), "--queries", &queries_arg()];
    ok(&star(
        dir.path(),
        &[&["sweep", "--out", "sweep.json"][..], &data].concat(),
    ));
    ok(&star(
        dir.path(),
        &[&["ablate", "--out", "ablate.json"][..], &data].concat(),
    ));
    let read = |f: &str| -> Value {
        serde_json::from_str(&fs::read_to_string(dir.path().join(f)).unwrap()).unwrap()
    };
    assert_eq!(read("sweep.json")["variants"].as_array().unwrap().len(), 11);
    assert_eq!(read("ablate.json")["variants"].as_array().unwrap().len(), 4);

    ok(&star(
        dir.path(),
        &[
            &[
                "sweep",
                "--out",
                "short.json",
                "--lambdas",
                "0.2,0.6",
                "--no-dwf",
            ][..],
            &data,
        ]
        .concat(),
    ));
    let names: Vec<String> = read("short.json")["variants"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["name"].as_str().unwrap().to_string())
        .collect();
    assert_eq!(
        names,
        [
            "Top-k baseline",
            "STAR w/ FWF (lambda=0.2)",
            "STAR w/ FWF (lambda=0.6)"
        ]
    );
}

#[test]
fn dry_run_remote_config_matches_offline() {
    let dir = tempfile::tempdir().unwrap();
    for api in ["native", "openai"] {
        let config = serde_json::json!({
            "encoder": {"backend": "remote", "endpoint": "https://embed.example.com/v1", "dim": 512},
            "generator": {"backend": "remote", "api": api, "endpoint": "https://llm.example.com/v1", "model": "m"},
            "paths": {"corpus": [corpus_arg()], "queries": [queries_arg()]},
            "dry_run": true,
        });
        fs::write(dir.path().join("remote.json"), config.to_string()).unwrap();
        ok(&star(
            dir.path(),
            &[
                "eval",
                "--config",
                "remote.json",
                "--out",
                "remote-eval.json",
            ],
        ));
        ok(&star(
            dir.path(),
            &[
                "eval",
                "--corpus",
                &corpus_arg(),
                "--queries",
                &queries_arg(),
                "--out",
                "offline-eval.json",
            ],
        ));
        let read = |f: &str| -> Value {
            serde_json::from_str(&fs::read_to_string(dir.path().join(f)).unwrap()).unwrap()
        };
        let (remote, offline) = (read("remote-eval.json"), read("offline-eval.json"));
        assert_eq!(
            remote["variants"][0]["metrics"],
            offline["variants"][0]["metrics"]
        );
        assert_ne!(remote["meta"]["encoder"], offline["meta"]["encoder"]);
    }
}
