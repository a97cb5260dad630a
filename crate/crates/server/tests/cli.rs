mod common;

use std::path::Path;
use std::process::{Command, Output};

fn mimir(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mimir"))
        .current_dir(dir)
        .env_remove("MIMIR_LLM_ENDPOINT")
        .env("RUST_LOG", "off")
        .arg("--registry")
        .arg(common::registry_dir())
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mimir(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(mimir(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(mimir(dir.path(), &["bogus"]).status.code(), Some(1));
    assert_eq!(mimir(dir.path(), &["generate", "dialogue"]).status.code(), Some(1));

    std::fs::write(dir.path().join("t.txt"), "Anatomy\n").unwrap();
    let out = mimir(dir.path(), &["generate", "dialogue", "--topic-file", "t.txt", "--out", "o.jsonl"]);
    assert_eq!(out.status.code(), Some(2));
    let err = stderr(&out);
    assert_eq!(err.matches("MIMIR_LLM_ENDPOINT is not set").count(), 1, "{err}");
    assert_eq!(err.matches("transport failure").count(), 1, "{err}");
}

#[test]
fn datasets_and_topics() {
    let dir = tempfile::tempdir().unwrap();
    let out = mimir(dir.path(), &["datasets", "list", "--query", "med"]);
    assert_eq!(out.status.code(), Some(0));
    let lines: Vec<String> = stdout(&out).lines().map(str::to_owned).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("medmcqa\t"));
    assert!(lines[1].starts_with("medqa\tMedQA\tmedical\tinstruction\t4"), "{}", lines[1]);

    std::fs::write(dir.path().join("topics.txt"), "Anatomy\nCataract surgery\n").unwrap();
    let out = mimir(dir.path(), &["ingest", "topics", "--file", "topics.txt", "--kind", "keyword"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(stdout(&out).trim(), "added 2 of 2 topics");
    assert!(dir.path().join("mimir-data/topics.json").exists());

    std::fs::write(dir.path().join("bad.txt"), "Anatomy\n\n").unwrap();
    let out = mimir(dir.path(), &["ingest", "topics", "--file", "bad.txt", "--kind", "keyword"]);
    assert_eq!(out.status.code(), Some(2));
}

#[cfg(unix)]
#[test]
fn generate_verify_finetune() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let script: Vec<String> = (0..40).map(|i| format!("HALLUCINATED line {i}")).collect();
    std::fs::write(d.join("mock.json"), serde_json::to_vec(&script).unwrap()).unwrap();
    std::fs::write(d.join("topics.txt"), "Anatomy\n").unwrap();

    let out = mimir(
        d,
        &[
            "--mock-script", "mock.json", "generate", "dialogue", "--topics", "all", "--topic-file", "topics.txt",
            "--datasets", "medqa", "--max-samples", "2", "--rounds", "2", "--out", "dialogues.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let text = std::fs::read_to_string(d.join("dialogues.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2);

    let out = mimir(
        d,
        &[
            "--mock-script", "mock.json", "verify", "--in", "dialogues.jsonl", "--out", "report.json", "--turns",
            "4", "--verdicts", "verdicts.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["per_turn"]["2"], 100.0);
    assert_eq!(report["overall"], 100.0);
    assert_eq!(std::fs::read_to_string(d.join("verdicts.jsonl")).unwrap().lines().count(), 2);

    let acting = vec!["Thought: search\nAction: mock_search[dose]"; 4];
    std::fs::write(d.join("react.json"), serde_json::to_vec(&acting).unwrap()).unwrap();
    let out = mimir(
        d,
        &[
            "--mock-script", "react.json", "generate", "trajectory", "--framework", "react", "--tools", "mock_search",
            "--datasets", "medqa", "--max-samples", "1", "--max-steps", "2", "--include-incomplete", "--out",
            "traj.jsonl",
        ],
    );
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    assert_eq!(std::fs::read_to_string(d.join("traj.jsonl")).unwrap().lines().count(), 1);

    std::fs::write(
        d.join("ft.json"),
        serde_json::json!({"base_model": "llama-2-7b", "dataset_path": "dialogues.jsonl", "output_dir": "ckpt"}).to_string(),
    )
    .unwrap();
    let out = mimir(d, &["finetune", "emit", "--config", "ft.json", "--out", "emit"]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let body = std::fs::read_to_string(d.join("emit/train.sh")).unwrap();
    assert!(body.contains("--base-model llama-2-7b"));

    common::write_executable(&d.join("trainer"), "#!/bin/sh\necho training \"$2\"\nexit 3\n");
    let out = Command::new(env!("CARGO_BIN_EXE_mimir"))
        .current_dir(d)
        .env("MIMIR_TRAINER_CMD", d.join("trainer"))
        .env("RUST_LOG", "off")
        .args(["finetune", "launch", "--script", "emit/train.sh"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stdout(&out).contains("training llama-2-7b"), "{}", stdout(&out));

    let out = mimir(d, &["finetune", "emit", "--config", "missing.json", "--out", "x"]);
    assert_eq!(out.status.code(), Some(2));
}
