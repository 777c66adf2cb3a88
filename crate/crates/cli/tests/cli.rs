use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const ARTIFACTS: [&str; 13] = [
    "dataset.jsonl",
    "embeddings.drec",
    "embeddings.params",
    "index.drix",
    "evidence.jsonl",
    "model.drhd",
    "predictions.jsonl",
    "eval.json",
    "eval.txt",
    "runtime.json",
    "runtime.txt",
    "manifest.json",
    "config.resolved.toml",
];

fn repo(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn derec(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_derec"));
    cmd.args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("DEREC_")) {
        cmd.env_remove(k);
    }
    cmd.envs(env.iter().copied());
    cmd.output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn example() -> String {
    repo("data/example.toml").display().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn run_writes_every_artifact_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("a");
    let out = derec(&["run", "--config", &example(), "--out", s(&out_dir)], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    for name in ARTIFACTS {
        assert!(out_dir.join(name).exists(), "missing {name}");
    }
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("macro") && stdout.contains("Total Runtime"), "{stdout}");
    let preds = fs::read(out_dir.join("predictions.jsonl")).unwrap();

    let again = derec(&["run", "--config", &example(), "--out", s(&out_dir), "--force"], &[]);
    assert_eq!(code(&again), 0, "{}", stderr(&again));
    assert_eq!(fs::read(out_dir.join("predictions.jsonl")).unwrap(), preds);
}

#[test]
fn stage_commands_reproduce_the_one_shot_run() {
    let dir = tempfile::tempdir().unwrap();
    let one_shot = dir.path().join("one");
    let staged = dir.path().join("staged");
    assert_eq!(code(&derec(&["run", "--config", &example(), "--out", s(&one_shot)], &[])), 0);

    let env = [("DEREC_OUT", s(&staged))];
    let cfg = example();
    let stages: [&[&str]; 7] = [
        &["ingest"],
        &["embed"],
        &["index", "build"],
        &["retrieve"],
        &["train"],
        &["predict"],
        &["eval"],
    ];
    for stage in stages {
        let mut args = vec!["--config", cfg.as_str()];
        args.extend_from_slice(stage);
        let out = derec(&args, &env);
        assert_eq!(code(&out), 0, "{stage:?}: {}", stderr(&out));
    }
    for name in ARTIFACTS.iter().filter(|n| !n.starts_with("runtime") && **n != "manifest.json" && **n != "config.resolved.toml") {
        assert_eq!(
            fs::read(one_shot.join(name)).unwrap(),
            fs::read(staged.join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn explicit_path_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n).display().to_string();
    let data = repo("data/synthetic-50.jsonl").display().to_string();
    let steps: Vec<Vec<String>> = vec![
        vec!["ingest".into(), "--input".into(), data, "--scheme".into(), "3".into(), "--out".into(), p("d.jsonl")],
        vec!["embed".into(), "--dataset".into(), p("d.jsonl"), "--dim".into(), "128".into(), "--cache".into(), p("e.drec")],
        vec!["index".into(), "build".into(), "--dataset".into(), p("d.jsonl"), "--store".into(), p("e.drec"), "--out".into(), p("i.drix")],
        vec!["retrieve".into(), "--dataset".into(), p("d.jsonl"), "--store".into(), p("e.drec"), "--k".into(), "5".into(), "--out".into(), p("ev.jsonl")],
        vec!["train".into(), "--dataset".into(), p("d.jsonl"), "--evidence".into(), p("ev.jsonl"), "--store".into(), p("e.drec"), "--epochs".into(), "50".into(), "--out".into(), p("m.drhd")],
        vec!["predict".into(), "--model".into(), p("m.drhd"), "--dataset".into(), p("d.jsonl"), "--evidence".into(), p("ev.jsonl"), "--store".into(), p("e.drec"), "--out".into(), p("preds.jsonl")],
        vec!["eval".into(), "--gold".into(), p("d.jsonl"), "--pred".into(), p("preds.jsonl"), "--out".into(), p("eval.json")],
    ];
    for args in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let out = derec(&args, &[]);
        assert_eq!(code(&out), 0, "{args:?}: {}", stderr(&out));
    }
    let eval: serde_json::Value = serde_json::from_str(&fs::read_to_string(p("eval.json")).unwrap()).unwrap();
    assert_eq!(eval["n"], 15);

    let out = derec(&["index", "search", "--index", &p("i.drix"), "--query-text", "tax budget", "--k", "3", "--dim", "128"], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).lines().filter(|l| !l.trim().is_empty()).count() >= 3);
}

#[test]
fn stats_prints_counts() {
    let fixture = repo("crates/core/tests/fixtures/mini_rawfc").display().to_string();
    let out = derec(&["stats", "--dataset", &fixture, "--scheme", "3"], &[]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for needle in ["16", "half-true"] {
        assert!(stdout.contains(needle), "{stdout}");
    }
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("o");
    let out = derec(&["run", "--config", &example(), "--out", s(&out_dir)], &[("DEREC_K", "0")]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("k must"), "{}", stderr(&out));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "dataset = \"x.jsonl\"\nscheme = 3\nretrieval_k = 4\n").unwrap();
    let out = derec(&["run", "--config", s(&bad)], &[]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("retrieval_k"), "{}", stderr(&out));

    let six_class = repo("crates/core/tests/fixtures/mini_liar").display().to_string();
    let out = derec(&["run", "--config", &example(), "--out", s(&out_dir)], &[("DEREC_DATASET", &six_class)]);
    assert_eq!(code(&out), 1, "{}", stderr(&out));
    assert!(stderr(&out).contains("contradicts"), "{}", stderr(&out));

    assert_eq!(code(&derec(&["retrieve", "--bogus"], &[])), 1);
    assert_eq!(code(&derec(&["--help"], &[])), 0);
}

#[test]
fn unreachable_provider_exits_3() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let endpoint = format!("http://127.0.0.1:{port}/embed");
    let out = derec(
        &["run", "--config", &example(), "--out", s(&dir.path().join("o"))],
        &[("DEREC_EMBEDDER_PROVIDER", &endpoint), ("DEREC_EMBEDDER_RETRIES", "0")],
    );
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(dir.path().join("o/runtime.json").exists());
}

#[test]
fn bench_writes_table_json() {
    let dir = tempfile::tempdir().unwrap();
    let json = dir.path().join("bench.json");
    let out = derec(
        &["bench", "--sizes", "300,600", "--dim", "16", "--queries", "10", "--n-clusters", "4", "--out", s(&json)],
        &[],
    );
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let table: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(table["rows"].as_array().unwrap().len(), 4);
}
