use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/selftest")
}

fn gg(cwd: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gg"));
    cmd.current_dir(cwd).args(args);
    for var in ["GG_BASE_URL", "GG_EMBED_BASE_URL", "GG_MODEL", "GG_K", "GG_QUERIES", "GG_WORKERS", "GG_API_KEY"] {
        cmd.env_remove(var);
    }
    cmd.output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[track_caller]
fn assert_exit(o: &Output, code: i32) {
    assert_eq!(o.status.code(), Some(code), "stdout:\n{}\nstderr:\n{}", stdout(o), stderr(o));
}

/// A scratch copy of the fixture inputs with the fixture config.
fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    for f in ["config.toml", "corpus.jsonl", "notes.jsonl", "transcript.jsonl"] {
        std::fs::copy(fixture_dir().join(f), dir.path().join(f)).unwrap();
    }
    dir
}

fn ingest_and_index(dir: &Path) {
    assert_exit(&gg(dir, &["--config", "config.toml", "ingest", "corpus.jsonl", "--out", "chunks.jsonl"]), 0);
    assert_exit(&gg(dir, &["--config", "config.toml", "index", "chunks.jsonl", "--out", "index.ggix"]), 0);
}

fn eval_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "--config",
        "config.toml",
        "eval",
        "notes.jsonl",
        "--index",
        "index.ggix",
        "--chunks",
        "chunks.jsonl",
        "--out",
        "runs",
        "--run-id",
        "r1",
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn full_workflow_reproduces_golden_table() {
    let ws = workspace();
    let dir = ws.path();
    ingest_and_index(dir);
    let eval = gg(dir, &eval_args(&[]));
    assert_exit(&eval, 0);
    assert!(stdout(&eval).contains("evaluated 2 notes"));

    let golden_table = std::fs::read_to_string(fixture_dir().join("golden/table.csv")).unwrap();
    assert_eq!(std::fs::read_to_string(dir.join("runs/r1/table.csv")).unwrap(), golden_table);
    for f in ["fm-001.json", "fm-001.dot", "pulm-002.json", "pulm-002.dot"] {
        assert!(dir.join("runs/r1/notes").join(f).is_file(), "{f} missing");
    }

    let csv = gg(dir, &["report", "runs/r1", "--format", "csv"]);
    assert_exit(&csv, 0);
    assert_eq!(stdout(&csv), golden_table);
    let text = gg(dir, &["report", "runs/r1"]);
    assert_exit(&text, 0);
    assert!(stdout(&text).lines().any(|l| l.starts_with("Family Medicine") && l.ends_with("0.67")));
}

#[test]
fn reindexing_is_byte_identical() {
    let ws = workspace();
    let dir = ws.path();
    ingest_and_index(dir);
    let first = std::fs::read(dir.join("index.ggix")).unwrap();
    assert_exit(&gg(dir, &["--config", "config.toml", "index", "chunks.jsonl", "--out", "again.ggix"]), 0);
    assert_eq!(std::fs::read(dir.join("again.ggix")).unwrap(), first);
}

#[test]
fn existing_outputs_need_force() {
    let ws = workspace();
    let dir = ws.path();
    ingest_and_index(dir);
    let again = gg(dir, &["--config", "config.toml", "ingest", "corpus.jsonl", "--out", "chunks.jsonl"]);
    assert_exit(&again, 2);
    assert!(stderr(&again).contains("--force"));
    assert_exit(&gg(dir, &["--config", "config.toml", "ingest", "corpus.jsonl", "--out", "chunks.jsonl", "--force"]), 0);
    assert_exit(&gg(dir, &["--config", "config.toml", "index", "chunks.jsonl", "--out", "index.ggix"]), 2);

    assert_exit(&gg(dir, &eval_args(&[])), 0);
    assert_exit(&gg(dir, &eval_args(&[])), 2);
    assert_exit(&gg(dir, &eval_args(&["--force"])), 0);
}

#[test]
fn strict_ingest_names_the_bad_line() {
    let ws = workspace();
    let dir = ws.path();
    let mut corpus = std::fs::read_to_string(dir.join("corpus.jsonl")).unwrap();
    let lines = corpus.lines().count();
    corpus.push_str("{\"id\": \"broken\", \"source\": \n");
    std::fs::write(dir.join("bad.jsonl"), &corpus).unwrap();

    let strict = gg(dir, &["ingest", "bad.jsonl", "--out", "chunks.jsonl", "--strict"]);
    assert_exit(&strict, 3);
    assert!(stderr(&strict).contains(&format!("line {}", lines + 1)), "{}", stderr(&strict));
    assert!(!dir.join("chunks.jsonl").exists());

    let lenient = gg(dir, &["ingest", "bad.jsonl", "--out", "chunks.jsonl"]);
    assert_exit(&lenient, 0);
    assert!(stdout(&lenient).contains("(1 skipped)"));
}

#[test]
fn empty_corpus_is_a_data_error() {
    let ws = workspace();
    let dir = ws.path();
    std::fs::write(dir.join("empty.jsonl"), "").unwrap();
    let o = gg(dir, &["ingest", "empty.jsonl", "--out", "chunks.jsonl"]);
    assert_exit(&o, 3);
    assert!(!dir.join("chunks.jsonl").exists());
}

#[test]
fn missing_index_fails_before_any_model_call() {
    let ws = workspace();
    let dir = ws.path();
    assert_exit(&gg(dir, &["--config", "config.toml", "ingest", "corpus.jsonl", "--out", "chunks.jsonl"]), 0);
    // An empty transcript would fail on the first model call with exit 1.
    std::fs::write(dir.join("transcript.jsonl"), "").unwrap();
    let o = gg(dir, &eval_args(&[]));
    assert_exit(&o, 3);
    assert!(stderr(&o).contains("index.ggix"), "{}", stderr(&o));
    assert!(!dir.join("runs").exists());
}

#[test]
fn mock_backend_rejects_parallel_workers() {
    let ws = workspace();
    let dir = ws.path();
    ingest_and_index(dir);
    let o = gg(dir, &eval_args(&["--workers", "2"]));
    assert_exit(&o, 2);
    assert!(!dir.join("runs/r1").exists());
}

#[test]
fn conflicting_query_flags_are_a_usage_error() {
    let ws = workspace();
    let o = gg(ws.path(), &eval_args(&["--queries", "3", "--per-diagnosis"]));
    assert_exit(&o, 2);
}

#[test]
fn selftest_passes_on_bundled_fixture() {
    let ws = tempfile::tempdir().unwrap();
    let o = gg(ws.path(), &["selftest"]);
    assert_exit(&o, 0);
    assert!(stdout(&o).contains("selftest passed: 6 golden files match"));
}

#[test]
fn selftest_reports_tampered_golden() {
    let ws = tempfile::tempdir().unwrap();
    let fixtures = ws.path().join("fixtures");
    for entry in ["config.toml", "corpus.jsonl", "notes.jsonl", "transcript.jsonl"] {
        std::fs::create_dir_all(&fixtures).unwrap();
        std::fs::copy(fixture_dir().join(entry), fixtures.join(entry)).unwrap();
    }
    let golden = fixtures.join("golden");
    std::fs::create_dir_all(golden.join("notes")).unwrap();
    for f in ["table.csv", "run.json", "notes/fm-001.json", "notes/fm-001.dot", "notes/pulm-002.json", "notes/pulm-002.dot"] {
        std::fs::copy(fixture_dir().join("golden").join(f), golden.join(f)).unwrap();
    }
    let table = std::fs::read_to_string(golden.join("table.csv")).unwrap();
    std::fs::write(golden.join("table.csv"), table.replace("0.67", "0.68")).unwrap();

    let o = gg(ws.path(), &["selftest", "--fixtures", fixtures.to_str().unwrap()]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("table.csv"), "{}", stderr(&o));
}

#[test]
fn selftest_without_fixture_fails() {
    let ws = tempfile::tempdir().unwrap();
    let o = gg(ws.path(), &["selftest", "--fixtures", "does-not-exist"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("does-not-exist"));
}
