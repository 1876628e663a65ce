use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn cocot(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cocot"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn factify_manifest(dir: &Path, rows: usize) -> PathBuf {
    let lines: Vec<String> = (0..rows)
        .map(|i| {
            let cat = ["support_multimodal", "refute", "support_text", "insufficient_text", "insufficient_multimodal"][i % 5];
            format!(
                r#"{{"id":"f{i}","claim_image":{{"uri":"c{i}.png","sha256":"{:064x}"}},"document_image":{{"uri":"d{i}.png","sha256":"{:064x}"}},"original_category":"{cat}"}}"#,
                2 * i,
                2 * i + 1
            )
        })
        .collect();
    let p = dir.join("factify.jsonl");
    std::fs::write(&p, lines.join("\n")).unwrap();
    p
}

fn mock_backend(dir: &Path) -> PathBuf {
    let p = dir.join("mock.json");
    std::fs::write(
        &p,
        format!(r#"{{"id":"mock","adapter":"mock","capabilities":["generate","score"],"mock":{{"policy":"uniform_random","seed":1}}}}"#),
    )
    .unwrap();
    p
}

fn run_dirs(out: &Path) -> Vec<PathBuf> {
    std::fs::read_dir(out).unwrap().map(|e| e.unwrap().path()).collect()
}

fn record_count(run_dir: &Path) -> usize {
    std::fs::read_to_string(run_dir.join("records.jsonl")).unwrap().lines().count()
}

#[test]
fn run_factify_two_strategies() {
    let dir = tempfile::tempdir().unwrap();
    factify_manifest(dir.path(), 12);
    mock_backend(dir.path());
    let o = cocot(
        &["run", "--dataset", "factify_v", "--manifest", "factify.jsonl", "--strategy", "standard,cocot", "--backend", "mock.json", "--limit", "10", "--out-dir", "runs", "--cache-dir", "cache"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let runs = run_dirs(&dir.path().join("runs"));
    assert_eq!(runs.len(), 1);
    assert_eq!(record_count(&runs[0]), 20);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(runs[0].join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary.as_array().unwrap().len(), 2);
    assert!(stdout(&o).contains("| mock | standard |"));
    assert!(stdout(&o).contains("| mock | cocot |"));
}

#[test]
fn flags_override_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let sub = dir.path().join("conf");
    std::fs::create_dir(&sub).unwrap();
    factify_manifest(&sub, 10);
    mock_backend(&sub);
    std::fs::write(
        sub.join("run.json"),
        r#"{"dataset":"factify_v","manifest":"factify.jsonl","strategies":["standard"],"backend":"mock.json","limit":5,"out_dir":"runs","cache_dir":"cache","run_id":"fromfile"}"#,
    )
    .unwrap();
    let o = cocot(&["run", "--config", "conf/run.json"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(record_count(&sub.join("runs/fromfile")), 5);
    let o = cocot(&["run", "--config", "conf/run.json", "--limit", "3", "--run-id", "fromflag"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(record_count(&sub.join("runs/fromflag")), 3);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    factify_manifest(dir.path(), 5);
    mock_backend(dir.path());
    let base = ["run", "--dataset", "factify_v", "--backend", "mock.json", "--out-dir", "runs", "--cache-dir", "cache"];
    let with = |extra: &[&str]| {
        let mut a: Vec<&str> = base.to_vec();
        a.extend_from_slice(extra);
        cocot(&a, dir.path()).status.code()
    };
    assert_eq!(with(&["--manifest", "factify.jsonl", "--strategy", "nope"]), Some(2));
    assert_eq!(with(&["--manifest", "factify.jsonl", "--strategy", "standard", "--concurrency", "0"]), Some(2));
    assert_eq!(with(&["--manifest", "missing.jsonl", "--strategy", "standard"]), Some(3));
    std::fs::write(dir.path().join("bad.jsonl"), "{\"id\": 1}\n").unwrap();
    assert_eq!(with(&["--manifest", "bad.jsonl", "--strategy", "standard"]), Some(3));
    std::fs::write(dir.path().join("sick.json"), r#"{"id":"mock","adapter":"mock","capabilities":["generate"],"mock":{"policy":"echo","faults":{"unhealthy":true}}}"#).unwrap();
    let o = cocot(
        &["run", "--dataset", "factify_v", "--manifest", "factify.jsonl", "--strategy", "standard", "--backend", "sick.json", "--out-dir", "runs", "--cache-dir", "cache"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn validate_reports_locations() {
    let dir = tempfile::tempdir().unwrap();
    factify_manifest(dir.path(), 4);
    let ok = cocot(&["validate", "--factify", "factify.jsonl"], dir.path());
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).contains("4 rows, 0 errors"));
    std::fs::write(
        dir.path().join("raven.jsonl"),
        "{\"id\":\"r\",\"context_images\":[],\"candidate_images\":[],\"answer_index\":0}\n",
    )
    .unwrap();
    let bad = cocot(&["validate", "--raven", "raven.jsonl"], dir.path());
    assert_eq!(bad.status.code(), Some(3));
    assert!(stdout(&bad).contains("raven.jsonl:1:"), "{}", stdout(&bad));
}

#[test]
fn report_and_cache_commands() {
    let dir = tempfile::tempdir().unwrap();
    factify_manifest(dir.path(), 6);
    mock_backend(dir.path());
    let o = cocot(
        &["run", "--dataset", "factify_v", "--manifest", "factify.jsonl", "--strategy", "standard", "--backend", "mock.json", "--out-dir", "runs", "--cache-dir", "cache", "--run-id", "r1"],
        dir.path(),
    );
    assert!(o.status.success());
    let o = cocot(&["report", "runs/r1", "--out-dir", "rep"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for ext in ["md", "json", "csv"] {
        assert!(dir.path().join(format!("rep/report.{ext}")).is_file());
    }
    let o = cocot(&["cache", "stats", "--cache-dir", "cache"], dir.path());
    assert!(stdout(&o).contains("entries: 6 (6 generate, 0 score)"), "{}", stdout(&o));
    let o = cocot(&["cache", "gc", "--cache-dir", "cache"], dir.path());
    assert!(stdout(&o).contains("kept 6"), "{}", stdout(&o));
}

#[test]
fn help_documents_flags() {
    let dir = tempfile::tempdir().unwrap();
    let o = cocot(&["run", "--help"], dir.path());
    let text = stdout(&o);
    for flag in ["--dataset", "--manifest", "--strategy", "--backend", "--raven-mode", "--seed", "--concurrency", "--cache-dir", "--out-dir", "--limit", "--config"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}
