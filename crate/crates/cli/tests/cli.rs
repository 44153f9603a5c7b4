use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn chrono(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chrono"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn mutex_run_grants_everyone_and_csv_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["mutex", "--n", "5", "--contenders", "5", "--seed", "7"];
    let out = chrono(a.path(), &args);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("5 of 5 requests granted"), "{stdout}");
    assert!(stdout.contains("exclusion=pass"), "{stdout}");
    assert!(chrono(b.path(), &args).status.success());
    let name = "mutex-jitter-quorum-s7.csv";
    let csv = fs::read(a.path().join(name)).unwrap();
    assert_eq!(csv, fs::read(b.path().join(name)).unwrap());
    assert!(csv.starts_with(b"scenario,seed,backend,n,metric,value\n"));

    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(a.path().join("mutex-jitter-quorum-s7.json")).unwrap())
            .unwrap();
    assert_eq!(report["seed"], 7);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(report["checkers"]["liveness"], true);
}

#[test]
fn attack_verdicts_and_negative_control() {
    let dir = tempfile::tempdir().unwrap();
    let out = chrono(
        dir.path(),
        &["attack", "erroneous-clock", "--backend", "quorum"],
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("verdict rejected-by-verify"));

    let out = chrono(
        dir.path(),
        &[
            "attack",
            "erroneous-clock",
            "--backend",
            "quorum",
            "--no-verify",
            "--no-mono",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let failures: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert!(!failures["failures"].as_array().unwrap().is_empty());
}

#[test]
fn check_reports_the_corrupted_event() {
    let dir = tempfile::tempdir().unwrap();
    assert!(chrono(
        dir.path(),
        &["mutex", "--n", "3", "--contenders", "3", "--seed", "1"]
    )
    .status
    .success());
    let trace = dir.path().join("mutex-jitter-quorum-s1.trace.jsonl");
    let out = chrono(dir.path(), &["check", trace.to_str().unwrap()]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );

    // Redirect the first delivery to a different process.
    let text = fs::read_to_string(&trace).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    let (i, mut e) = lines
        .iter()
        .enumerate()
        .map(|(i, l)| (i, serde_json::from_str::<serde_json::Value>(l).unwrap()))
        .find(|(_, e)| e["kind"] == "deliver")
        .unwrap();
    let seq = e["seq"].as_u64().unwrap();
    e["dst"] = ((e["dst"].as_u64().unwrap() + 1) % 3).into();
    lines[i] = e.to_string();
    let bad = dir.path().join("bad.jsonl");
    fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let out = chrono(dir.path(), &["check", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains(&format!("event {seq}")), "{stderr}");
}

#[test]
fn store_bench_writes_report_and_keys_feed_serve() {
    let dir = tempfile::tempdir().unwrap();
    let out = chrono(
        dir.path(),
        &[
            "store",
            "bench",
            "--clients",
            "2",
            "--ratio",
            "0.05",
            "--ops",
            "300",
            "--seed",
            "3",
            "--plan",
            "faulty",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = fs::read_to_string(dir.path().join("store-bench-quorum-s3.csv")).unwrap();
    assert!(csv.contains("store/bench,3,quorum,3,throughput,"));
    assert!(csv.contains("check:causal,1.0"));

    let out = chrono(
        dir.path(),
        &["store", "bench", "--byzantine", "--ops", "50"],
    );
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("0 ops completed"));

    assert!(
        chrono(dir.path(), &["keys", "--ops", "40", "--base-port", "0"])
            .status
            .success()
    );
    let keys: serde_json::Value =
        serde_json::from_slice(&fs::read(dir.path().join("keys.json")).unwrap()).unwrap();
    assert_eq!(keys["servers"].as_array().unwrap().len(), 3);
    let cfg = dir.path().join("cluster.json");
    let out = chrono(
        dir.path(),
        &[
            "store",
            "serve",
            "--config",
            cfg.to_str().unwrap(),
            "--limit-secs",
            "30",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("40 ops completed over TCP"));
}

#[test]
fn bad_arguments_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        chrono(dir.path(), &["mutex", "--plan", "nope"])
            .status
            .code(),
        Some(2)
    );
    assert_eq!(
        chrono(dir.path(), &["attack", "nope"]).status.code(),
        Some(2)
    );
}
