use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ddc_cli::commands::Aggregate;
use ddc_core::engine::{RunReport, StopCause};
use ddc_core::synthetic::{Family, GeneratorSpec, SyntheticSource};
use ddc_gateway::mock::{MockPath, MockScript, MockServer};

fn ddc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddc")).args(args).output().unwrap()
}

fn golden() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = ddc(&[
            "simulate", "--p", "0.6", "--mu-c", "0.9", "--mu-i", "0.2", "--trials", "1000", "--seed", "7", "--out",
            s(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for name in ["summary.json", "trials.jsonl"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["settings"]["trials"], 1000);
    assert_eq!(summary["spec"]["seed"], 7);
    assert_eq!(fs::read_to_string(a.join("trials.jsonl")).unwrap().lines().count(), 1000);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(ddc(&["simulate", "--trials", "0"]).status.code(), Some(2));
    assert_eq!(ddc(&["simulate", "--no-such-flag"]).status.code(), Some(2));
    assert_eq!(ddc(&["simulate", "--p", "1.5"]).status.code(), Some(2));
    assert_eq!(ddc(&["simulate", "--experiment", "pruning", "--window", "4096"]).status.code(), Some(2));
    assert_eq!(ddc(&["check-condition", "--mu-c", "0.8", "--m2-c", "0.1"]).status.code(), Some(2));
    assert_eq!(ddc(&["replay", "--out", "/tmp/x"]).status.code(), Some(2));
    let empty = tempfile::tempdir().unwrap();
    assert_eq!(
        ddc(&["replay", "--traces", s(empty.path()), "--out", s(&empty.path().join("o"))]).status.code(),
        Some(2)
    );
}

fn condition(args: &[&str]) -> (f64, f64, String) {
    let mut all = vec!["check-condition"];
    all.extend_from_slice(args);
    let o = ddc(&all);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let field = |name: &str| -> String {
        text.lines()
            .find_map(|l| l.strip_prefix(name))
            .unwrap()
            .trim()
            .to_string()
    };
    (field("lhs").parse().unwrap(), field("rhs").parse().unwrap(), field("verdict"))
}

#[test]
fn check_condition_examples() {
    let (_, rhs, verdict) = condition(&["--p", "0.5", "--mu-c", "0.6", "--mu-i", "0.4"]);
    assert_eq!((rhs, verdict.as_str()), (0.0, "holds"));
    let (lhs, rhs, verdict) = condition(&["--p", "0.6", "--mu-c", "0.8", "--mu-i", "0.4"]);
    assert!((lhs - 0.478).abs() < 1e-3 && (rhs - 0.204).abs() < 1e-3);
    assert_eq!(verdict, "holds");
    assert_eq!(condition(&["--p", "0.9", "--mu-c", "0.8", "--mu-i", "0.4"]).2, "fails");
}

fn mock_paths(n: usize) -> Vec<MockPath> {
    let source = SyntheticSource::new(GeneratorSpec {
        p: 0.7,
        family: Family::DipRecover,
        path_len: 48,
        seed: 4,
        ..GeneratorSpec::default()
    })
    .unwrap();
    (0..n)
        .map(|i| {
            let p = source.path(i);
            MockPath::from_events(p.events(), &p.text())
        })
        .collect()
}

fn write_dataset(dir: &Path) -> PathBuf {
    let path = dir.join("data.jsonl");
    fs::write(
        &path,
        "{\"id\":\"q1\",\"prompt\":\"one\",\"gold\":\"correct\"}\n{\"id\":\"q2\",\"prompt\":\"two\",\"gold\":\"wrong-1\"}\n",
    )
    .unwrap();
    path
}

fn read_aggregate(out: &Path) -> Aggregate {
    serde_json::from_slice(&fs::read(out.join("aggregate.json")).unwrap()).unwrap()
}

#[test]
fn run_with_full_init_budget_exhausts_then_replays() {
    let server = MockServer::start(MockScript {
        paths: mock_paths(16),
        tokens_per_chunk: 3,
        ..MockScript::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let out = dir.path().join("run");
    let o = ddc(&[
        "run", "--base-url", &server.base_url(), "--dataset", s(&data), "--out", s(&out), "--budget", "16",
        "--b-init", "16", "--window", "16", "--parallelism", "4",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let agg = read_aggregate(&out);
    assert_eq!(agg.queries.len(), 2);
    for q in &agg.queries {
        assert_eq!(q.stop_cause, StopCause::BudgetExhausted);
        assert_eq!(q.paths_generated, 16);
    }
    assert_eq!(agg.summary.graded, 2);
    assert_eq!(agg.summary.tokens_1e7, agg.summary.tokens_total as f64 / 1e7);
    assert_eq!(server.total_requests(), 32);

    let replayed = dir.path().join("replay");
    let o = ddc(&[
        "replay", "--traces", s(&out.join("traces")), "--dataset", s(&data), "--out", s(&replayed), "--budget", "16",
        "--b-init", "16", "--window", "16",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for id in ["q1", "q2"] {
        let live = fs::read(out.join("reports").join(format!("{id}.json"))).unwrap();
        let again = fs::read(replayed.join("reports").join(format!("{id}.json"))).unwrap();
        assert_eq!(live, again, "{id}");
    }

    let o = ddc(&["report", s(&out), s(&replayed.join("aggregate.json"))]);
    assert!(o.status.success());
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert!(table.contains("Tokens(1e7)"));
    assert!(table.lines().nth(1).unwrap().starts_with("run"));
}

#[test]
fn unreachable_endpoint_exits_3_with_partial_results() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let out = dir.path().join("run");
    let url = format!("http://127.0.0.1:{port}/v1");
    let o = ddc(&[
        "run", "--base-url", &url, "--dataset", s(&data), "--out", s(&out), "--retries", "0", "--budget", "4",
        "--b-init", "2",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    let agg = read_aggregate(&out);
    assert_eq!(agg.queries.len(), 1);
    assert_eq!(agg.queries[0].stop_cause, StopCause::Aborted);
    assert!(agg.queries[0].error.is_some());
    let report: RunReport = serde_json::from_slice(&fs::read(out.join("reports/q1.json")).unwrap()).unwrap();
    assert_eq!(report.stop_cause, StopCause::Aborted);
}

#[test]
fn missing_logprobs_aborts_the_run() {
    let server = MockServer::start(MockScript {
        paths: mock_paths(2),
        omit_logprobs: true,
        ..MockScript::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path());
    let o = ddc(&["run", "--base-url", &server.base_url(), "--dataset", s(&data), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("top_logprobs"));
}

#[test]
fn golden_traces_replay_to_bundled_reports() {
    let dir = tempfile::tempdir().unwrap();
    let g = golden();
    let o = ddc(&[
        "--config",
        s(&g.join("engine.toml")),
        "replay",
        "--traces",
        s(&g.join("traces")),
        "--dataset",
        s(&g.join("dataset.jsonl")),
        "--out",
        s(dir.path()),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let mut n = 0;
    for entry in fs::read_dir(g.join("reports")).unwrap() {
        let expected = entry.unwrap().path();
        let got = dir.path().join("reports").join(expected.file_name().unwrap());
        assert_eq!(fs::read(&got).unwrap(), fs::read(&expected).unwrap(), "{}", expected.display());
        n += 1;
    }
    assert_eq!(n, 3);
    let agg = read_aggregate(dir.path());
    assert_eq!(agg.summary.correct, 3);
}
