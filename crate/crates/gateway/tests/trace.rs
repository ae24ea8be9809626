use std::fs;

use ddc_core::engine::{Engine, EngineConfig, PathStatus};
use ddc_core::synthetic::{Family, GeneratorSpec, SyntheticSource};
use ddc_core::{PruneReason, TokenEvent};
use ddc_gateway::trace::Timing;
use ddc_gateway::{load_traces, GatewayError, RecordingSource, TraceRecord, TRACE_SCHEMA_VERSION};
use proptest::prelude::*;

fn status() -> impl Strategy<Value = PathStatus> {
    prop_oneof![
        (proptest::option::of("[a-z0-9]{1,6}"), -50.0..0.0f64).prop_map(|(answer, path_confidence)| {
            PathStatus::Completed {
                answer,
                path_confidence,
            }
        }),
        (any::<bool>(), 0usize..5000).prop_map(|(low, at_token)| PathStatus::Pruned {
            reason: if low {
                PruneReason::LowConfidence
            } else {
                PruneReason::Instability
            },
            at_token,
        }),
        Just(PathStatus::BudgetExhausted),
        Just(PathStatus::Cancelled),
        ".{0,20}".prop_map(|message| PathStatus::Failed { message }),
    ]
}

fn record() -> impl Strategy<Value = TraceRecord> {
    let event = (
        proptest::collection::vec(-9999.0..=0.0f64, 1..6),
        proptest::option::of(".{0,4}"),
    );
    (
        "[a-z0-9_-]{1,8}",
        0usize..64,
        proptest::collection::vec(event, 0..12),
        proptest::option::of(".{0,30}"),
        proptest::option::of("[0-9]{1,3}"),
        status(),
        any::<u64>(),
        any::<u64>(),
    )
        .prop_map(
            |(query_id, path_id, events, final_text, extracted_answer, outcome, started, elapsed)| TraceRecord {
                schema_version: TRACE_SCHEMA_VERSION,
                query_id,
                path_id,
                events: events
                    .into_iter()
                    .enumerate()
                    .map(|(i, (mut lps, text))| {
                        lps.sort_by(|a, b| b.total_cmp(a));
                        TokenEvent {
                            position: i,
                            top_logprobs: lps,
                            token_text: text,
                        }
                    })
                    .collect(),
                final_text,
                extracted_answer,
                outcome,
                timing: Timing {
                    started_unix_ms: started,
                    elapsed_ms: elapsed,
                },
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn persisted_records_round_trip(rec in record()) {
        let dir = tempfile::tempdir().unwrap();
        let path = rec.persist(dir.path()).unwrap();
        let (back, warning) = TraceRecord::load(&path).unwrap();
        prop_assert!(warning.is_none());
        prop_assert_eq!(back, rec);
    }
}

fn sample_record(events: usize) -> TraceRecord {
    TraceRecord {
        schema_version: TRACE_SCHEMA_VERSION,
        query_id: "q".into(),
        path_id: 0,
        events: (0..events).map(|i| TokenEvent::new(i, vec![-0.1, -2.0])).collect(),
        final_text: Some("\\boxed{4}".into()),
        extracted_answer: Some("4".into()),
        outcome: PathStatus::Completed {
            answer: Some("4".into()),
            path_confidence: 2.0,
        },
        timing: Timing {
            started_unix_ms: 1,
            elapsed_ms: 2,
        },
    }
}

#[test]
fn truncated_file_loads_as_failed_with_warning() {
    let dir = tempfile::tempdir().unwrap();
    let path = sample_record(5).persist(dir.path()).unwrap();
    let raw = fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = raw.lines().collect();
    // header, three events and half of the fourth
    let cut = format!("{}\n{}", lines[..4].join("\n"), &lines[4][..10]);
    fs::write(&path, cut).unwrap();
    let store = load_traces(dir.path()).unwrap();
    let rec = &store.query("q").unwrap().records[0];
    assert_eq!(rec.events.len(), 3);
    assert!(matches!(rec.outcome, PathStatus::Failed { .. }));
    assert_eq!(store.warnings.len(), 1);
}

#[test]
fn missing_outcome_is_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = sample_record(2).persist(dir.path()).unwrap();
    let raw = fs::read_to_string(&path).unwrap();
    let kept: String = raw.lines().take(3).map(|l| format!("{l}\n")).collect();
    fs::write(&path, kept).unwrap();
    let (rec, warning) = TraceRecord::load(&path).unwrap();
    assert_eq!(rec.events.len(), 2);
    assert!(warning.unwrap().contains("truncated"));
}

#[test]
fn schema_mismatch_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = sample_record(1);
    rec.schema_version = TRACE_SCHEMA_VERSION + 1;
    rec.persist(dir.path()).unwrap();
    match load_traces(dir.path()) {
        Err(GatewayError::SchemaMismatch { found, expected, .. }) => {
            assert_eq!(found, TRACE_SCHEMA_VERSION + 1);
            assert_eq!(expected, TRACE_SCHEMA_VERSION);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn empty_directory_has_no_traces() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_traces(dir.path()), Err(GatewayError::NoTraces(_))));
}

#[test]
fn gaps_and_bad_positions_are_corrupt() {
    let dir = tempfile::tempdir().unwrap();
    let mut rec = sample_record(1);
    rec.path_id = 1;
    rec.persist(dir.path()).unwrap();
    assert!(matches!(load_traces(dir.path()), Err(GatewayError::CorruptTrace { .. })));

    let dir = tempfile::tempdir().unwrap();
    let mut rec = sample_record(3);
    rec.events[2].position = 7;
    rec.persist(dir.path()).unwrap();
    assert!(matches!(load_traces(dir.path()), Err(GatewayError::CorruptTrace { .. })));
}

#[test]
fn bad_query_ids_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    for id in ["", "../x", "a/b", ".hidden"] {
        let mut rec = sample_record(0);
        rec.query_id = id.into();
        assert!(matches!(rec.persist(dir.path()), Err(GatewayError::Config(_))), "{id:?}");
    }
}

#[test]
fn recorded_run_replays_identically() {
    let spec = GeneratorSpec {
        p: 0.5,
        mu_c: 0.9,
        mu_i: 0.9,
        family: Family::Degenerating,
        seed: 21,
        ..GeneratorSpec::default()
    };
    let source = SyntheticSource::new(spec).unwrap().with_init_family(Family::DipRecover, 16);
    let cfg = EngineConfig {
        budget: 48,
        init_budget: 16,
        window: 64,
        ..EngineConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let recording = RecordingSource::new(source, dir.path(), "query-1").unwrap();
    let live = Engine::new(cfg.clone()).unwrap().run(&recording).unwrap();
    assert!(live.paths_pruned.total() > 0, "{live:#?}");

    let store = load_traces(dir.path()).unwrap();
    assert!(store.warnings.is_empty());
    let traces = store.query("query-1").unwrap();
    assert_eq!(traces.records.len(), live.paths_generated);
    for (rec, summary) in traces.records.iter().zip(&live.paths) {
        assert_eq!(rec.events.len(), summary.tokens);
        assert_eq!(rec.outcome, summary.status);
    }
    let replayed = Engine::new(cfg).unwrap().run(traces).unwrap();
    assert_eq!(
        serde_json::to_value(&live).unwrap(),
        serde_json::to_value(&replayed).unwrap()
    );
}
