use std::time::Duration;

use ddc_core::engine::{Engine, EngineConfig, EngineError, PathEvent, PathSource, PathStatus, PathStream, SourceError};
use ddc_core::synthetic::{Family, GeneratorSpec, SyntheticSource};
use ddc_core::{PruneReason, TokenEvent};
use ddc_gateway::mock::{MockPath, MockScript, MockServer, MockToken};
use ddc_gateway::{load_traces, ApiMode, EndpointConfig, EndpointSource, RecordingSource, RetryPolicy};

fn ramp(n: usize, k: usize) -> MockPath {
    MockPath {
        tokens: (0..n)
            .map(|i| MockToken {
                text: format!("w{i} "),
                top_logprobs: (0..k).map(|j| -0.01 * i as f64 - 0.5 * j as f64).collect(),
            })
            .collect(),
    }
}

fn config(server: &MockServer) -> EndpointConfig {
    EndpointConfig {
        base_url: server.base_url(),
        retry: RetryPolicy {
            retries: 3,
            backoff_ms: 1,
            backoff_factor: 1.0,
        },
        request_timeout_secs: 30,
        ..EndpointConfig::default()
    }
}

fn drain(source: &EndpointSource, path: usize) -> (Vec<TokenEvent>, Result<String, SourceError>) {
    let mut stream = source.open(path).map_err(SourceError::from).unwrap();
    let mut events = Vec::new();
    loop {
        match stream.next_event() {
            Ok(PathEvent::Token(t)) => events.push(t),
            Ok(PathEvent::Finished { text }) => return (events, Ok(text)),
            Err(e) => return (events, Err(e)),
        }
    }
}

#[test]
fn one_token_chunk_gives_exactly_one_event() {
    for api in [ApiMode::Completions, ApiMode::Chat] {
        let server = MockServer::start(MockScript {
            paths: vec![ramp(1, 20)],
            ..MockScript::default()
        })
        .unwrap();
        let source = EndpointSource::new(EndpointConfig { api, ..config(&server) }, "q").unwrap();
        let (events, text) = drain(&source, 0);
        assert_eq!(events.len(), 1, "{api:?}");
        assert_eq!(events[0].top_logprobs.len(), 20);
        assert_eq!(events[0].top_logprobs, ramp(1, 20).tokens[0].top_logprobs);
        assert_eq!(text.unwrap(), "w0 ");
    }
}

#[test]
fn multi_token_chunks_are_split_in_order() {
    let server = MockServer::start(MockScript {
        paths: vec![ramp(10, 5)],
        tokens_per_chunk: 3,
        ..MockScript::default()
    })
    .unwrap();
    let source = EndpointSource::new(
        EndpointConfig {
            top_logprobs: 5,
            ..config(&server)
        },
        "q",
    )
    .unwrap();
    let (events, text) = drain(&source, 0);
    let positions: Vec<usize> = events.iter().map(|e| e.position).collect();
    assert_eq!(positions, (0..10).collect::<Vec<_>>());
    assert_eq!(text.unwrap(), ramp(10, 5).text());
}

#[test]
fn request_carries_sampling_and_path_index() {
    let server = MockServer::start(MockScript {
        paths: vec![ramp(2, 20), ramp(3, 20)],
        ..MockScript::default()
    })
    .unwrap();
    let cfg = EndpointConfig {
        seed: Some(100),
        prompt_template: "Q: {prompt}".into(),
        ..config(&server)
    };
    let source = EndpointSource::new(cfg, "2+2").unwrap();
    let (events, _) = drain(&source, 1);
    assert_eq!(events.len(), 3);
    let body = server.path_log(1).last_body.unwrap();
    assert_eq!(body["prompt"], "Q: 2+2");
    assert_eq!(body["stream"], true);
    assert_eq!(body["logprobs"], 20);
    assert_eq!(body["temperature"], 0.6);
    assert_eq!(body["top_p"], 0.95);
    assert_eq!(body["seed"], 101);
}

#[test]
fn retries_before_first_event_never_duplicate() {
    let server = MockServer::start(MockScript {
        paths: vec![ramp(40, 20)],
        fail_first: 2,
        ..MockScript::default()
    })
    .unwrap();
    let source = EndpointSource::new(config(&server), "q").unwrap();
    let (events, text) = drain(&source, 0);
    assert!(text.is_ok());
    assert_eq!(server.path_log(0).requests, 3);
    let positions: Vec<usize> = events.iter().map(|e| e.position).collect();
    assert_eq!(positions, (0..40).collect::<Vec<_>>());
}

#[test]
fn exhausted_retries_fail_only_the_path() {
    let server = MockServer::start(MockScript {
        paths: vec![ramp(4, 20)],
        fail_first: 10,
        ..MockScript::default()
    })
    .unwrap();
    let source = EndpointSource::new(config(&server), "q").unwrap();
    let err = source.start_path(0).err().unwrap();
    assert!(matches!(err, SourceError::Path(ref m) if m.contains("503")), "{err:?}");
    assert_eq!(server.path_log(0).requests, 4);
}

#[test]
fn mid_stream_drop_is_not_retried() {
    let server = MockServer::start(MockScript {
        paths: vec![ramp(50, 20)],
        drop_after: Some(17),
        ..MockScript::default()
    })
    .unwrap();
    let source = EndpointSource::new(config(&server), "q").unwrap();
    let (events, end) = drain(&source, 0);
    assert_eq!(events.len(), 17);
    assert!(matches!(end, Err(SourceError::Path(_))));
    assert_eq!(server.path_log(0).requests, 1);
}

#[test]
fn missing_logprobs_is_a_capability_error() {
    let server = MockServer::start(MockScript {
        paths: vec![ramp(5, 20)],
        omit_logprobs: true,
        ..MockScript::default()
    })
    .unwrap();
    let source = EndpointSource::new(config(&server), "q").unwrap();
    let (events, end) = drain(&source, 0);
    assert!(events.is_empty());
    match end {
        Err(SourceError::Capability(m)) => assert!(m.contains("top_logprobs")),
        other => panic!("{other:?}"),
    }
    let engine = Engine::new(EngineConfig {
        budget: 8,
        init_budget: 4,
        window: 4,
        ..EngineConfig::default()
    })
    .unwrap();
    match engine.run(&source) {
        Err(EngineError::Aborted { message, report }) => {
            assert!(message.contains("top_logprobs"));
            assert_eq!(report.final_answer, None);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unreachable_endpoint_is_systemic() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let cfg = EndpointConfig {
        base_url: format!("http://127.0.0.1:{port}/v1"),
        retry: RetryPolicy {
            retries: 1,
            backoff_ms: 1,
            backoff_factor: 1.0,
        },
        ..EndpointConfig::default()
    };
    let source = EndpointSource::new(cfg, "q").unwrap();
    assert!(matches!(source.start_path(0).err().unwrap(), SourceError::Systemic(_)));
}

#[test]
fn cancellation_stops_within_one_event_and_disconnects() {
    let server = MockServer::start(MockScript {
        paths: vec![ramp(400, 20)],
        token_delay: Duration::from_millis(2),
        ..MockScript::default()
    })
    .unwrap();
    let source = EndpointSource::new(config(&server), "q").unwrap();
    let mut stream = source.open(0).unwrap();
    let handle = stream.cancel_handle();
    for _ in 0..100 {
        assert!(matches!(stream.next_event().unwrap(), PathEvent::Token(_)));
    }
    handle.cancel();
    let mut trailing = 0;
    while let Ok(PathEvent::Token(_)) = stream.next_event() {
        trailing += 1;
    }
    assert!(trailing <= 1, "{trailing} events after cancel");
    assert_eq!(stream.events_delivered(), 100);
    assert!(server.wait_for(0, Duration::from_secs(5), |l| l.disconnected));
    let log = server.path_log(0);
    assert!(!log.completed);
    assert!(log.tokens_written < 400);
}

#[test]
fn recorded_prune_after_100_tokens() {
    let dir = tempfile::tempdir().unwrap();
    let server = MockServer::start(MockScript {
        paths: vec![ramp(400, 20)],
        token_delay: Duration::from_millis(1),
        ..MockScript::default()
    })
    .unwrap();
    let source = EndpointSource::new(config(&server), "q").unwrap();
    let recording = RecordingSource::new(source, dir.path(), "q0").unwrap();
    {
        let mut stream = recording.start_path(0).unwrap();
        for _ in 0..100 {
            stream.next_event().unwrap();
        }
        stream.close(&PathStatus::Pruned {
            reason: PruneReason::Instability,
            at_token: 100,
        });
    }
    let store = load_traces(dir.path()).unwrap();
    let record = &store.query("q0").unwrap().records[0];
    assert_eq!(record.events.len(), 100);
    assert!(matches!(record.outcome, PathStatus::Pruned { at_token: 100, .. }));
    assert!(server.wait_for(0, Duration::from_secs(5), |l| l.disconnected));
}

#[test]
fn engine_over_mock_matches_direct_run() {
    let spec = GeneratorSpec {
        p: 0.7,
        mu_c: 0.8,
        mu_i: 0.3,
        weight_spread: 0.1,
        family: Family::DipRecover,
        path_len: 96,
        seed: 9,
        ..GeneratorSpec::default()
    };
    let synthetic = SyntheticSource::new(spec).unwrap();
    let paths: Vec<MockPath> = (0..64)
        .map(|i| {
            let p = synthetic.path(i);
            MockPath::from_events(p.events(), &p.text())
        })
        .collect();
    let server = MockServer::start(MockScript {
        paths,
        tokens_per_chunk: 4,
        ..MockScript::default()
    })
    .unwrap();
    let cfg = EngineConfig {
        budget: 64,
        init_budget: 8,
        window: 32,
        ..EngineConfig::default()
    };
    let direct = Engine::new(cfg.clone()).unwrap().run(&synthetic).unwrap();
    let source = EndpointSource::new(config(&server), "q").unwrap();
    let remote = Engine::new(cfg).unwrap().run(&source).unwrap();
    assert_eq!(
        serde_json::to_value(&direct).unwrap(),
        serde_json::to_value(&remote).unwrap()
    );
}
