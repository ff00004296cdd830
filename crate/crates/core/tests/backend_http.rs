//! HTTP backend tests against a minimal in-process OpenAI-compatible stub.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde_json::{json, Value};

use uaf_core::backend::{
    score_choices, BackendError, GenerationRequest, HttpBackend, HttpEndpointConfig, ModelBackend,
};

type Handler = dyn Fn(&str, &Value) -> (u16, Value) + Send + Sync;

struct StubServer {
    url: String,
    shutdown: Arc<std::sync::atomic::AtomicBool>,
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // wake the accept loop
        let _ = TcpStream::connect(self.url.trim_start_matches("http://"));
    }
}

fn read_request(stream: &mut TcpStream) -> Option<(String, Value)> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 1024];
    let header_end;
    loop {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            return None;
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = buf.windows(4).position(|w| w == b"\r\n\r\n") {
            header_end = pos + 4;
            break;
        }
        if buf.len() > 1 << 20 {
            return None;
        }
    }
    let header_text = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let path = header_text.split_whitespace().nth(1)?.to_string();
    let content_length: usize = header_text
        .lines()
        .find_map(|l| {
            l.to_ascii_lowercase()
                .strip_prefix("content-length:")
                .map(str::trim)
                .map(String::from)
        })
        .and_then(|v| v.parse().ok())
        .unwrap_or(0);
    let mut body = buf[header_end..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk).ok()?;
        if n == 0 {
            break;
        }
        body.extend_from_slice(&chunk[..n]);
    }
    let value = serde_json::from_slice(&body).unwrap_or(Value::Null);
    Some((path, value))
}

fn spawn_stub(handler: Box<Handler>) -> StubServer {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let shutdown = Arc::new(std::sync::atomic::AtomicBool::new(false));
    let stop = shutdown.clone();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            if stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(mut stream) = stream else { continue };
            if let Some((path, body)) = read_request(&mut stream) {
                let (status, payload) = handler(&path, &body);
                let body_text = payload.to_string();
                let response = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body_text}",
                    body_text.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        }
    });
    StubServer {
        url: format!("http://{addr}"),
        shutdown,
    }
}

fn backend_for(url: &str, max_retries: u32) -> HttpBackend {
    HttpBackend::new(
        "live-test".into(),
        HttpEndpointConfig {
            url: url.to_string(),
            model: "stub-model".into(),
            auth_token_env: None,
            timeout_secs: 5,
            max_retries,
        },
    )
    .unwrap()
}

#[test]
fn chat_completions_round_trip_with_logprobs() {
    let stub = spawn_stub(Box::new(|path, body| {
        assert_eq!(path, "/v1/chat/completions");
        assert_eq!(body["model"], "stub-model");
        assert_eq!(body["messages"][0]["content"], "Q: capital of France?");
        (
            200,
            json!({
                "choices": [{
                    "message": {"content": "Paris"},
                    "logprobs": {"content": [
                        {"token": "Par", "logprob": -0.1},
                        {"token": "is", "logprob": -0.2}
                    ]}
                }]
            }),
        )
    }));
    let backend = backend_for(&stub.url, 1);
    let result = backend
        .generate(&GenerationRequest::greedy(
            "Q: capital of France?".into(),
            16,
        ))
        .unwrap();
    assert_eq!(result.completions.len(), 1);
    assert_eq!(result.completions[0].text, "Paris");
    assert_eq!(result.completions[0].token_logprobs, vec![-0.1, -0.2]);
    assert_eq!(result.completions[0].token_count, 2);
    assert!(!result.cached);
}

#[test]
fn score_choices_normalizes_by_token_count() {
    // Continuation "yes": one token summing to -1.0; continuation "no way":
    // two tokens summing to -4.0. Normalized scores are [-1.0, -2.0].
    let stub = spawn_stub(Box::new(|path, body| {
        assert_eq!(path, "/v1/completions");
        assert_eq!(body["max_tokens"], 0);
        assert_eq!(body["echo"], true);
        let prompt = body["prompt"].as_str().unwrap();
        let boundary = "Q: agree?".len();
        let payload = if prompt.ends_with("yes") {
            json!({
                "choices": [{
                    "logprobs": {
                        "tokens": ["Q:", " agree?", "yes"],
                        "token_logprobs": [null, -0.7, -1.0],
                        "text_offset": [0, 2, boundary]
                    }
                }]
            })
        } else {
            json!({
                "choices": [{
                    "logprobs": {
                        "tokens": ["Q:", " agree?", "no", " way"],
                        "token_logprobs": [null, -0.7, -3.0, -1.0],
                        "text_offset": [0, 2, boundary, boundary + 2]
                    }
                }]
            })
        };
        (200, payload)
    }));
    let backend = backend_for(&stub.url, 1);
    let scores = score_choices(&backend, "Q: agree?", &["yes".into(), "no way".into()]).unwrap();
    assert!((scores[0] - -1.0).abs() < 1e-12);
    assert!((scores[1] - -2.0).abs() < 1e-12);
    assert_eq!(uaf_core::backend::argmax_lowest(&scores), 0);
}

#[test]
fn missing_logprobs_is_a_capability_error() {
    let stub = spawn_stub(Box::new(|_, _| {
        (200, json!({"choices": [{"message": {"content": "Paris"}}]}))
    }));
    let backend = backend_for(&stub.url, 1);
    let err = backend
        .generate(&GenerationRequest::greedy("Q".into(), 16))
        .unwrap_err();
    assert!(matches!(err, BackendError::Capability { .. }), "{err}");
}

#[test]
fn transient_errors_retry_then_succeed() {
    let attempts = Arc::new(AtomicU64::new(0));
    let counter = attempts.clone();
    let stub = spawn_stub(Box::new(move |_, _| {
        if counter.fetch_add(1, Ordering::SeqCst) < 2 {
            (500, json!({"error": "flaky"}))
        } else {
            (
                200,
                json!({
                    "choices": [{
                        "message": {"content": "ok"},
                        "logprobs": {"content": [{"token": "ok", "logprob": -0.5}]}
                    }]
                }),
            )
        }
    }));
    let backend = backend_for(&stub.url, 5);
    let result = backend
        .generate(&GenerationRequest::greedy("Q".into(), 16))
        .unwrap();
    assert_eq!(result.completions[0].text, "ok");
    assert_eq!(attempts.load(Ordering::SeqCst), 3);
}

#[test]
fn exhausted_retries_name_the_backend() {
    let stub = spawn_stub(Box::new(|_, _| (503, json!({"error": "down"}))));
    let backend = backend_for(&stub.url, 2);
    let err = backend
        .generate(&GenerationRequest::greedy("Q".into(), 16))
        .unwrap_err();
    match err {
        BackendError::Unavailable {
            backend_id,
            message,
        } => {
            assert_eq!(backend_id, "live-test");
            assert!(message.contains("2 attempts"), "{message}");
        }
        other => panic!("unexpected error {other}"),
    }
}

#[test]
fn client_errors_fail_fast() {
    let attempts = Arc::new(AtomicU64::new(0));
    let counter = attempts.clone();
    let stub = spawn_stub(Box::new(move |_, _| {
        counter.fetch_add(1, Ordering::SeqCst);
        (401, json!({"error": "bad token"}))
    }));
    let backend = backend_for(&stub.url, 5);
    let err = backend
        .generate(&GenerationRequest::greedy("Q".into(), 16))
        .unwrap_err();
    assert!(matches!(err, BackendError::Unavailable { .. }), "{err}");
    assert_eq!(attempts.load(Ordering::SeqCst), 1);
}

#[test]
fn logprob_less_endpoint_works_with_semantic_entropy_only() {
    use uaf_core::dataset::{QaExample, TaskSpec};
    use uaf_core::eval::{Evaluator, PromptTemplates, UncertaintySettings};
    use uaf_core::uncertainty::{EstimatorRegistry, NormalizedExactJudge};

    // answers without any logprob payload, honoring the requested n
    let stub = spawn_stub(Box::new(|path, body| {
        assert_eq!(path, "/v1/chat/completions");
        let n = body["n"].as_u64().unwrap_or(1);
        let choices: Vec<Value> = (0..n)
            .map(|i| json!({"message": {"content": format!("guess {}", i % 2)}}))
            .collect();
        (200, json!({ "choices": choices }))
    }));
    let backend = uaf_core::backend::CachingBackend::new(Box::new(backend_for(&stub.url, 1)), None);
    let examples = vec![QaExample {
        id: "g1".into(),
        question: "Name the largest desert.".into(),
        task: TaskSpec::Generative {
            gold_aliases: vec!["Antarctic desert".into()],
        },
    }];
    let registry = EstimatorRegistry::new();
    let judge = NormalizedExactJudge;
    let templates = PromptTemplates::default();

    // semantic entropy never asks for logprobs, so the run succeeds
    let entropy = UncertaintySettings {
        method: "semantic_entropy".into(),
        samples: 4,
        sample_temperature: 0.7,
    };
    let evaluator = Evaluator {
        templates: &templates,
        settings: &entropy,
        registry: &registry,
        judge: &judge,
        max_tokens: 8,
        concurrency: 1,
    };
    let answers = evaluator.evaluate(&backend, &examples).unwrap();
    assert_eq!(answers[0].samples.len(), 4);
    assert!((0.0..=1.0).contains(&answers[0].uncertainty.value));

    // perplexity needs logprobs and surfaces the capability error
    let perplexity = UncertaintySettings::default();
    let evaluator = Evaluator {
        templates: &templates,
        settings: &perplexity,
        registry: &registry,
        judge: &judge,
        max_tokens: 8,
        concurrency: 1,
    };
    let err = evaluator.evaluate(&backend, &examples).unwrap_err();
    assert!(
        matches!(
            err,
            uaf_core::eval::EvalError::Backend(BackendError::Capability { .. })
        ),
        "{err}"
    );
}

#[test]
fn failed_run_resumes_from_cache_after_recovery() {
    use std::sync::atomic::AtomicBool;
    use uaf_core::dataset::{save_dataset, QaExample, TaskSpec};
    use uaf_core::harness::{self, files};
    use uaf_core::uncertainty::EstimatorRegistry;

    let examples: Vec<QaExample> = (0..8)
        .map(|i| QaExample {
            id: format!("q{i}"),
            question: format!("Stub question number {i}?"),
            task: TaskSpec::Generative {
                gold_aliases: vec![format!("stub answer {i}")],
            },
        })
        .collect();

    // the stub refuses the final test question until "healed", so the first
    // run fails only after everything else is already cached
    let data_split = uaf_core::dataset::split(&examples, 0.25, 3).unwrap();
    let last_question = data_split.test.last().unwrap().question.clone();
    let healed = Arc::new(AtomicBool::new(false));
    let gate = healed.clone();
    let stub = spawn_stub(Box::new(move |_, body| {
        let prompt = body["messages"][0]["content"].as_str().unwrap_or_default();
        if prompt.contains(&last_question) && !gate.load(Ordering::SeqCst) {
            return (500, json!({"error": "backend down"}));
        }
        let answer = prompt
            .split("number ")
            .nth(1)
            .and_then(|s| s.strip_suffix("?\nAnswer:"))
            .map(|d| format!("stub answer {d}"))
            .unwrap_or_default();
        (
            200,
            json!({
                "choices": [{
                    "message": {"content": answer},
                    "logprobs": {"content": [{"token": answer, "logprob": -0.4}]}
                }]
            }),
        )
    }));

    let dir = tempfile::tempdir().unwrap();
    let dataset_path = dir.path().join("data.jsonl");
    save_dataset(&dataset_path, &examples).unwrap();
    let pool_path = dir.path().join("pool.json");
    std::fs::write(
        &pool_path,
        json!({
            "backends": [{
                "backend_id": "flaky-live",
                "kind": "http_openai_compatible",
                "url": stub.url,
                "model": "stub-model",
                "timeout_secs": 5,
                "max_retries": 1
            }]
        })
        .to_string(),
    )
    .unwrap();
    let config: harness::ExperimentConfig = serde_json::from_value(json!({
        "dataset": dataset_path,
        "pool": pool_path,
        "validation_fraction": 0.25,
        "split_seed": 3,
        "k": 1,
        "output_dir": dir.path().join("out"),
        "cache_dir": dir.path().join("cache"),
        "concurrency": 1,
    }))
    .unwrap();
    let registry = EstimatorRegistry::new();

    // first attempt dies mid-run and leaves an incomplete marker, but every
    // response gathered before the failure is already durable in the cache
    let err = harness::cmd_run(&config, &registry).unwrap_err();
    assert!(matches!(
        err,
        harness::HarnessError::Ensemble(uaf_core::ensemble::EnsembleError::Eval(
            uaf_core::eval::EvalError::Backend(BackendError::Unavailable { .. })
        ))
    ));
    assert!(config.output_dir.join(files::ERROR).exists());

    // after the endpoint recovers, the rerun replays 7 answers from cache
    // and issues exactly one live call for the question that failed
    healed.store(true, Ordering::SeqCst);
    let output = harness::cmd_run(&config, &registry).unwrap();
    assert_eq!(output.telemetry.total_live_calls, 1);
    assert_eq!(output.telemetry.total_cache_hits, 7);
    assert_eq!(output.report.ensemble_accuracy, 1.0);
    assert!(!config.output_dir.join(files::ERROR).exists());
}

#[test]
fn missing_auth_env_is_reported() {
    let result = HttpBackend::new(
        "secured".into(),
        HttpEndpointConfig {
            url: "http://localhost:1".into(),
            model: "m".into(),
            auth_token_env: Some("UAF_TEST_TOKEN_THAT_IS_NOT_SET".into()),
            timeout_secs: 1,
            max_retries: 1,
        },
    );
    let err = match result {
        Ok(_) => panic!("expected missing-token error"),
        Err(e) => e,
    };
    match err {
        BackendError::MissingAuthToken { env_var, .. } => {
            assert_eq!(env_var, "UAF_TEST_TOKEN_THAT_IS_NOT_SET");
        }
        other => panic!("unexpected error {other}"),
    }
}
