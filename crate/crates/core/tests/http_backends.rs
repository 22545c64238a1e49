//! External backends against an in-process OpenAI-compatible mock server.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use conformal_claims::annotate::AnnotatorConfig;
use conformal_claims::backend::HttpConfig;
use conformal_claims::corpus::{AnswerRecord, ClaimRecord, DocumentItem, EmbeddingVector, Label, QueryItem};
use conformal_claims::pipeline::{self, DecomposeBackend, MergeBackend, Pipeline, PipelineConfig};
use conformal_claims::prompt;
use conformal_claims::similarity::{score_claims, EmbeddingProviderConfig};
use conformal_claims::Error;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
struct Request {
    path: String,
    authorization: Option<String>,
    body: Value,
}

type Handler = dyn Fn(&Request) -> (u16, String) + Send + Sync;

struct Mock {
    base: String,
    requests: Arc<Mutex<Vec<Request>>>,
    peak_in_flight: Arc<AtomicUsize>,
}

impl Mock {
    fn start(handler: impl Fn(&Request) -> (u16, String) + Send + Sync + 'static) -> Self {
        Self::start_with_delay(handler, Duration::ZERO)
    }

    fn start_with_delay(handler: impl Fn(&Request) -> (u16, String) + Send + Sync + 'static, delay: Duration) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let base = format!("http://{}/v1", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let peak = Arc::new(AtomicUsize::new(0));
        let active = Arc::new(AtomicUsize::new(0));
        let handler: Arc<Handler> = Arc::new(handler);
        let (reqs, pk) = (requests.clone(), peak.clone());
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { continue };
                let (handler, reqs, pk, active) = (handler.clone(), reqs.clone(), pk.clone(), active.clone());
                thread::spawn(move || {
                    let now = active.fetch_add(1, Ordering::SeqCst) + 1;
                    pk.fetch_max(now, Ordering::SeqCst);
                    thread::sleep(delay);
                    serve(stream, handler.as_ref(), &reqs, &active);
                });
            }
        });
        Self {
            base,
            requests,
            peak_in_flight: peak,
        }
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.base)
    }

    fn requests(&self) -> Vec<Request> {
        self.requests.lock().unwrap().clone()
    }
}

/// Handles one request. `active` is released before the response is written,
/// since the client may reuse its slot as soon as the response arrives.
fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Request>>, active: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    reader.read_line(&mut line).unwrap();
    let path = line.split_whitespace().nth(1).unwrap_or("").to_string();
    let (mut length, mut authorization) = (0, None);
    loop {
        let mut header = String::new();
        reader.read_line(&mut header).unwrap();
        let header = header.trim_end();
        if header.is_empty() {
            break;
        }
        let (name, value) = header.split_once(':').unwrap();
        match name.to_ascii_lowercase().as_str() {
            "content-length" => length = value.trim().parse().unwrap(),
            "authorization" => authorization = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0; length];
    reader.read_exact(&mut body).unwrap();
    let request = Request {
        path,
        authorization,
        body: serde_json::from_slice(&body).unwrap_or(Value::Null),
    };
    let (status, payload) = handler(&request);
    log.lock().unwrap().push(request);
    active.fetch_sub(1, Ordering::SeqCst);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
}

/// Deterministic 4-d embedding: vowel counts plus one.
fn toy_vector(text: &str) -> Vec<f64> {
    "aeio"
        .chars()
        .map(|v| 1.0 + text.chars().filter(|&c| c == v).count() as f64)
        .collect()
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> &'a str {
    let from = text.find(start).map(|i| i + start.len()).unwrap_or(0);
    let rest = &text[from..];
    rest.find(end).map(|i| &rest[..i]).unwrap_or(rest).trim()
}

fn chat_reply(content: &str) -> String {
    json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
}

/// Embeddings returned in reverse index order; chat replies keyed on the
/// system prompt. Claims containing "WRONG" are judged nonfactual.
fn openai_like(req: &Request) -> (u16, String) {
    if req.path.ends_with("/embeddings") {
        let inputs: Vec<String> = serde_json::from_value(req.body["input"].clone()).unwrap();
        let data: Vec<Value> = inputs
            .iter()
            .enumerate()
            .rev()
            .map(|(i, t)| json!({"index": i, "embedding": toy_vector(t)}))
            .collect();
        return (200, json!({"data": data}).to_string());
    }
    let system = req.body["messages"][0]["content"].as_str().unwrap_or("");
    let user = req.body["messages"][1]["content"].as_str().unwrap_or("");
    if system == prompt::ANNOTATE_SYSTEM {
        let claim = between(user, "CLAIM:\n", "\n\nReply");
        (200, chat_reply(&json!({"factual": !claim.contains("WRONG")}).to_string()))
    } else if system == prompt::DECOMPOSE_SYSTEM {
        let answer = between(user, "ANSWER:\n", "\n\nReply");
        let parts: Vec<String> = answer.split(". ").map(|s| s.trim_end_matches('.').to_string() + ".").collect();
        (200, chat_reply(&format!("```json\n{}\n```", serde_json::to_string(&parts).unwrap())))
    } else if system == prompt::MERGE_SYSTEM {
        let claims = between(user, "CLAIMS:\n", "\n\nReply");
        let joined: Vec<&str> = claims.lines().map(|l| l.trim_start_matches("- ")).collect();
        (200, chat_reply(&format!("In short: {}", joined.join(" "))))
    } else {
        (400, r#"{"error":"unknown prompt"}"#.into())
    }
}

fn http(mock: &Mock, path: &str) -> HttpConfig {
    HttpConfig::new("mock-model").with_endpoint(mock.url(path))
}

fn record() -> AnswerRecord {
    AnswerRecord {
        query: QueryItem {
            id: "q1".into(),
            text: "Where is the Eiffel tower?".into(),
            group: Some("geo".into()),
            embedding: None,
        },
        documents: vec![
            DocumentItem {
                id: "d1".into(),
                text: "The Eiffel tower is in Paris, France.".into(),
                embedding: None,
            },
            DocumentItem {
                id: "d2".into(),
                text: "Paris is the capital of France.".into(),
                embedding: None,
            },
        ],
        claims: vec![
            ClaimRecord::new("c1", "The tower is in Paris."),
            ClaimRecord::new("c2", "WRONG: it is in Rome."),
        ],
        raw_answer: None,
        ground_truth: Some("The Eiffel tower is in Paris.".into()),
    }
}

#[test]
fn embeddings_are_reordered_by_index_and_authenticated() {
    std::env::set_var("MOCK_KEY_EMBED", "s3cret");
    let mock = Mock::start(openai_like);
    let mut cfg = http(&mock, "embeddings");
    cfg.credential_env = "MOCK_KEY_EMBED".into();
    let provider = EmbeddingProviderConfig::ExternalHttp { http: cfg, dim: Some(4) }.build().unwrap();

    let mut remote = record();
    score_claims(&mut remote, provider.as_ref()).unwrap();

    let mut local = record();
    local.query.embedding = Some(EmbeddingVector::new(toy_vector(&local.query.text)).unwrap());
    for d in &mut local.documents {
        d.embedding = Some(EmbeddingVector::new(toy_vector(&d.text)).unwrap());
    }
    for c in &mut local.claims {
        c.embedding = Some(EmbeddingVector::new(toy_vector(&c.text)).unwrap());
    }
    score_claims(&mut local, provider.as_ref()).unwrap();

    for (r, l) in remote.claims.iter().zip(&local.claims) {
        assert_eq!(r.relevance, l.relevance);
    }
    let reqs = mock.requests();
    assert_eq!(reqs.len(), 1, "one batch for the whole record");
    assert_eq!(reqs[0].authorization.as_deref(), Some("Bearer s3cret"));
    assert_eq!(reqs[0].body["model"], "mock-model");
    assert_eq!(reqs[0].body["input"].as_array().unwrap().len(), 5);
}

#[test]
fn no_key_means_no_authorization_header() {
    let mock = Mock::start(openai_like);
    let mut cfg = http(&mock, "embeddings");
    cfg.credential_env = "MOCK_KEY_UNSET_FOR_TEST".into();
    let provider = EmbeddingProviderConfig::ExternalHttp { http: cfg, dim: None }.build().unwrap();
    provider.embed("hello").unwrap();
    assert_eq!(mock.requests()[0].authorization, None);
}

#[test]
fn wrong_dimension_is_rejected() {
    let mock = Mock::start(openai_like);
    let provider = EmbeddingProviderConfig::ExternalHttp {
        http: http(&mock, "embeddings"),
        dim: Some(8),
    }
    .build()
    .unwrap();
    let mut r = record();
    let err = score_claims(&mut r, provider.as_ref()).unwrap_err();
    assert!(err.to_string().contains("q1"), "{err}");
}

#[test]
fn http_errors_surface_status() {
    let mock = Mock::start(|_| (401, r#"{"error":"bad key"}"#.into()));
    let provider = EmbeddingProviderConfig::ExternalHttp {
        http: http(&mock, "embeddings"),
        dim: None,
    }
    .build()
    .unwrap();
    let err = provider.embed("x").unwrap_err();
    assert!(matches!(err, Error::Backend(_)), "{err:?}");
    assert!(err.to_string().contains("401"), "{err}");
}

#[test]
fn malformed_embedding_payloads_are_rejected() {
    for payload in [
        r#"{"data":[{"index":5,"embedding":[1.0]}]}"#,
        r#"{"data":[]}"#,
        r#"{"nope":1}"#,
    ] {
        let mock = Mock::start(move |_| (200, payload.to_string()));
        let provider = EmbeddingProviderConfig::ExternalHttp {
            http: http(&mock, "embeddings"),
            dim: None,
        }
        .build()
        .unwrap();
        assert!(provider.embed("x").is_err(), "{payload}");
    }
}

#[test]
fn llm_annotator_labels_claims() {
    let mock = Mock::start(openai_like);
    let annotator = AnnotatorConfig::ExternalLlm {
        http: http(&mock, "chat/completions"),
        prompt_template: None,
    }
    .build()
    .unwrap();
    let labeled = annotator.annotate_record(&record()).unwrap();
    let labels: Vec<Label> = labeled.claims.iter().map(|c| c.label).collect();
    assert_eq!(labels, vec![Label::Factual, Label::Nonfactual]);

    let reqs = mock.requests();
    assert_eq!(reqs.len(), 2);
    for r in &reqs {
        assert_eq!(r.body["temperature"], 0);
        let user = r.body["messages"][1]["content"].as_str().unwrap();
        assert!(user.contains("The Eiffel tower is in Paris."));
        assert!(user.contains("(d1) The Eiffel tower is in Paris, France."));
    }
}

#[test]
fn free_text_verdict_is_an_error_naming_the_claim() {
    let mock = Mock::start(|_| (200, chat_reply("Yes, that is factual.")));
    let annotator = AnnotatorConfig::ExternalLlm {
        http: http(&mock, "chat/completions"),
        prompt_template: None,
    }
    .build()
    .unwrap();
    let err = annotator.annotate_record(&record()).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("q1") && msg.contains("c1"), "{msg}");
}

#[test]
fn custom_template_is_used() {
    let mock = Mock::start(|_| (200, chat_reply(r#"{"factual": true}"#)));
    let annotator = AnnotatorConfig::ExternalLlm {
        http: http(&mock, "chat/completions"),
        prompt_template: Some("Judge: {claim} given {ground_truth}".into()),
    }
    .build()
    .unwrap();
    annotator.annotate_record(&record()).unwrap();
    let user = mock.requests()[0].body["messages"][1]["content"].as_str().unwrap().to_string();
    assert_eq!(user, "Judge: The tower is in Paris. given The Eiffel tower is in Paris.");
}

#[test]
fn llm_decompose_and_merge() {
    let mock = Mock::start(openai_like);
    let claims = pipeline::decompose(
        "Paris is in France. It has the Eiffel tower.",
        &DecomposeBackend::ExternalLlm {
            http: http(&mock, "chat/completions"),
        },
    )
    .unwrap();
    let texts: Vec<(&str, &str)> = claims.iter().map(|c| (c.id.as_str(), c.text.as_str())).collect();
    assert_eq!(texts, vec![("c1", "Paris is in France."), ("c2", "It has the Eiffel tower.")]);

    let merged = pipeline::merge(
        &claims,
        &MergeBackend::ExternalLlm {
            http: http(&mock, "chat/completions"),
        },
    )
    .unwrap();
    assert_eq!(merged, "In short: Paris is in France. It has the Eiffel tower.");
    assert_eq!(
        pipeline::merge(&[], &MergeBackend::ExternalLlm { http: http(&mock, "chat/completions") }).unwrap(),
        ""
    );
    assert_eq!(mock.requests().len(), 2, "empty merge makes no request");
}

#[test]
fn in_flight_requests_are_bounded() {
    let mock = Mock::start_with_delay(openai_like, Duration::from_millis(30));
    let mut chat = http(&mock, "chat/completions");
    chat.max_in_flight = 2;
    let pipeline = Pipeline::new(PipelineConfig {
        annotator: AnnotatorConfig::ExternalLlm {
            http: chat,
            prompt_template: None,
        },
        concurrency: 6,
        ..PipelineConfig::default()
    })
    .unwrap();
    let records: Vec<AnswerRecord> = (0..6)
        .map(|i| {
            let mut r = record();
            r.query.id = format!("q{i}");
            r
        })
        .collect();
    let out = pipeline.prepare(&records, true).unwrap();
    assert_eq!(out.len(), 6);
    assert!(out.iter().all(|r| r.claims[1].label == Label::Nonfactual));
    assert_eq!(mock.requests().len(), 12);
    let peak = mock.peak_in_flight.load(Ordering::SeqCst);
    assert!(peak <= 2, "peak in-flight {peak}");
}

#[test]
fn cli_reads_base_url_and_key_from_environment() {
    let mock = Mock::start(openai_like);
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("cal.jsonl");
    let lines: Vec<String> = (0..4)
        .map(|i| {
            let mut r = record();
            r.query.id = format!("q{i}");
            serde_json::to_string(&r).unwrap()
        })
        .collect();
    std::fs::write(&data, lines.join("\n")).unwrap();
    let out = dir.path().join("calib.json");
    let status = Command::new(env!("CARGO_BIN_EXE_conformal-claims"))
        .args(["calibrate", "--alpha", "0.5", "--provider", "external-http", "--embedding-model", "emb"])
        .args(["--annotator", "external-llm", "--llm-model", "judge", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&out)
        .env("CONFORMAL_CLAIMS_API_BASE", &mock.base)
        .env("CONFORMAL_CLAIMS_API_KEY", "from-env")
        .status()
        .unwrap();
    assert!(status.success());
    let calib: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(calib["annotator"], "external_llm");
    assert_eq!(calib["provider"], "external_http");
    let reqs = mock.requests();
    assert!(reqs.iter().any(|r| r.path == "/v1/embeddings"));
    assert!(reqs.iter().any(|r| r.path == "/v1/chat/completions"));
    assert!(reqs.iter().all(|r| r.authorization.as_deref() == Some("Bearer from-env")));
    assert!(!std::fs::read_to_string(&out).unwrap().contains("from-env"), "credential leaked into output");
}

#[test]
fn cli_without_base_url_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_conformal-claims"))
        .args(["calibrate", "--provider", "external-http", "--embedding-model", "emb", "--data"])
        .arg(env!("CARGO_MANIFEST_DIR").to_string() + "/data/toy.jsonl")
        .arg("--out")
        .arg(dir.path().join("c.json"))
        .env_remove("CONFORMAL_CLAIMS_API_BASE")
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(2));
}
