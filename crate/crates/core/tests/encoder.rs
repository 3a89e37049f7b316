use std::collections::{HashSet, VecDeque};
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use star_core::dryrun::DryRunTransport;
use star_core::encoder::{EmbeddingCache, EncoderBackendKind, ReferenceEncoder, RemoteEncoder};
use star_core::transport::{HttpRequest, HttpTransport, RetryPolicy, Transport};
use star_core::{EncoderConfig, Error, Gateway};

#[derive(Debug, Clone)]
struct Received {
    path: String,
    authorization: Option<String>,
    body: Value,
}

/// Minimal HTTP/1.1 server answering each connection with the next scripted
/// `(status, body)` pair.
struct MockServer {
    url: String,
    received: Arc<Mutex<Vec<Received>>>,
}

impl MockServer {
    fn start(script: Vec<(u16, String)>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let received = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&received);
        let mut script: VecDeque<(u16, String)> = script.into();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { return };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).unwrap_or(0) == 0 {
                    continue;
                }
                let path = request_line
                    .split_whitespace()
                    .nth(1)
                    .unwrap_or("")
                    .to_string();
                let mut length = 0;
                let mut authorization = None;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    let line = line.trim_end();
                    if line.is_empty() {
                        break;
                    }
                    let (name, value) = line.split_once(':').unwrap();
                    match name.to_ascii_lowercase().as_str() {
                        "content-length" => length = value.trim().parse().unwrap(),
                        "authorization" => authorization = Some(value.trim().to_string()),
                        _ => {}
                    }
                }
                let mut body = vec![0; length];
                reader.read_exact(&mut body).unwrap();
                log.lock().unwrap().push(Received {
                    path,
                    authorization,
                    body: serde_json::from_slice(&body).unwrap_or(Value::Null),
                });
                let (status, text) = script
                    .pop_front()
                    .unwrap_or((500, "script exhausted".into()));
                let response = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{text}",
                    text.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        Self { url, received }
    }

    fn received(&self) -> Vec<Received> {
        self.received.lock().unwrap().clone()
    }
}

fn fast_retry() -> RetryPolicy {
    RetryPolicy {
        attempts: 3,
        base_delay: Duration::from_millis(1),
        factor: 2,
    }
}

fn cosine(a: &star_core::Embedding, b: &star_core::Embedding) -> f64 {
    a.cosine(b).unwrap()
}

fn grams(text: &str) -> HashSet<String> {
    let chars: Vec<char> = text.to_lowercase().chars().collect();
    chars.windows(3).map(|w| w.iter().collect()).collect()
}

#[test]
fn lexical_overlap_orders_similarity() {
    let g = Gateway::reference(512, 0).unwrap();
    let france = g.encode("population of france").unwrap();
    let spain = g.encode("population of spain").unwrap();
    let noise = g.encode("zx qq ww").unwrap();
    assert!(cosine(&france, &spain) > cosine(&france, &noise));
}

#[test]
fn disjoint_grams_are_near_orthogonal() {
    let enc = ReferenceEncoder::new(512, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let alphabet: Vec<char> = "abcdefghijklmnopqrstuvwxyz".chars().collect();
    let word = |rng: &mut ChaCha8Rng| -> String {
        (0..8)
            .map(|_| alphabet[rng.random_range(0..alphabet.len())])
            .collect()
    };
    let mut found = None;
    for _ in 0..10_000 {
        let a = word(&mut rng);
        let b = word(&mut rng);
        let (ga, gb) = (grams(&a), grams(&b));
        if !ga.is_disjoint(&gb) {
            continue;
        }
        let slots: HashSet<usize> = ga.iter().map(|g| enc.slot(g).0).collect();
        if gb.iter().all(|g| !slots.contains(&enc.slot(g).0)) {
            found = Some((a, b));
            break;
        }
    }
    let (a, b) = found.expect("a collision-free pair exists among short random strings");
    let c = cosine(&enc.embed(&a).unwrap(), &enc.embed(&b).unwrap());
    assert!(c.abs() < 0.05, "cosine {c}");
}

#[test]
fn gateway_basics() {
    let g = Gateway::reference(64, 0).unwrap();
    assert_eq!(g.encode("abc").unwrap(), g.encode("abc").unwrap());
    assert!(matches!(g.encode(""), Err(Error::EmptyInput)));
    let batch = g.encode_batch(&["a", "b"]).unwrap();
    assert_eq!(batch, vec![g.encode("a").unwrap(), g.encode("b").unwrap()]);
    match g.encode_batch(&["x", "", "y"]) {
        Err(Error::Batch { index, .. }) => assert_eq!(index, 1),
        other => panic!("expected a batch error, got {other:?}"),
    }
}

#[test]
fn cache_file_survives_reopen() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/cache.jsonl");
    let mut texts: Vec<String> = vec!["alpha".into(), "beta".into(), "alpha".into()];
    texts
        .extend((0..50).map(|i| format!("row {i} of a longer table with mixed values {}", i * 37)));
    let first = Gateway::reference(32, 0)
        .unwrap()
        .with_cache(EmbeddingCache::open(&path).unwrap());
    let a = first.encode_batch(&texts).unwrap();
    assert_eq!(first.backend_texts(), 52);
    drop(first);
    let second = Gateway::reference(32, 0)
        .unwrap()
        .with_cache(EmbeddingCache::open(&path).unwrap());
    let b = second.encode_batch(&texts).unwrap();
    let bits = |v: &[star_core::Embedding]| -> Vec<Vec<u64>> {
        v.iter()
            .map(|e| e.as_slice().iter().map(|x| x.to_bits()).collect())
            .collect()
    };
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(second.backend_texts(), 0);
}

#[test]
fn chunked_remote_batches_keep_order() {
    let transport = Arc::new(DryRunTransport::new(64, 3).unwrap());
    let remote = RemoteEncoder::new("http://embed.test", transport.clone())
        .with_batch_size(32)
        .unwrap();
    let remote = Gateway::new(Arc::new(remote));
    let local = Gateway::reference(64, 3).unwrap();
    let texts: Vec<String> = (0..1000).map(|i| format!("text number {i}")).collect();
    assert_eq!(
        remote.encode_batch(&texts).unwrap(),
        local.encode_batch(&texts).unwrap()
    );
    let requests = transport.requests();
    assert_eq!(requests.len(), 32);
    let mut sizes: Vec<usize> = requests
        .iter()
        .map(|r| r.body["texts"].as_array().unwrap().len())
        .collect();
    sizes.sort();
    assert_eq!(sizes[0], 8);
    assert!(sizes[1..].iter().all(|&s| s == 32));
    assert!(transport.violations().is_empty());
}

#[test]
fn remote_dimension_is_checked() {
    let transport = Arc::new(DryRunTransport::new(16, 0).unwrap());
    let remote = RemoteEncoder::new("http://embed.test", transport).with_expected_dim(Some(32));
    let g = Gateway::new(Arc::new(remote));
    assert!(matches!(
        g.encode("abc"),
        Err(Error::DimensionMismatch { .. })
    ));
}

#[test]
fn http_transport_retries_and_sends_bearer() {
    let vector = json!({ "embeddings": [[3.0, 4.0]], "dim": 2 }).to_string();
    let server = MockServer::start(vec![
        (503, "busy".into()),
        (500, "still busy".into()),
        (200, vector),
    ]);
    let remote = RemoteEncoder::new(server.url.clone(), Arc::new(HttpTransport))
        .with_token(Some("secret".into()))
        .with_retry(fast_retry());
    let g = Gateway::new(Arc::new(remote));
    let e = g.encode("hello").unwrap();
    assert_eq!(e.as_slice(), &[0.6, 0.8]);
    let got = server.received();
    assert_eq!(got.len(), 3);
    for r in &got {
        assert_eq!(r.path, "/embed");
        assert_eq!(r.authorization.as_deref(), Some("Bearer secret"));
        assert_eq!(r.body, json!({ "texts": ["hello"] }));
    }
}

#[test]
fn http_transport_gives_up_after_attempts() {
    let server = MockServer::start(vec![
        (502, "a".into()),
        (502, "b".into()),
        (502, "c".into()),
    ]);
    let remote =
        RemoteEncoder::new(server.url.clone(), Arc::new(HttpTransport)).with_retry(fast_retry());
    match Gateway::new(Arc::new(remote)).encode("x") {
        Err(Error::Remote { status, body }) => assert_eq!((status, body.as_str()), (502, "c")),
        other => panic!("expected a remote error, got {other:?}"),
    }
    assert_eq!(server.received().len(), 3);
}

#[test]
fn unreachable_endpoint_is_a_remote_error() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}", listener.local_addr().unwrap());
    drop(listener);
    let request = HttpRequest {
        url,
        body: json!({}),
        bearer: None,
        timeout: Duration::from_secs(2),
    };
    assert!(matches!(
        HttpTransport.post_json(&request),
        Err(Error::Remote { status: 0, .. })
    ));
}

#[test]
fn config_builds_remote_gateway() {
    let cfg: EncoderConfig = serde_json::from_value(json!({
        "backend": "remote",
        "endpoint": "http://embed.test",
        "dim": 48,
        "batch_size": 4,
    }))
    .unwrap();
    assert_eq!(cfg.backend, EncoderBackendKind::Remote);
    let transport = Arc::new(DryRunTransport::new(48, 0).unwrap());
    let g = cfg.build_gateway_with(transport.clone()).unwrap();
    let local = Gateway::reference(48, 0).unwrap();
    assert_eq!(
        g.encode("same text").unwrap(),
        local.encode("same text").unwrap()
    );
    g.encode("same text").unwrap();
    assert_eq!(transport.requests().len(), 1);
    assert!(serde_json::from_value::<EncoderConfig>(json!({ "bogus": 1 })).is_err());
}

proptest! {
    #[test]
    fn cache_is_transparent(texts in prop::collection::vec("[a-z ]{1,12}", 1..20)) {
        let texts: Vec<String> = texts.into_iter().filter(|t| !t.trim().is_empty()).collect();
        prop_assume!(!texts.is_empty());
        let plain = Gateway::reference(64, 2).unwrap();
        let cached = Gateway::reference(64, 2).unwrap().with_cache(EmbeddingCache::in_memory());
        let a = plain.encode_batch(&texts).unwrap();
        let b = cached.encode_batch(&texts).unwrap();
        let c = cached.encode_batch(&texts).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&a, &c);
        let unique: HashSet<&String> = texts.iter().collect();
        prop_assert_eq!(cached.backend_texts(), unique.len());
    }

    #[test]
    fn outputs_are_unit_norm(text in "\\PC{1,40}") {
        prop_assume!(!text.trim().is_empty());
        let g = Gateway::reference(128, 0).unwrap();
        let e = g.encode(&text).unwrap();
        let n: f64 = e.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!((n - 1.0).abs() <= 1e-6);
    }
}
