//! Shared test support: a minimal in-process HTTP embedding server and
//! deterministic fixture generators.

#![allow(dead_code)]

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

/// How the mock embedding endpoint behaves.
#[derive(Clone)]
pub enum MockBehavior {
    /// Embed each text from its token content: dim-4 rows
    /// `[#good, #bad, tokens/10, 1.0]`.
    TextFeatures,
    /// Serve these rows in arrival order across all batches.
    Fixed(Vec<Vec<f64>>),
    /// Always answer with this HTTP status and an empty body.
    AlwaysStatus(u16),
    /// Answer rows of differing widths inside one batch.
    MixedWidths,
    /// Return one embedding fewer than requested.
    DropOne,
    /// Fail with 500 for the first `n` requests, then behave like
    /// `TextFeatures`.
    FailFirst(usize),
}

pub struct MockServer {
    pub url: String,
    requests: Arc<AtomicUsize>,
}

impl MockServer {
    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

/// Start the server on an ephemeral port. The listener thread lives for
/// the rest of the test process.
pub fn spawn_mock_server(behavior: MockBehavior) -> MockServer {
    let listener = TcpListener::bind("127.0.0.1:0").expect("bind mock server");
    let addr = listener.local_addr().unwrap();
    let requests = Arc::new(AtomicUsize::new(0));
    let served = Arc::new(AtomicUsize::new(0));
    let counter = Arc::clone(&requests);
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            let request_no = counter.fetch_add(1, Ordering::SeqCst);
            let _ = handle_connection(&mut stream, &behavior, request_no, &served);
        }
    });
    MockServer {
        url: format!("http://{addr}/embed"),
        requests,
    }
}

fn handle_connection(
    stream: &mut TcpStream,
    behavior: &MockBehavior,
    request_no: usize,
    served: &AtomicUsize,
) -> std::io::Result<()> {
    let body = read_request_body(stream)?;
    let (status, payload) = respond(behavior, &body, request_no, served);
    let response = format!(
        "HTTP/1.1 {status}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{payload}",
        payload.len()
    );
    stream.write_all(response.as_bytes())?;
    stream.flush()
}

fn read_request_body(stream: &mut TcpStream) -> std::io::Result<Vec<u8>> {
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    let header_end = loop {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            return Ok(Vec::new());
        }
        buf.extend_from_slice(&chunk[..n]);
        if let Some(pos) = find_header_end(&buf) {
            break pos;
        }
    };
    let headers = String::from_utf8_lossy(&buf[..header_end]).to_string();
    let content_length: usize = headers
        .lines()
        .find_map(|line| {
            let (name, value) = line.split_once(':')?;
            name.eq_ignore_ascii_case("content-length")
                .then(|| value.trim().parse().ok())?
        })
        .unwrap_or(0);
    let mut body: Vec<u8> = buf[header_end + 4..].to_vec();
    while body.len() < content_length {
        let n = stream.read(&mut chunk)?;
        if n == 0 {
            break;
        }
        body.extend_from_slice(&chunk[..n]);
    }
    Ok(body)
}

fn find_header_end(buf: &[u8]) -> Option<usize> {
    buf.windows(4).position(|w| w == b"\r\n\r\n")
}

pub fn text_features(text: &str) -> Vec<f64> {
    let tokens: Vec<&str> = text.split_whitespace().collect();
    let good = tokens.iter().filter(|t| **t == "good").count() as f64;
    let bad = tokens.iter().filter(|t| **t == "bad").count() as f64;
    vec![good, bad, tokens.len() as f64 / 10.0, 1.0]
}

fn respond(
    behavior: &MockBehavior,
    body: &[u8],
    request_no: usize,
    served: &AtomicUsize,
) -> (String, String) {
    let parsed: serde_json::Value = match serde_json::from_slice(body) {
        Ok(v) => v,
        Err(_) => serde_json::json!({"input": []}),
    };
    let inputs: Vec<String> = parsed["input"]
        .as_array()
        .map(|a| {
            a.iter()
                .map(|v| v.as_str().unwrap_or_default().to_string())
                .collect()
        })
        .unwrap_or_default();

    let ok = |rows: Vec<Vec<f64>>| {
        (
            "200 OK".to_string(),
            serde_json::json!({ "embeddings": rows }).to_string(),
        )
    };

    match behavior {
        MockBehavior::TextFeatures => ok(inputs.iter().map(|t| text_features(t)).collect()),
        MockBehavior::Fixed(rows) => {
            let start = served.fetch_add(inputs.len(), Ordering::SeqCst);
            ok(inputs
                .iter()
                .enumerate()
                .map(|(i, _)| rows[(start + i) % rows.len()].clone())
                .collect())
        }
        MockBehavior::AlwaysStatus(code) => (format!("{code} Error"), String::new()),
        MockBehavior::MixedWidths => ok(inputs
            .iter()
            .enumerate()
            .map(|(i, _)| vec![1.0; 3 + i % 2])
            .collect()),
        MockBehavior::DropOne => {
            let mut rows: Vec<Vec<f64>> = inputs.iter().map(|t| text_features(t)).collect();
            rows.pop();
            ok(rows)
        }
        MockBehavior::FailFirst(n) => {
            if request_no < *n {
                ("500 Internal Server Error".to_string(), String::new())
            } else {
                ok(inputs.iter().map(|t| text_features(t)).collect())
            }
        }
    }
}

/// An endpoint that nothing listens on.
pub fn unreachable_endpoint() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    drop(listener);
    format!("http://{addr}/embed")
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_context-lens")
}

pub fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

/// A labeled corpus whose texts predict the label through the mock
/// embedding features: label-1 docs say "bad", label-0 docs say "good".
/// Ids listed in `flips` get the opposite label, so a probe trained on
/// the embeddings will disagree with exactly those annotations.
pub fn write_sentiment_corpus(path: &Path, n: usize, flips: &[usize]) -> Vec<String> {
    use std::fmt::Write as _;
    let mut out = String::new();
    let mut ids = Vec::new();
    for i in 0..n {
        let hateful = i % 2 == 1;
        let word = if hateful { "bad" } else { "good" };
        let text = format!(
            "{word} comment number {i} that is {word} and rather {word} overall {}",
            "pad ".repeat(i % 3)
        );
        let label = if flips.contains(&i) {
            !hateful
        } else {
            hateful
        };
        let id = format!("doc{i:04}");
        writeln!(
            out,
            r#"{{"id":"{id}","text":"{}","hateful":{label}}}"#,
            text.trim_end()
        )
        .unwrap();
        ids.push(id);
    }
    std::fs::write(path, out).unwrap();
    ids
}

/// Run the CLI binary with the given args and environment overrides.
pub fn run_cli(args: &[&str], envs: &[(&str, &str)]) -> std::process::Output {
    let mut command = std::process::Command::new(bin());
    command.args(args);
    command.env_remove("CONTEXT_LENS_CONFIG");
    for (key, value) in envs {
        command.env(key, value);
    }
    command.output().expect("run context-lens")
}
