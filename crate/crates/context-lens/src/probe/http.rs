//! Blocking HTTP client for an embedding endpoint.
//!
//! Protocol per batch: POST `{"model": <string>, "input": [<texts>]}`,
//! expect `{"embeddings": [[f64, …], …]}` in request order. Transient
//! failures (connect errors, timeouts, 408/429/5xx) are retried with
//! exponential backoff; anything else fails immediately.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{DocEmbeddingSet, ProbeError, ProviderTag};

#[derive(Debug, Serialize)]
struct EmbeddingRequest<'a> {
    model: &'a str,
    input: &'a [String],
}

#[derive(Debug, Deserialize)]
struct EmbeddingResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Retry knobs. Three attempts total by default, doubling the delay.
#[derive(Debug, Clone, Copy)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub initial_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 3,
            initial_delay: Duration::from_millis(250),
        }
    }
}

fn is_transient_status(status: reqwest::StatusCode) -> bool {
    status.is_server_error()
        || status == reqwest::StatusCode::REQUEST_TIMEOUT
        || status == reqwest::StatusCode::TOO_MANY_REQUESTS
}

/// Fetch embeddings for `texts` in batches of `batch_size`, labeling rows
/// with `ids`. Results always come back in input order.
pub fn fetch_embeddings_http(
    endpoint: &str,
    ids: &[String],
    texts: &[String],
    batch_size: usize,
    model: &str,
) -> Result<DocEmbeddingSet, ProbeError> {
    fetch_embeddings_http_with(
        endpoint,
        ids,
        texts,
        batch_size,
        model,
        RetryPolicy::default(),
    )
}

pub fn fetch_embeddings_http_with(
    endpoint: &str,
    ids: &[String],
    texts: &[String],
    batch_size: usize,
    model: &str,
    retry: RetryPolicy,
) -> Result<DocEmbeddingSet, ProbeError> {
    assert_eq!(ids.len(), texts.len(), "ids and texts must align");
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(60))
        .build()
        .map_err(|e| ProbeError::Transport(e.to_string()))?;

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(texts.len());
    let mut dim: Option<usize> = None;
    for (batch_idx, chunk) in texts.chunks(batch_size).enumerate() {
        let request = EmbeddingRequest {
            model,
            input: chunk,
        };
        let response = send_with_retry(&client, endpoint, &request, retry)?;
        let parsed: EmbeddingResponse = response.json().map_err(|e| ProbeError::Protocol {
            batch: batch_idx,
            reason: format!("bad response body: {e}"),
        })?;
        if parsed.embeddings.len() != chunk.len() {
            return Err(ProbeError::Protocol {
                batch: batch_idx,
                reason: format!(
                    "sent {} texts, got {} embeddings",
                    chunk.len(),
                    parsed.embeddings.len()
                ),
            });
        }
        for row in parsed.embeddings {
            match dim {
                None => dim = Some(row.len()),
                Some(d) if d != row.len() => {
                    return Err(ProbeError::Protocol {
                        batch: batch_idx,
                        reason: format!("embedding width {} != {}", row.len(), d),
                    })
                }
                Some(_) => {}
            }
            rows.push(row);
        }
    }
    DocEmbeddingSet::new(ids.to_vec(), rows, ProviderTag::Http, model.to_string())
}

fn send_with_retry(
    client: &reqwest::blocking::Client,
    endpoint: &str,
    request: &EmbeddingRequest<'_>,
    retry: RetryPolicy,
) -> Result<reqwest::blocking::Response, ProbeError> {
    let mut delay = retry.initial_delay;
    let mut last_error = String::new();
    for attempt in 0..retry.max_attempts {
        if attempt > 0 {
            std::thread::sleep(delay);
            delay *= 2;
        }
        match client.post(endpoint).json(request).send() {
            Ok(response) if response.status().is_success() => return Ok(response),
            Ok(response) if is_transient_status(response.status()) => {
                last_error = format!("status {}", response.status());
            }
            Ok(response) => {
                return Err(ProbeError::Transport(format!(
                    "status {}",
                    response.status()
                )))
            }
            Err(e) => last_error = e.to_string(),
        }
    }
    Err(ProbeError::Transport(format!(
        "{last_error} (after {} attempts)",
        retry.max_attempts
    )))
}
