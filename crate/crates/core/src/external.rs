//! Client for a remote captioning model.
//!
//! Each request carries the instruction text and the series plot as a
//! base64 PNG. Failures retry with exponential backoff up to a cap; a
//! record that still fails is reported as an error entry, never fabricated.

use std::sync::mpsc;
use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Environment variables consulted by `ExternalConfig::from_env`.
pub const ENDPOINT_ENV: &str = "TSFUSE_CAPTION_ENDPOINT";
pub const API_KEY_ENV: &str = "TSFUSE_CAPTION_API_KEY";
pub const MODEL_ENV: &str = "TSFUSE_CAPTION_MODEL";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExternalConfig {
    pub endpoint: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
    /// Bounded number of in-flight requests.
    pub parallelism: usize,
}

impl ExternalConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        ExternalConfig {
            endpoint: endpoint.into(),
            api_key: None,
            model: None,
            max_retries: 3,
            initial_backoff_ms: 250,
            timeout_secs: 30,
            parallelism: 4,
        }
    }

    /// Reads the endpoint and credentials from the environment; fails
    /// before any network activity when the endpoint is unset.
    pub fn from_env() -> Result<Self> {
        let endpoint = std::env::var(ENDPOINT_ENV).map_err(|_| {
            Error::config(format!(
                "captioner endpoint not configured: set {ENDPOINT_ENV}"
            ))
        })?;
        let mut cfg = ExternalConfig::new(endpoint);
        cfg.api_key = std::env::var(API_KEY_ENV).ok();
        cfg.model = std::env::var(MODEL_ENV).ok();
        Ok(cfg)
    }
}

#[derive(Debug, Serialize)]
struct CaptionRequest<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<&'a str>,
    instruction: &'a str,
    image_base64: String,
}

#[derive(Debug, Deserialize)]
struct CaptionResponse {
    caption: String,
}

/// One captioning job: the sampled instruction plus the rendered plot.
#[derive(Debug, Clone)]
pub struct CaptionJob {
    pub instruction: String,
    pub image_png: Vec<u8>,
}

pub struct ExternalCaptioner {
    config: ExternalConfig,
    client: reqwest::blocking::Client,
}

impl ExternalCaptioner {
    pub fn new(config: ExternalConfig) -> Result<Self> {
        if config.endpoint.is_empty() {
            return Err(Error::config("captioner endpoint not configured"));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| Error::Captioner(e.to_string()))?;
        Ok(ExternalCaptioner { config, client })
    }

    pub fn config(&self) -> &ExternalConfig {
        &self.config
    }

    fn request_once(&self, job: &CaptionJob) -> Result<String> {
        let body = CaptionRequest {
            model: self.config.model.as_deref(),
            instruction: &job.instruction,
            image_base64: base64::engine::general_purpose::STANDARD.encode(&job.image_png),
        };
        let mut req = self.client.post(&self.config.endpoint).json(&body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Error::Captioner(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(Error::Captioner(format!("status {}", resp.status())));
        }
        let parsed: CaptionResponse = resp.json().map_err(|e| Error::Captioner(e.to_string()))?;
        if parsed.caption.is_empty() {
            return Err(Error::Captioner("empty caption in response".into()));
        }
        Ok(parsed.caption)
    }

    /// Caption one job, retrying with exponential backoff.
    pub fn caption(&self, job: &CaptionJob) -> Result<String> {
        let mut backoff = self.config.initial_backoff_ms;
        let mut last_err = None;
        for attempt in 0..=self.config.max_retries {
            match self.request_once(job) {
                Ok(caption) => return Ok(caption),
                Err(e) => {
                    last_err = Some(e);
                    if attempt < self.config.max_retries {
                        std::thread::sleep(Duration::from_millis(backoff));
                        backoff = backoff.saturating_mul(2);
                    }
                }
            }
        }
        Err(last_err.unwrap_or_else(|| Error::Captioner("no attempts made".into())))
    }

    /// Caption many jobs with at most `parallelism` in flight; results come
    /// back in job order so the caller can write them through one writer.
    pub fn caption_batch(&self, jobs: Vec<CaptionJob>) -> Vec<Result<String>> {
        let n = jobs.len();
        if n == 0 {
            return Vec::new();
        }
        let workers = self.config.parallelism.max(1).min(n);
        let (job_tx, job_rx) = mpsc::channel::<(usize, CaptionJob)>();
        let job_rx = std::sync::Arc::new(std::sync::Mutex::new(job_rx));
        let (res_tx, res_rx) = mpsc::channel::<(usize, Result<String>)>();
        for (i, job) in jobs.into_iter().enumerate() {
            job_tx.send((i, job)).expect("receiver alive");
        }
        drop(job_tx);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                let rx = job_rx.clone();
                let tx = res_tx.clone();
                scope.spawn(move || loop {
                    let next = rx.lock().expect("job queue lock").recv();
                    match next {
                        Ok((i, job)) => {
                            let out = self.caption(&job);
                            if tx.send((i, out)).is_err() {
                                break;
                            }
                        }
                        Err(_) => break,
                    }
                });
            }
            drop(res_tx);
            let mut results: Vec<Option<Result<String>>> = (0..n).map(|_| None).collect();
            for (i, r) in res_rx {
                results[i] = Some(r);
            }
            results
                .into_iter()
                .map(|r| r.unwrap_or_else(|| Err(Error::Captioner("worker died".into()))))
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    /// Minimal HTTP/1.1 captioner stand-in for tests.
    fn spawn_mock(responder: impl Fn(usize) -> (u16, String) + Send + 'static) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let mut count = 0usize;
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).is_err() || line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        content_len = v.trim().parse().unwrap_or(0);
                    }
                }
                let mut body = vec![0u8; content_len];
                let _ = reader.read_exact(&mut body);
                let (status, payload) = responder(count);
                count += 1;
                let reply = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                    payload.len()
                );
                let _ = stream.write_all(reply.as_bytes());
            }
        });
        format!("http://{addr}/caption")
    }

    fn job() -> CaptionJob {
        CaptionJob {
            instruction: "describe".into(),
            image_png: vec![1, 2, 3],
        }
    }

    #[test]
    fn endpoint_unset_fails_before_network() {
        std::env::remove_var(ENDPOINT_ENV);
        let err = ExternalConfig::from_env().unwrap_err();
        assert!(err.to_string().contains(ENDPOINT_ENV));
    }

    #[test]
    fn mock_endpoint_round_trip() {
        let url = spawn_mock(|_| (200, r#"{"caption":"a canned caption"}"#.to_string()));
        let mut cfg = ExternalConfig::new(url);
        cfg.max_retries = 0;
        let client = ExternalCaptioner::new(cfg).unwrap();
        let caption = client.caption(&job()).unwrap();
        assert_eq!(caption, "a canned caption");
    }

    #[test]
    fn retries_then_succeeds() {
        let url = spawn_mock(|n| {
            if n < 2 {
                (500, r#"{"error":"busy"}"#.to_string())
            } else {
                (200, r#"{"caption":"third time lucky"}"#.to_string())
            }
        });
        let mut cfg = ExternalConfig::new(url);
        cfg.max_retries = 3;
        cfg.initial_backoff_ms = 1;
        let client = ExternalCaptioner::new(cfg).unwrap();
        assert_eq!(client.caption(&job()).unwrap(), "third time lucky");
    }

    #[test]
    fn failure_cap_reports_error() {
        let url = spawn_mock(|_| (500, r#"{"error":"down"}"#.to_string()));
        let mut cfg = ExternalConfig::new(url);
        cfg.max_retries = 2;
        cfg.initial_backoff_ms = 1;
        let client = ExternalCaptioner::new(cfg).unwrap();
        let err = client.caption(&job()).unwrap_err();
        assert!(matches!(err, Error::Captioner(_)));
    }

    #[test]
    fn batch_preserves_order_with_bounded_workers() {
        let url = spawn_mock(|n| (200, format!(r#"{{"caption":"reply {n}"}}"#)));
        let mut cfg = ExternalConfig::new(url);
        cfg.max_retries = 0;
        cfg.parallelism = 2;
        let client = ExternalCaptioner::new(cfg).unwrap();
        let jobs: Vec<CaptionJob> = (0..6).map(|_| job()).collect();
        let out = client.caption_batch(jobs);
        assert_eq!(out.len(), 6);
        for r in out {
            assert!(r.unwrap().starts_with("reply "));
        }
    }
}
