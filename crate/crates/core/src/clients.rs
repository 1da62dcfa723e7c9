//! Shared plumbing for external services: digest-keyed fixture store,
//! retry policy, rate limiting, and an HTTP agent.
//!
//! A fixture store is a directory of `<sha256>.json` files. The digest covers
//! the request kind and its canonical JSON encoding, so a replayed request
//! finds exactly the response recorded for it.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("HTTP status {status}")]
    Http { status: u16 },
    #[error("could not decode response: {0}")]
    Decode(String),
    #[error("no {kind} fixture recorded for request digest {digest}")]
    FixtureMiss { kind: String, digest: String },
    #[error("fixture store: {0}")]
    Store(String),
}

impl ClientError {
    /// Transport failures, throttling and server errors are worth retrying.
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) => true,
            ClientError::Http { status } => *status == 429 || *status >= 500,
            _ => false,
        }
    }
}

impl From<ureq::Error> for ClientError {
    fn from(e: ureq::Error) -> Self {
        match e {
            ureq::Error::StatusCode(status) => ClientError::Http { status },
            other => ClientError::Transport(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            backoff_ms: 500,
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_attempts: 1,
            backoff_ms: 0,
        }
    }

    /// Runs `op` until it succeeds, fails with a non-retryable error, or attempts run out.
    /// The delay doubles after every failed attempt.
    pub fn run<T>(&self, mut op: impl FnMut() -> Result<T, ClientError>) -> Result<T, ClientError> {
        let attempts = self.max_attempts.max(1);
        let mut delay = self.backoff_ms;
        let mut attempt = 1;
        loop {
            match op() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    log::warn!("attempt {attempt}/{attempts} failed: {e}; retrying");
                    if delay > 0 {
                        std::thread::sleep(Duration::from_millis(delay));
                    }
                    delay = delay.saturating_mul(2);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Enforces a minimum spacing between consecutive calls.
#[derive(Debug)]
pub struct RateLimiter {
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl RateLimiter {
    pub fn new(min_interval: Duration) -> Self {
        Self {
            min_interval,
            last: Mutex::new(None),
        }
    }

    /// Blocks until the interval since the previous call has elapsed, then records this call.
    pub fn wait(&self) {
        let mut last = self.last.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_interval {
                std::thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

#[derive(Serialize)]
struct FixtureOut<'a, Q, R> {
    kind: &'a str,
    request: &'a Q,
    response: &'a R,
}

#[derive(Deserialize)]
struct FixtureIn<R> {
    response: R,
}

/// Directory of recorded request/response pairs.
#[derive(Debug, Clone)]
pub struct FixtureStore {
    dir: PathBuf,
}

impl FixtureStore {
    pub fn open(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn digest<Q: Serialize>(kind: &str, request: &Q) -> String {
        let body = serde_json::to_string(request).expect("requests serialize to JSON");
        let mut h = Sha256::new();
        h.update(kind.as_bytes());
        h.update(b"\n");
        h.update(body.as_bytes());
        hex::encode(h.finalize())
    }

    fn path_for(&self, digest: &str) -> PathBuf {
        self.dir.join(format!("{digest}.json"))
    }

    pub fn get<Q: Serialize, R: DeserializeOwned>(&self, kind: &str, request: &Q) -> Result<R, ClientError> {
        let digest = Self::digest(kind, request);
        let path = self.path_for(&digest);
        let text = match std::fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(ClientError::FixtureMiss {
                    kind: kind.to_string(),
                    digest,
                })
            }
            Err(e) => return Err(ClientError::Store(format!("{}: {e}", path.display()))),
        };
        let rec: FixtureIn<R> =
            serde_json::from_str(&text).map_err(|e| ClientError::Store(format!("{}: {e}", path.display())))?;
        Ok(rec.response)
    }

    pub fn put<Q: Serialize, R: Serialize>(&self, kind: &str, request: &Q, response: &R) -> Result<(), ClientError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| ClientError::Store(e.to_string()))?;
        let digest = Self::digest(kind, request);
        let rec = FixtureOut {
            kind,
            request,
            response,
        };
        let mut text = serde_json::to_string_pretty(&rec).map_err(|e| ClientError::Store(e.to_string()))?;
        text.push('\n');
        std::fs::write(self.path_for(&digest), text).map_err(|e| ClientError::Store(e.to_string()))
    }
}

/// Blocking HTTP agent shared by the live adapters.
pub fn http_agent(timeout: Duration) -> ureq::Agent {
    ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .build()
        .into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[derive(Serialize)]
    struct Req {
        q: String,
    }

    #[test]
    fn store_round_trip_and_miss() {
        let dir = tempfile::tempdir().unwrap();
        let store = FixtureStore::open(dir.path());
        let req = Req { q: "hello".into() };
        assert!(matches!(
            store.get::<_, String>("demo", &req),
            Err(ClientError::FixtureMiss { .. })
        ));
        store.put("demo", &req, &"world".to_string()).unwrap();
        assert_eq!(store.get::<_, String>("demo", &req).unwrap(), "world");
        // kind participates in the key
        assert!(store.get::<_, String>("other", &req).is_err());
        assert_eq!(FixtureStore::digest("demo", &req).len(), 64);
    }

    #[test]
    fn retries_only_retryable_errors() {
        let calls = Cell::new(0);
        let policy = RetryPolicy {
            max_attempts: 3,
            backoff_ms: 0,
        };
        let r: Result<(), _> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(ClientError::Transport("down".into()))
        });
        assert!(r.is_err());
        assert_eq!(calls.get(), 3);

        calls.set(0);
        let r: Result<(), _> = policy.run(|| {
            calls.set(calls.get() + 1);
            Err(ClientError::Http { status: 404 })
        });
        assert_eq!(r, Err(ClientError::Http { status: 404 }));
        assert_eq!(calls.get(), 1);

        calls.set(0);
        let r = policy.run(|| {
            calls.set(calls.get() + 1);
            if calls.get() < 2 {
                Err(ClientError::Http { status: 503 })
            } else {
                Ok(7)
            }
        });
        assert_eq!(r, Ok(7));
    }

    #[test]
    fn rate_limiter_spaces_calls() {
        let limiter = RateLimiter::new(Duration::from_millis(30));
        let start = Instant::now();
        limiter.wait();
        limiter.wait();
        limiter.wait();
        assert!(start.elapsed() >= Duration::from_millis(60));
    }
}
