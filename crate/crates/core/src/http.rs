//! Minimal blocking JSON-over-HTTP client shared by the remote providers.

use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use serde_json::Value;
use tracing::{debug, warn};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub base_url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Total attempts per request, including the first.
    pub max_attempts: u32,
    /// Delay before the second attempt; doubles after each failure.
    pub backoff: Duration,
    pub max_in_flight: usize,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key: None,
            timeout: Duration::from_secs(60),
            max_attempts: 3,
            backoff: Duration::from_millis(500),
            max_in_flight: 4,
        }
    }
}

struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn acquire(&self) -> PermitGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        PermitGuard(self)
    }
}

struct PermitGuard<'a>(&'a Permits);

impl Drop for PermitGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub(crate) struct JsonClient {
    agent: ureq::Agent,
    config: HttpConfig,
    permits: Permits,
}

impl JsonClient {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            agent,
            permits: Permits {
                free: Mutex::new(config.max_in_flight.max(1)),
                cv: Condvar::new(),
            },
            config,
        }
    }

    /// POSTs `body` to `base_url + path`, retrying transport failures,
    /// 429 and 5xx with exponential backoff.
    pub fn post(&self, path: &str, body: &Value) -> Result<Value> {
        let url = format!("{}{}", self.config.base_url.trim_end_matches('/'), path);
        let attempts = self.config.max_attempts.max(1);
        let mut delay = self.config.backoff;
        let mut last = None;
        for attempt in 1..=attempts {
            let result = {
                let _permit = self.permits.acquire();
                self.post_once(&url, body)
            };
            match result {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < attempts => {
                    warn!(%url, attempt, error = %e, "retrying request");
                    thread::sleep(delay);
                    delay *= 2;
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.unwrap_or_else(|| Error::provider("no attempts made", false)))
    }

    fn post_once(&self, url: &str, body: &Value) -> Result<Value> {
        debug!(%url, "POST");
        let mut req = self.agent.post(url).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req
            .send(serde_json::to_vec(body)?.as_slice())
            .map_err(|e| Error::provider(format!("{url}: {e}"), true))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Error::provider(format!("{url}: reading body: {e}"), true))?;
        if !(200..300).contains(&status) {
            let retryable = status == 429 || status >= 500;
            return Err(Error::provider(format!("{url}: HTTP {status}: {text}"), retryable));
        }
        serde_json::from_str(&text)
            .map_err(|e| Error::provider(format!("{url}: invalid JSON response: {e}"), false))
    }
}
