//! Blocking JSON-over-HTTP with bounded retries, shared by the remote policy
//! and remote critic clients.

use std::time::Duration;

use serde::Serialize;
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct JsonClient {
    client: reqwest::blocking::Client,
    base: String,
    retries: u32,
}

impl JsonClient {
    pub(crate) fn new(endpoint: &str, timeout_ms: u64, retries: u32) -> Result<Self> {
        if timeout_ms == 0 {
            return Err(Error::config("timeout_ms", "must be > 0"));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(timeout_ms))
            .connect_timeout(Duration::from_millis(timeout_ms))
            .build()
            .map_err(|e| Error::config("endpoint", e.to_string()))?;
        Ok(JsonClient {
            client,
            base: endpoint.trim_end_matches('/').to_owned(),
            retries,
        })
    }

    /// POST `body` to `base + path`. Transport failures (refused connection,
    /// timeout) are retried; a non-200 status or a malformed body is not.
    pub(crate) fn post<B: Serialize>(&self, path: &str, body: &B) -> Result<Value> {
        let url = format!("{}{}", self.base, path);
        let mut last_error = String::new();
        let attempts = self.retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                log::debug!("retrying {url} (attempt {})", attempt + 1);
            }
            let response = match self.client.post(&url).json(body).send() {
                Ok(r) => r,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            let status = response.status();
            if status != reqwest::StatusCode::OK {
                return Err(Error::Protocol(format!("{url} returned HTTP {status}")));
            }
            let text = match response.text() {
                Ok(t) => t,
                Err(e) => {
                    last_error = e.to_string();
                    continue;
                }
            };
            return serde_json::from_str(&text)
                .map_err(|e| Error::Protocol(format!("invalid JSON body: {e}")));
        }
        Err(Error::RemoteUnavailable {
            attempts,
            last_error,
        })
    }
}
