//! Minimal JSON-over-HTTP POST with retry, shared by the remote providers.

use std::thread;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn post_json<B: Serialize + ?Sized, R: DeserializeOwned>(
    client: &reqwest::blocking::Client,
    endpoint: &str,
    body: &B,
    retries: usize,
) -> Result<R> {
    let mut last = String::new();
    for attempt in 0..=retries {
        if attempt > 0 {
            thread::sleep(Duration::from_millis(50 << attempt.min(6)));
        }
        match client.post(endpoint).json(body).send() {
            Ok(resp) if resp.status().is_server_error() => {
                last = format!("HTTP {}", resp.status());
            }
            Ok(resp) if !resp.status().is_success() => {
                return Err(Error::Provider(format!("{endpoint}: HTTP {}", resp.status())));
            }
            Ok(resp) => {
                let bytes = resp
                    .bytes()
                    .map_err(|e| Error::Provider(format!("{endpoint}: {e}")))?;
                return serde_json::from_slice(&bytes)
                    .map_err(|e| Error::Provider(format!("{endpoint}: bad response body: {e}")));
            }
            Err(e) => last = e.to_string(),
        }
        log::debug!("request to {endpoint} failed (attempt {}): {last}", attempt + 1);
    }
    Err(Error::ProviderUnreachable {
        endpoint: endpoint.to_string(),
        message: last,
    })
}
