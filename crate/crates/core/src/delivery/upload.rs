use std::time::Duration;

use chrono::{DateTime, Utc};
use reqwest::blocking::{multipart, Client};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Artifact;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistributionReceipt {
    pub sha256: String,
    pub download_url: String,
    pub uploaded_at: DateTime<Utc>,
    pub attempts: u32,
}

#[derive(Debug, Error)]
pub enum UploadError {
    #[error("upload failed after {attempts} attempt(s): {reason}")]
    Failed { attempts: u32, status: Option<u16>, reason: String },
    #[error("distribution endpoint returned a malformed response: {0}")]
    Protocol(String),
    #[error("cannot read artifact: {0}")]
    Io(#[from] std::io::Error),
}

impl UploadError {
    pub fn attempts(&self) -> u32 {
        match self {
            UploadError::Failed { attempts, .. } => *attempts,
            _ => 1,
        }
    }
}

/// Attempts are `1 + backoff.len()`; `backoff[i]` is the wait before retry `i + 1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RetryPolicy {
    pub backoff: Vec<Duration>,
    pub request_timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            backoff: vec![Duration::from_secs(1), Duration::from_secs(2)],
            request_timeout: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    pub fn max_attempts(&self) -> u32 {
        self.backoff.len() as u32 + 1
    }
}

#[derive(Deserialize)]
struct UploadResponse {
    download_url: String,
}

/// POSTs the artifact as multipart/form-data (`file`, `version`,
/// `checksum`). Connection errors and 5xx are retried per `policy`; 4xx is
/// permanent.
pub fn upload_artifact(
    artifact: &Artifact,
    endpoint: &str,
    api_key: Option<&str>,
    policy: &RetryPolicy,
) -> Result<DistributionReceipt, UploadError> {
    let bytes = std::fs::read(&artifact.path)?;
    let file_name = artifact
        .path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "artifact".to_string());
    let client = Client::builder()
        .timeout(policy.request_timeout)
        .build()
        .map_err(|e| UploadError::Failed { attempts: 0, status: None, reason: e.to_string() })?;

    let max = policy.max_attempts();
    let mut attempt = 0;
    loop {
        attempt += 1;
        let form = multipart::Form::new()
            .part(
                "file",
                multipart::Part::bytes(bytes.clone())
                    .file_name(file_name.clone())
                    .mime_str("application/octet-stream")
                    .expect("static mime type"),
            )
            .text("version", artifact.version_label.clone())
            .text("checksum", artifact.sha256.clone());
        let mut request = client.post(endpoint).multipart(form);
        if let Some(key) = api_key.filter(|k| !k.is_empty()) {
            request = request.bearer_auth(key);
        }
        let (status, reason, retryable) = match request.send() {
            Ok(resp) if resp.status().is_success() => {
                let body = resp.text().map_err(|e| UploadError::Protocol(e.to_string()))?;
                let parsed: UploadResponse =
                    serde_json::from_str(&body).map_err(|e| UploadError::Protocol(e.to_string()))?;
                if parsed.download_url.is_empty() {
                    return Err(UploadError::Protocol("empty download_url".to_string()));
                }
                return Ok(DistributionReceipt {
                    sha256: artifact.sha256.clone(),
                    download_url: parsed.download_url,
                    uploaded_at: Utc::now(),
                    attempts: attempt,
                });
            }
            Ok(resp) => {
                let code = resp.status();
                (Some(code.as_u16()), format!("HTTP {code}"), code.is_server_error())
            }
            Err(e) => (None, e.to_string(), e.is_connect() || e.is_timeout()),
        };
        if !retryable || attempt >= max {
            return Err(UploadError::Failed { attempts: attempt, status, reason });
        }
        let wait = policy.backoff[(attempt - 1) as usize];
        log::warn!("upload attempt {attempt}/{max} failed ({reason}); retrying in {wait:?}");
        std::thread::sleep(wait);
    }
}
