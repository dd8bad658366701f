use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::DistributionReceipt;
use crate::executor::{format_duration_ms, RunRecord};
use crate::store::write_atomic;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Audience {
    Team,
    Users,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NotificationMessage {
    pub audience: Audience,
    pub subject: String,
    pub body: String,
    pub links: Vec<String>,
    pub recipients: Vec<String>,
}

impl NotificationMessage {
    /// `To:` / `Subject:` headers, a blank line, then the body.
    pub fn render_for(&self, recipient: &str) -> String {
        format!("To: {recipient}\nSubject: {}\n\n{}", self.subject, self.body)
    }
}

#[derive(Debug, Error)]
pub enum NotifyError {
    #[error("webhook request failed: {0}")]
    Http(String),
    #[error("webhook returned HTTP {0}")]
    Status(u16),
    #[error("outbox {dir}: {source}")]
    Outbox {
        dir: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("no recipients configured")]
    NoRecipients,
}

/// `<pipeline> #<n> <STATUS> after <duration>`
pub fn team_message(record: &RunRecord) -> String {
    format!(
        "{} #{} {} after {}",
        record.pipeline,
        record.run_number,
        record.status,
        format_duration_ms(record.duration_ms)
    )
}

/// Posts `{"text": ...}` to a chat-style incoming webhook.
pub fn notify_team(webhook: &str, record: &RunRecord) -> Result<(), NotifyError> {
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .map_err(|e| NotifyError::Http(e.to_string()))?;
    let resp = client
        .post(webhook)
        .json(&serde_json::json!({ "text": team_message(record) }))
        .send()
        .map_err(|e| NotifyError::Http(e.to_string()))?;
    if resp.status().is_success() {
        Ok(())
    } else {
        Err(NotifyError::Status(resp.status().as_u16()))
    }
}

fn users_message(pipeline: &str, run_number: u64, version: &str, receipt: &DistributionReceipt, recipients: &[String]) -> NotificationMessage {
    NotificationMessage {
        audience: Audience::Users,
        subject: format!("{pipeline} build {version} is ready for testing"),
        body: format!(
            "A new build of {pipeline} (run #{run_number}, version {version}) is available.\n\n\
             Download: {}\nSHA-256: {}\n",
            receipt.download_url, receipt.sha256
        ),
        links: vec![receipt.download_url.clone()],
        recipients: recipients.to_vec(),
    }
}

/// Writes one `<run_number>-<i>.msg` file per recipient (1-based `i`),
/// replacing any from an earlier attempt of the same run.
pub fn notify_users(
    recipients: &[String],
    receipt: &DistributionReceipt,
    outbox_dir: &Path,
    pipeline: &str,
    run_number: u64,
    version: &str,
) -> Result<Vec<PathBuf>, NotifyError> {
    if recipients.is_empty() {
        return Err(NotifyError::NoRecipients);
    }
    let outbox_err = |source| NotifyError::Outbox { dir: outbox_dir.to_path_buf(), source };
    std::fs::create_dir_all(outbox_dir).map_err(outbox_err)?;
    let message = users_message(pipeline, run_number, version, receipt, recipients);
    let mut paths = Vec::with_capacity(recipients.len());
    for (i, recipient) in recipients.iter().enumerate() {
        let path = outbox_dir.join(format!("{run_number}-{}.msg", i + 1));
        write_atomic(&path, message.render_for(recipient).as_bytes()).map_err(outbox_err)?;
        paths.push(path);
    }
    Ok(paths)
}
