//! Commit detection for poll triggers.

use std::process::{Command, Stdio};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default head query; `{repo}` and `{branch}` are shell-quoted on substitution.
pub const DEFAULT_HEAD_CMD: &str = "git -C {repo} rev-parse {branch}";

#[derive(Debug, Error)]
pub enum ScmError {
    #[error("repository {repo} unreachable: {stderr}")]
    Unreachable { repo: String, stderr: String },
    #[error("head query for {repo} printed no commit id")]
    EmptyHead { repo: String },
    #[error("cannot run head query: {0}")]
    Spawn(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PollState {
    pub repo: String,
    pub branch: String,
    pub last_seen_commit: Option<String>,
    pub last_poll_at: Option<DateTime<Utc>>,
}

impl PollState {
    pub fn new(repo: &str, branch: &str) -> Self {
        PollState {
            repo: repo.to_string(),
            branch: branch.to_string(),
            last_seen_commit: None,
            last_poll_at: None,
        }
    }
}

/// POSIX single-quote escaping.
pub fn shell_quote(value: &str) -> String {
    format!("'{}'", value.replace('\'', r"'\''"))
}

pub fn render_head_cmd(template: &str, repo: &str, branch: &str) -> String {
    template
        .replace("{repo}", &shell_quote(repo))
        .replace("{branch}", &shell_quote(branch))
}

/// Runs the head-query command and returns the first line of its output.
pub fn current_head(repo: &str, branch: &str, template: &str) -> Result<String, ScmError> {
    let output = Command::new("/bin/sh")
        .arg("-c")
        .arg(render_head_cmd(template, repo, branch))
        .stdin(Stdio::null())
        .output()?;
    if !output.status.success() {
        return Err(ScmError::Unreachable {
            repo: repo.to_string(),
            stderr: String::from_utf8_lossy(&output.stderr).trim().to_string(),
        });
    }
    let stdout = String::from_utf8_lossy(&output.stdout);
    let head = stdout.lines().next().unwrap_or("").trim();
    if head.is_empty() {
        return Err(ScmError::EmptyHead { repo: repo.to_string() });
    }
    Ok(head.to_string())
}

/// A run is due on the first poll ever, or whenever the head moved
/// (including rewrites).
pub fn should_trigger(state: &PollState, head: &str) -> bool {
    state.last_seen_commit.as_deref() != Some(head)
}

pub fn record_poll(state: &PollState, head: &str, at: DateTime<Utc>) -> PollState {
    PollState {
        last_seen_commit: Some(head.to_string()),
        last_poll_at: Some(at),
        ..state.clone()
    }
}
