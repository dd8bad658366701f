//! Persistent execution trace types.

use std::fmt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::delivery::{Artifact, DistributionReceipt};
use crate::dsl::Mode;
use crate::gates::{GateOutcome, TestSummary};

pub const RECORD_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Running,
    Success,
    Failed,
    Skipped,
    Aborted,
}

impl Status {
    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Success | Status::Failed | Status::Skipped | Status::Aborted)
    }

    /// Legal transitions: Pending→Running→terminal, Pending→Skipped.
    pub fn can_transition_to(self, next: Status) -> bool {
        match (self, next) {
            (Status::Pending, Status::Running | Status::Skipped) => true,
            (Status::Running, n) => n.is_terminal() && n != Status::Skipped,
            _ => false,
        }
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Pending => "PENDING",
            Status::Running => "RUNNING",
            Status::Success => "SUCCESS",
            Status::Failed => "FAILED",
            Status::Skipped => "SKIPPED",
            Status::Aborted => "ABORTED",
        })
    }
}

/// What a step was: a pipeline step kind, or the signing pre-check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepRole {
    Sh,
    Publish,
    NotifyTeam,
    NotifyUsers,
    Upload,
    VerifySigning,
}

impl From<crate::dsl::StepKind> for StepRole {
    fn from(kind: crate::dsl::StepKind) -> Self {
        use crate::dsl::StepKind;
        match kind {
            StepKind::Sh => StepRole::Sh,
            StepKind::Publish => StepRole::Publish,
            StepKind::NotifyTeam => StepRole::NotifyTeam,
            StepKind::NotifyUsers => StepRole::NotifyUsers,
            StepKind::Upload => StepRole::Upload,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateReport {
    pub summary: Option<TestSummary>,
    pub outcome: GateOutcome,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepResult {
    /// 1-based position within the stage; 0 is the signing pre-check.
    pub index: usize,
    pub role: StepRole,
    pub label: String,
    pub command: String,
    pub exit_code: Option<i32>,
    pub status: Status,
    pub timed_out: bool,
    pub started: Option<DateTime<Utc>>,
    pub ended: Option<DateTime<Utc>>,
    pub duration_ms: u64,
    /// Paths relative to the store root.
    pub stdout_log: Option<String>,
    pub stderr_log: Option<String>,
    pub gate: Option<GateReport>,
    /// Why the step failed when the exit code alone does not say.
    pub error: Option<String>,
}

impl StepResult {
    pub fn skipped(index: usize, role: StepRole, label: String, command: String) -> Self {
        StepResult {
            index,
            role,
            label,
            command,
            exit_code: None,
            status: Status::Skipped,
            timed_out: false,
            started: None,
            ended: None,
            duration_ms: 0,
            stdout_log: None,
            stderr_log: None,
            gate: None,
            error: None,
        }
    }

    /// One-line description of why the step failed.
    pub fn failure_reason(&self) -> String {
        if self.timed_out {
            return "timed out".to_string();
        }
        if let Some(GateReport { outcome: GateOutcome::Fail(reason), .. }) = &self.gate {
            return match self.exit_code {
                Some(0) | None => reason.clone(),
                Some(code) => format!("exit code {code}; {reason}"),
            };
        }
        match (&self.error, self.exit_code) {
            (Some(e), _) => e.clone(),
            (None, Some(code)) => format!("exit code {code}"),
            (None, None) => "failed".to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailingStep {
    pub stage: String,
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageResult {
    pub name: String,
    pub status: Status,
    pub steps: Vec<StepResult>,
    /// Non-empty for parallel groups.
    pub branches: Vec<StageResult>,
    pub failing_step: Option<FailingStep>,
    pub started: Option<DateTime<Utc>>,
    pub ended: Option<DateTime<Utc>>,
    pub duration_ms: u64,
}

impl StageResult {
    /// The failing step itself, searching branches.
    pub fn failing_step_result(&self) -> Option<&StepResult> {
        let pointer = self.failing_step.as_ref()?;
        if pointer.stage == self.name {
            return self.steps.iter().find(|s| s.index == pointer.step);
        }
        self.branches.iter().find_map(StageResult::failing_step_result)
    }

    /// Every step result, branches included.
    pub fn all_steps(&self) -> Vec<&StepResult> {
        self.steps.iter().chain(self.branches.iter().flat_map(|b| b.all_steps())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trigger {
    Poll,
    Manual,
}

impl fmt::Display for Trigger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Trigger::Poll => "poll",
            Trigger::Manual => "manual",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Promotion {
    NotApplicable,
    Awaiting,
    Promoted { at: DateTime<Utc>, by: String },
}

impl fmt::Display for Promotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Promotion::NotApplicable => f.write_str("-"),
            Promotion::Awaiting => f.write_str("awaiting"),
            Promotion::Promoted { by, .. } => write!(f, "promoted by {by}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema: u32,
    pub pipeline: String,
    pub run_number: u64,
    pub commit: String,
    pub trigger: Trigger,
    pub mode: Mode,
    pub stages: Vec<StageResult>,
    pub status: Status,
    pub promotion: Promotion,
    pub created: DateTime<Utc>,
    pub finished: Option<DateTime<Utc>>,
    pub duration_ms: u64,
    /// Workspace directory, relative to the store root.
    pub workspace: String,
    pub artifact: Option<Artifact>,
    pub receipt: Option<DistributionReceipt>,
    /// Results of `post` steps; they never change the run status.
    pub post: Vec<StepResult>,
    /// Publish steps executed by promotion attempts, in order.
    pub promotion_steps: Vec<StepResult>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn short_commit(&self) -> &str {
        &self.commit[..self.commit.len().min(7)]
    }

    /// The first failed stage and its failing step, if any.
    pub fn failure(&self) -> Option<(&StageResult, Option<&StepResult>)> {
        self.stages
            .iter()
            .find(|s| s.status == Status::Failed)
            .map(|s| (s, s.failing_step_result()))
    }

    /// Every step result in the record, post and promotion steps included.
    pub fn all_steps(&self) -> Vec<&StepResult> {
        self.stages
            .iter()
            .flat_map(|s| s.all_steps())
            .chain(self.post.iter())
            .chain(self.promotion_steps.iter())
            .collect()
    }
}

/// `Success* (Failed|Aborted) Skipped*` or all-Success.
pub fn satisfies_prefix_property(statuses: &[Status]) -> bool {
    let mut i = 0;
    while i < statuses.len() && statuses[i] == Status::Success {
        i += 1;
    }
    if i == statuses.len() {
        return true;
    }
    if !matches!(statuses[i], Status::Failed | Status::Aborted) {
        return false;
    }
    statuses[i + 1..].iter().all(|s| *s == Status::Skipped)
}

pub fn format_duration_ms(ms: u64) -> String {
    if ms < 60_000 {
        format!("{}.{}s", ms / 1000, (ms % 1000) / 100)
    } else {
        let secs = ms / 1000;
        format!("{}m {}s", secs / 60, secs % 60)
    }
}
