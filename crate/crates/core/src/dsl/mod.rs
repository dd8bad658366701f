//! The `Pipelinefile` language.
//!
//! A pipeline document is a single `pipeline { ... }` block holding stages,
//! triggers, environment, delivery, signing, and `post` sections:
//!
//! ```text
//! pipeline "mobile-app" {
//!   triggers { pollSCM "0 */12 * * 1-5" repo "." branch "master" }
//!   environment { GRADLE_OPTS "-Xmx2g" }
//!   stage "Settings" {
//!     parallel {
//!       stage "BUNDLE INSTALL" { sh "bundle install" }
//!       stage "NPM INSTALL" { sh "npm install" }
//!     }
//!   }
//!   stage "Build Debug Mode" { sh "./gradlew assembleDebug" timeout 600 }
//!   stage "Delivery" { upload notify_users publish "./publish.sh" }
//!   delivery { mode delivery recipients "qa@example.com" distribution_endpoint "http://dist/upload" }
//!   post { notify_team }
//! }
//! ```
//!
//! Strings are double-quoted and accept the escapes `\"` and `\\`. `#`
//! starts a comment that runs to the end of the line.

mod lexer;
mod parser;
mod plan;
mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use parser::{parse_pipeline, parse_pipeline_bytes};
pub use plan::{plan, plan_for_mode, ExecutionPlan, PlanNode, SerialStage};
pub use validate::validate;

pub const DEFAULT_STEP_TIMEOUT_SECONDS: u64 = 1800;
pub const DEFAULT_BRANCH: &str = "master";
pub const DEFAULT_OUTBOX_DIR: &str = "outbox";
pub const DEFAULT_ARTIFACT_GLOB: &str = "**/*-release.apk";

/// 1-based line and column (in characters) of a source position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct Span {
    pub line: usize,
    pub column: usize,
}

impl Span {
    pub fn new(line: usize, column: usize) -> Self {
        Span { line, column }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Severity {
    Error,
    Warning,
}

impl fmt::Display for Severity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Severity::Error => "error",
            Severity::Warning => "warning",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub source: String,
    pub span: Span,
    pub severity: Severity,
    pub message: String,
}

impl Diagnostic {
    pub fn error(source: &str, span: Span, message: impl Into<String>) -> Self {
        Diagnostic {
            source: source.to_string(),
            span,
            severity: Severity::Error,
            message: message.into(),
        }
    }
}

/// Renders as `source:line:col: severity: message`.
impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}:{}: {}: {}",
            self.source, self.span.line, self.span.column, self.severity, self.message
        )
    }
}

/// Engine mode: continuous delivery waits for a manual promotion before
/// publishing, continuous deployment publishes inline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Delivery,
    Deployment,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Delivery => "delivery",
            Mode::Deployment => "deployment",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WhenMode {
    #[default]
    Always,
    Only(Mode),
}

impl WhenMode {
    pub fn admits(self, mode: Mode) -> bool {
        match self {
            WhenMode::Always => true,
            WhenMode::Only(m) => m == mode,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Sh,
    Publish,
    NotifyTeam,
    NotifyUsers,
    Upload,
}

impl StepKind {
    pub fn keyword(self) -> &'static str {
        match self {
            StepKind::Sh => "sh",
            StepKind::Publish => "publish",
            StepKind::NotifyTeam => "notify_team",
            StepKind::NotifyUsers => "notify_users",
            StepKind::Upload => "upload",
        }
    }

    pub fn from_keyword(word: &str) -> Option<Self> {
        Some(match word {
            "sh" => StepKind::Sh,
            "publish" => StepKind::Publish,
            "notify_team" => StepKind::NotifyTeam,
            "notify_users" => StepKind::NotifyUsers,
            "upload" => StepKind::Upload,
            _ => return None,
        })
    }

    /// Shell-backed kinds carry a command; the rest are dispatched internally.
    pub fn takes_command(self) -> bool {
        matches!(self, StepKind::Sh | StepKind::Publish)
    }
}

impl fmt::Display for StepKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.keyword())
    }
}

/// Post-processing applied to a step's captured output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateKind {
    /// Parse a scenario summary from stdout and require zero failures.
    Acceptance,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepDef {
    pub kind: StepKind,
    pub command: String,
    pub timeout_seconds: u64,
    pub env: Vec<(String, String)>,
    pub gate: Option<GateKind>,
    pub span: Span,
}

impl StepDef {
    pub fn new(kind: StepKind, command: impl Into<String>) -> Self {
        StepDef {
            kind,
            command: command.into(),
            timeout_seconds: DEFAULT_STEP_TIMEOUT_SECONDS,
            env: Vec::new(),
            gate: None,
            span: Span::default(),
        }
    }

    pub fn sh(command: impl Into<String>) -> Self {
        StepDef::new(StepKind::Sh, command)
    }

    /// Short human label, e.g. `sh "./build.sh"` or `upload`.
    pub fn label(&self) -> String {
        if self.kind.takes_command() {
            format!("{} {:?}", self.kind, self.command)
        } else {
            self.kind.to_string()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageBody {
    Steps(Vec<StepDef>),
    Parallel(Vec<StageDef>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageDef {
    pub name: String,
    pub body: StageBody,
    pub when_mode: WhenMode,
    /// Run the signing precondition check before the first step.
    pub requires_signing: bool,
    pub span: Span,
}

impl StageDef {
    /// Every step in the stage, branches included, in document order.
    pub fn steps(&self) -> Vec<&StepDef> {
        match &self.body {
            StageBody::Steps(steps) => steps.iter().collect(),
            StageBody::Parallel(branches) => branches.iter().flat_map(|b| b.steps()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriggerDef {
    pub cron_expression: String,
    pub repo: String,
    pub branch: String,
    pub head_cmd: Option<String>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeliveryConfig {
    pub mode: Mode,
    pub team_webhook_url: Option<String>,
    pub user_recipients: Vec<String>,
    pub outbox_dir: String,
    pub distribution_endpoint: Option<String>,
    /// Glob (relative to the workspace) locating the release artifact for `upload`.
    pub artifact_glob: String,
    pub span: Span,
}

impl Default for DeliveryConfig {
    fn default() -> Self {
        DeliveryConfig {
            mode: Mode::Delivery,
            team_webhook_url: None,
            user_recipients: Vec::new(),
            outbox_dir: DEFAULT_OUTBOX_DIR.to_string(),
            distribution_endpoint: None,
            artifact_glob: DEFAULT_ARTIFACT_GLOB.to_string(),
            span: Span::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SigningConfig {
    pub keystore_path: String,
    pub key_alias: String,
    pub store_password_env: String,
    pub key_password_env: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineDef {
    pub name: String,
    pub triggers: Vec<TriggerDef>,
    pub environment: Vec<(String, String)>,
    pub stages: Vec<StageDef>,
    pub delivery: DeliveryConfig,
    pub signing: Option<SigningConfig>,
    /// Steps run once after every finished run, whatever its outcome.
    pub post: Vec<StepDef>,
    pub source_name: String,
}

impl PipelineDef {
    pub fn all_steps(&self) -> impl Iterator<Item = &StepDef> {
        self.stages.iter().flat_map(|s| s.steps()).chain(self.post.iter())
    }

    /// Stage names, parallel branches included, in document order.
    pub fn stage_names(&self) -> Vec<&str> {
        let mut names = Vec::new();
        for stage in &self.stages {
            names.push(stage.name.as_str());
            if let StageBody::Parallel(branches) = &stage.body {
                names.extend(branches.iter().map(|b| b.name.as_str()));
            }
        }
        names
    }
}
