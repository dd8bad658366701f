//! Release gates: the acceptance-test summary check and the signing
//! precondition check.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dsl::SigningConfig;

/// Scenario counts reported by a Cucumber-style test run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestSummary {
    pub scenarios: u64,
    pub passed: u64,
    pub failed: u64,
    pub pending: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("no scenario summary line found in test output")]
pub struct MissingSummary;

/// Parses one `<N> scenarios (<k> failed, <k> passed, ...)` line.
fn parse_summary_line(line: &str) -> Option<TestSummary> {
    let line = line.trim();
    let (count, rest) = line.split_once(char::is_whitespace)?;
    let scenarios: u64 = count.parse().ok()?;
    let rest = rest.trim_start();
    let rest = rest
        .strip_prefix("scenarios")
        .or_else(|| rest.strip_prefix("scenario"))?
        .trim_start();
    if rest.is_empty() && scenarios == 0 {
        // Cucumber prints a bare `0 scenarios` when nothing ran.
        return Some(TestSummary { scenarios: 0, passed: 0, failed: 0, pending: 0 });
    }
    let inner = rest.strip_prefix('(')?.strip_suffix(')')?;
    let mut summary = TestSummary { scenarios, passed: 0, failed: 0, pending: 0 };
    for part in inner.split(',') {
        let (k, category) = part.trim().split_once(char::is_whitespace)?;
        let k: u64 = k.parse().ok()?;
        let slot = match category.trim() {
            "passed" => &mut summary.passed,
            "failed" => &mut summary.failed,
            "pending" => &mut summary.pending,
            _ => return None,
        };
        *slot = slot.checked_add(k)?;
    }
    let total = summary.passed.checked_add(summary.failed)?.checked_add(summary.pending)?;
    (total == summary.scenarios).then_some(summary)
}

/// Finds the last summary line in captured test output.
pub fn parse_test_summary(output: &str) -> Result<TestSummary, MissingSummary> {
    output.lines().rev().find_map(parse_summary_line).ok_or(MissingSummary)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "result", content = "reason", rename_all = "snake_case")]
pub enum GateOutcome {
    Pass,
    Fail(String),
}

impl GateOutcome {
    pub fn passed(&self) -> bool {
        matches!(self, GateOutcome::Pass)
    }
}

impl fmt::Display for GateOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GateOutcome::Pass => f.write_str("pass"),
            GateOutcome::Fail(reason) => write!(f, "fail: {reason}"),
        }
    }
}

/// Passes iff a summary was found, at least one scenario ran, and none failed.
pub fn acceptance_gate(summary: &Result<TestSummary, MissingSummary>) -> GateOutcome {
    match summary {
        Err(e) => GateOutcome::Fail(e.to_string()),
        Ok(s) if s.failed == 1 => GateOutcome::Fail("1 scenario failed".to_string()),
        Ok(s) if s.failed > 0 => GateOutcome::Fail(format!("{} scenarios failed", s.failed)),
        Ok(s) if s.scenarios == 0 => GateOutcome::Fail("no scenarios ran".to_string()),
        Ok(_) => GateOutcome::Pass,
    }
}

/// Checks release-signing preconditions. Relative keystore paths resolve
/// against `base_dir` (the run workspace). Password values are never
/// included in the reason.
pub fn verify_signing(cfg: &SigningConfig, env: &HashMap<String, String>, base_dir: &Path) -> GateOutcome {
    let keystore = base_dir.join(&cfg.keystore_path);
    let readable = std::fs::metadata(&keystore).map(|m| m.is_file()).unwrap_or(false)
        && std::fs::File::open(&keystore).is_ok();
    if !readable {
        return GateOutcome::Fail(format!("keystore not found: {}", cfg.keystore_path));
    }
    if cfg.key_alias.trim().is_empty() {
        return GateOutcome::Fail("key alias is empty".to_string());
    }
    for name in [&cfg.store_password_env, &cfg.key_password_env] {
        if name.is_empty() {
            return GateOutcome::Fail("password env var name is empty".to_string());
        }
        match env.get(name.as_str()) {
            None => return GateOutcome::Fail(format!("env var {name} not set")),
            Some(v) if v.is_empty() => return GateOutcome::Fail(format!("env var {name} is empty")),
            Some(_) => {}
        }
    }
    GateOutcome::Pass
}
