//! Scripted mobile-app repositories and an HTTP stub for end-to-end tests.
//!
//! The generated repo mirrors a React Native release pipeline: two install
//! steps in parallel, a debug build, an acceptance suite, a signed release
//! build, and delivery. Every script appends its name to the file named by
//! `FIXTURE_TRACE`, so tests can count executions.

mod stub;

use std::fs;
use std::io;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::dsl::Mode;

pub use stub::{RecordedRequest, StubServer, UploadReply};

pub const STORE_PASSWORD_ENV: &str = "FORGE_STORE_PASSWORD";
pub const KEY_PASSWORD_ENV: &str = "FORGE_KEY_PASSWORD";
pub const STORE_PASSWORD: &str = "fx-store-pw-5b1d9e";
pub const KEY_PASSWORD: &str = "fx-key-pw-0c7a42";
pub const TRACE_FILE: &str = "trace.log";
pub const CRON: &str = "0 */12 * * 1-5";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    AllPass,
    /// One acceptance scenario fails.
    AcceptanceFail,
    /// The release build exits nonzero.
    ReleaseFail,
    /// The keystore is missing from the repository.
    NoSigning,
}

#[derive(Debug, Clone)]
pub struct FixtureConfig {
    pub scenario: Scenario,
    /// Base URL of a [`StubServer`]; webhook and upload paths are appended.
    pub stub_url: String,
    pub mode: Mode,
    pub recipients: Vec<String>,
}

impl FixtureConfig {
    pub fn new(scenario: Scenario, stub_url: &str) -> Self {
        FixtureConfig {
            scenario,
            stub_url: stub_url.to_string(),
            mode: Mode::Delivery,
            recipients: vec!["qa@example.com".into(), "beta@example.com".into()],
        }
    }
}

pub struct FixtureRepo {
    pub path: PathBuf,
    pub head: String,
}

fn git(repo: &Path, args: &[&str]) -> io::Result<String> {
    let out = Command::new("git")
        .arg("-C")
        .arg(repo)
        .args(["-c", "user.name=Fixture", "-c", "user.email=fixture@example.com", "-c", "commit.gpgsign=false"])
        .args(args)
        .env("GIT_AUTHOR_DATE", "2024-01-15T09:00:00Z")
        .env("GIT_COMMITTER_DATE", "2024-01-15T09:00:00Z")
        .output()?;
    if !out.status.success() {
        return Err(io::Error::other(format!(
            "git {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr).trim()
        )));
    }
    Ok(String::from_utf8_lossy(&out.stdout).trim().to_string())
}

fn write_script(path: &Path, body: &str) -> io::Result<()> {
    fs::create_dir_all(path.parent().expect("script in a directory"))?;
    fs::write(path, format!("#!/bin/sh\nset -e\n{body}"))?;
    fs::set_permissions(path, fs::Permissions::from_mode(0o755))
}

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\""))
}

pub fn pipelinefile(cfg: &FixtureConfig, trace: &Path) -> String {
    let recipients: Vec<String> = cfg.recipients.iter().map(|r| quote(r)).collect();
    let recipients = if recipients.is_empty() { String::new() } else { format!("    recipients {}\n", recipients.join(" ")) };
    format!(
        r#"# React Native app: install, build, test, sign, deliver.
pipeline "react-native-app" {{
  triggers {{
    pollSCM "{CRON}"
  }}
  environment {{
    FIXTURE_TRACE {trace}
  }}
  stage "Settings" {{
    parallel {{
      stage "BUNDLE INSTALL" {{ sh "./ci/bundle_install.sh" }}
      stage "NPM INSTALL" {{ sh "./ci/npm_install.sh" }}
    }}
  }}
  stage "Build Debug Mode" {{ sh "./ci/build_debug.sh" }}
  stage "Acceptance Test" {{ sh "./ci/acceptance.sh" gate acceptance }}
  stage "Build Release Mode" {{
    requires_signing
    sh "./ci/build_release.sh"
  }}
  stage "Delivery" {{
    upload
    notify_users
    publish "./ci/publish.sh"
  }}
  delivery {{
    mode {mode}
    team_webhook "{url}/webhook"
{recipients}    distribution_endpoint "{url}/upload"
  }}
  signing {{
    keystore "android/app/release.keystore"
    alias "release"
    store_password_env "{STORE_PASSWORD_ENV}"
    key_password_env "{KEY_PASSWORD_ENV}"
  }}
  post {{ notify_team }}
}}
"#,
        trace = quote(&trace.to_string_lossy()),
        mode = cfg.mode,
        url = cfg.stub_url,
    )
}

const TRACE: &str = "echo \"$(basename \"$0\" .sh)\" >> \"$FIXTURE_TRACE\"\n";

/// Creates a git repository at `dest` (which must not exist or be empty).
pub fn make_fixture(dest: &Path, cfg: &FixtureConfig) -> io::Result<FixtureRepo> {
    fs::create_dir_all(dest)?;
    let dest = dest.canonicalize()?;
    let ci = dest.join("ci");
    write_script(&ci.join("bundle_install.sh"), &format!("{TRACE}echo \"Bundle complete! 42 Gemfile dependencies\"\n"))?;
    write_script(&ci.join("npm_install.sh"), &format!("{TRACE}echo \"added 1024 packages\"\n"))?;
    write_script(
        &ci.join("build_debug.sh"),
        &format!(
            "{TRACE}mkdir -p android/app/build/outputs/apk/debug\n\
             printf 'debug build %s' \"$FORGE_COMMIT\" > android/app/build/outputs/apk/debug/app-debug.apk\n\
             echo BUILD SUCCESSFUL\n"
        ),
    )?;
    write_script(
        &ci.join("acceptance.sh"),
        &format!(
            "{TRACE}if [ -f FAIL_ACCEPTANCE ]; then\n\
             \x20 echo 'Failing scenario: login with wrong password'\n\
             \x20 echo '3 scenarios (1 failed, 2 passed)'\n\
             \x20 echo '14 steps (1 failed, 13 passed)'\n\
             \x20 exit 1\n\
             fi\n\
             echo '3 scenarios (3 passed)'\n\
             echo '14 steps (14 passed)'\n"
        ),
    )?;
    write_script(
        &ci.join("build_release.sh"),
        &format!(
            "{TRACE}if [ -f FAIL_RELEASE ]; then echo 'release build failed' >&2; exit 1; fi\n\
             echo \"signing with storePassword=${STORE_PASSWORD_ENV} keyPassword=${KEY_PASSWORD_ENV}\"\n\
             echo \"debug: key password is ${KEY_PASSWORD_ENV}\" >&2\n\
             mkdir -p android/app/build/outputs/apk/release\n\
             printf 'release build %s' \"$FORGE_COMMIT\" > android/app/build/outputs/apk/release/app-release.apk\n"
        ),
    )?;
    write_script(&ci.join("publish.sh"), &format!("{TRACE}echo \"published run $FORGE_RUN_NUMBER to the store\"\n"))?;
    if cfg.scenario != Scenario::NoSigning {
        fs::create_dir_all(dest.join("android/app"))?;
        fs::write(dest.join("android/app/release.keystore"), b"fixture keystore")?;
    }
    match cfg.scenario {
        Scenario::AcceptanceFail => fs::write(dest.join("FAIL_ACCEPTANCE"), b"")?,
        Scenario::ReleaseFail => fs::write(dest.join("FAIL_RELEASE"), b"")?,
        _ => {}
    }
    fs::write(dest.join(".gitignore"), format!("{TRACE_FILE}\n"))?;
    fs::write(dest.join("Pipelinefile"), pipelinefile(cfg, &dest.join(TRACE_FILE)))?;

    git(&dest, &["init", "-q", "-b", "master"])?;
    git(&dest, &["add", "-A"])?;
    git(&dest, &["commit", "-q", "-m", "Initial commit"])?;
    let head = git(&dest, &["rev-parse", "HEAD"])?;
    Ok(FixtureRepo { path: dest, head })
}

impl FixtureRepo {
    pub fn pipelinefile(&self) -> PathBuf {
        self.path.join("Pipelinefile")
    }

    /// Commits a change to `CHANGELOG` and returns the new head.
    pub fn append_commit(&mut self, message: &str) -> io::Result<String> {
        let log = self.path.join("CHANGELOG");
        let mut text = fs::read_to_string(&log).unwrap_or_default();
        text.push_str(message);
        text.push('\n');
        fs::write(&log, text)?;
        git(&self.path, &["add", "CHANGELOG"])?;
        git(&self.path, &["commit", "-q", "-m", message])?;
        self.head = git(&self.path, &["rev-parse", "HEAD"])?;
        Ok(self.head.clone())
    }

    /// Script names in execution order.
    pub fn trace(&self) -> Vec<String> {
        fs::read_to_string(self.path.join(TRACE_FILE))
            .unwrap_or_default()
            .lines()
            .map(str::to_string)
            .collect()
    }

    pub fn executions(&self, script: &str) -> usize {
        self.trace().iter().filter(|s| s.as_str() == script).count()
    }

    pub fn clear_trace(&self) {
        let _ = fs::remove_file(self.path.join(TRACE_FILE));
    }

    /// Signing passwords the release stage expects.
    pub fn signing_env(&self) -> Vec<(String, String)> {
        vec![
            (STORE_PASSWORD_ENV.to_string(), STORE_PASSWORD.to_string()),
            (KEY_PASSWORD_ENV.to_string(), KEY_PASSWORD.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::{parse_pipeline, plan, validate};

    #[test]
    fn fixture_pipeline_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let repo = make_fixture(&dir.path().join("app"), &FixtureConfig::new(Scenario::AllPass, "http://127.0.0.1:9")).unwrap();
        assert_eq!(repo.head.len(), 40);
        let text = fs::read_to_string(repo.pipelinefile()).unwrap();
        let def = parse_pipeline(&text, "Pipelinefile").unwrap();
        assert!(validate(&def).is_empty(), "{:?}", validate(&def));
        assert_eq!(plan(&def).nodes.len(), 5);
        assert_eq!(def.triggers[0].cron_expression, CRON);
    }

    #[test]
    fn commits_move_head() {
        let dir = tempfile::tempdir().unwrap();
        let mut repo = make_fixture(&dir.path().join("app"), &FixtureConfig::new(Scenario::NoSigning, "http://x")).unwrap();
        let first = repo.head.clone();
        let second = repo.append_commit("second").unwrap();
        assert_ne!(first, second);
        assert!(!repo.path.join("android/app/release.keystore").exists());
    }

    #[test]
    fn stub_records_and_scripts() {
        let stub = StubServer::start(0).unwrap();
        stub.script_uploads([UploadReply::Status(503)]);
        let client = reqwest::blocking::Client::new();
        assert_eq!(client.post(stub.upload_url()).body("a").send().unwrap().status().as_u16(), 503);
        let ok = client.post(stub.upload_url()).body("b").send().unwrap().text().unwrap();
        assert!(ok.contains(&format!("{}/d/1", stub.url())));
        client.post(stub.webhook_url()).body("{}").send().unwrap();
        assert_eq!(stub.requests_to("/upload").len(), 2);
        assert_eq!(stub.requests_to("/webhook").len(), 1);
        let log: serde_json::Value =
            serde_json::from_str(&client.get(format!("{}/requests", stub.url())).send().unwrap().text().unwrap()).unwrap();
        assert_eq!(log.as_array().unwrap().len(), 3);
    }
}
