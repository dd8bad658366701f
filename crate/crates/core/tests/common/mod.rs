#![allow(dead_code)]

use std::fs;
use std::path::PathBuf;
use std::process::Command;

use forge::dsl::{parse_pipeline, plan};
use forge::executor::{Engine, RunRecord, Trigger, WorkspaceSource};
use forge::fixtures::{make_fixture, FixtureConfig, FixtureRepo, Scenario, StubServer};
use forge::store::Store;

pub struct Sandbox {
    pub dir: tempfile::TempDir,
    pub repo: FixtureRepo,
    pub store_dir: PathBuf,
}

impl Sandbox {
    pub fn new(cfg: &FixtureConfig) -> Sandbox {
        let dir = tempfile::tempdir().unwrap();
        let repo = make_fixture(&dir.path().join("app"), cfg).unwrap();
        let store_dir = dir.path().join("store");
        Sandbox { dir, repo, store_dir }
    }

    pub fn with(scenario: Scenario, stub: &StubServer) -> Sandbox {
        Sandbox::new(&FixtureConfig::new(scenario, stub.url()))
    }

    pub fn store(&self) -> Store {
        Store::open(&self.store_dir).unwrap()
    }

    pub fn engine(&self) -> Engine {
        let text = fs::read_to_string(self.repo.pipelinefile()).unwrap();
        let def = parse_pipeline(&text, "Pipelinefile").unwrap();
        let mut engine = Engine::new(def, self.store(), WorkspaceSource::Checkout { repo: self.repo.path.clone() });
        engine.env.extend(self.repo.signing_env());
        engine
    }

    pub fn run(&self) -> RunRecord {
        let e = self.engine();
        e.execute_run(&plan(&e.def), &self.repo.head, Trigger::Manual, &mut |_| {}).unwrap()
    }

    /// Runs the `forge` binary against this sandbox; returns (exit, stdout, stderr).
    pub fn forge(&self, args: &[&str]) -> (i32, String, String) {
        let out = Command::new(env!("CARGO_BIN_EXE_forge"))
            .arg("--file")
            .arg(self.repo.pipelinefile())
            .arg("--store")
            .arg(&self.store_dir)
            .args(args)
            .envs(self.repo.signing_env())
            .env_remove("FORGE_TEAM_WEBHOOK")
            .env_remove("FORGE_DIST_ENDPOINT")
            .env_remove("FORGE_SCM_HEAD_CMD")
            .output()
            .unwrap();
        (
            out.status.code().unwrap_or(-1),
            String::from_utf8_lossy(&out.stdout).into_owned(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        )
    }
}
