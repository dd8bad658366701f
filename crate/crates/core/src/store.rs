//! On-disk state under a store root:
//!
//! ```text
//! <root>/counter                          last allocated run number
//! <root>/lock                             single-writer advisory lock
//! <root>/runs/<n>/record.json             RunRecord (schema 1)
//! <root>/runs/<n>/logs/<stage>/<step>.{stdout,stderr}.log
//! <root>/poll/<repo-hash>.json            PollState per (repo, branch)
//! <root>/workspaces/<n>/                  run workspace
//! ```
//!
//! Every file write goes through a temp file and a rename.

use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::executor::{RunRecord, RECORD_SCHEMA};
use crate::redact::Redactor;
use crate::scm::PollState;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("run #{0} not found")]
    NotFound(u64),
    #[error("run #{number} record is corrupt: {reason}")]
    CorruptRecord { number: u64, reason: String },
    #[error("unsupported record schema {found} for run #{number}")]
    Schema { number: u64, found: u32 },
    #[error("counter file is corrupt: {0:?}")]
    CorruptCounter(String),
    #[error("store I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to a sibling temp file, syncs it, and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(
        ".{name}.tmp-{}-{}",
        std::process::id(),
        TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
    ));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Exclusive hold on the store's writer lock, released on drop.
pub struct StoreLock<'a> {
    store: &'a Store,
    file: File,
}

impl Drop for StoreLock<'_> {
    fn drop(&mut self) {
        let _ = self.file.unlock();
    }
}

#[derive(Debug, Clone)]
pub struct Store {
    root: PathBuf,
    redactor: Redactor,
}

impl Store {
    /// Opens (creating if needed) a store rooted at `root`.
    pub fn open(root: impl Into<PathBuf>) -> Result<Store, StoreError> {
        let root = root.into();
        for dir in [root.join("runs"), root.join("poll"), root.join("workspaces")] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(Store { root, redactor: Redactor::default() })
    }

    pub fn with_redactor(mut self, redactor: Redactor) -> Store {
        self.redactor = redactor;
        self
    }

    pub fn redactor(&self) -> &Redactor {
        &self.redactor
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, number: u64) -> PathBuf {
        self.root.join("runs").join(number.to_string())
    }

    pub fn workspace_dir(&self, number: u64) -> PathBuf {
        self.root.join("workspaces").join(number.to_string())
    }

    /// Store-relative form of a path inside the store.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root).unwrap_or(path).to_string_lossy().into_owned()
    }

    pub fn resolve(&self, relative: &str) -> PathBuf {
        self.root.join(relative)
    }

    /// Blocks until this process holds the store's writer lock.
    pub fn lock(&self) -> Result<StoreLock<'_>, StoreError> {
        let path = self.root.join("lock");
        let file = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(io_err(&path))?;
        file.lock().map_err(io_err(&path))?;
        Ok(StoreLock { store: self, file })
    }

    pub fn allocate_run_number(&self) -> Result<u64, StoreError> {
        self.lock()?.allocate_run_number()
    }

    pub fn save_run(&self, record: &RunRecord) -> Result<(), StoreError> {
        self.lock()?.save_run(record)
    }

    pub fn load_run(&self, number: u64) -> Result<RunRecord, StoreError> {
        let path = self.run_dir(number).join("record.json");
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(StoreError::NotFound(number)),
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .map_err(|e| StoreError::CorruptRecord { number, reason: e.to_string() })?;
        let schema = value.get("schema").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
        if schema != RECORD_SCHEMA {
            return Err(StoreError::Schema { number, found: schema });
        }
        serde_json::from_value(value).map_err(|e| StoreError::CorruptRecord { number, reason: e.to_string() })
    }

    /// Run numbers that have a persisted record, ascending.
    pub fn list_runs(&self) -> Result<Vec<u64>, StoreError> {
        let dir = self.root.join("runs");
        let mut numbers: Vec<u64> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(Result::ok)
            .filter_map(|e| e.file_name().to_str()?.parse().ok())
            .filter(|n: &u64| self.run_dir(*n).join("record.json").is_file())
            .collect();
        numbers.sort_unstable();
        Ok(numbers)
    }

    pub fn latest_run(&self) -> Result<Option<RunRecord>, StoreError> {
        match self.list_runs()?.last() {
            Some(n) => self.load_run(*n).map(Some),
            None => Ok(None),
        }
    }

    fn poll_path(&self, repo: &str, branch: &str) -> PathBuf {
        let digest = Sha256::digest(format!("{repo}\n{branch}").as_bytes());
        self.root.join("poll").join(format!("{}.json", &hex::encode(digest)[..16]))
    }

    /// Missing or unreadable state is treated as empty, so the next poll
    /// re-triggers rather than stalling.
    pub fn load_poll_state(&self, repo: &str, branch: &str) -> PollState {
        let path = self.poll_path(repo, branch);
        let empty = PollState::new(repo, branch);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return empty,
            Err(e) => {
                log::warn!("cannot read poll state {}: {e}; treating as empty", path.display());
                return empty;
            }
        };
        match serde_json::from_slice::<PollState>(&bytes) {
            Ok(state) if state.repo == repo && state.branch == branch => state,
            Ok(_) => {
                log::warn!("poll state {} belongs to another repository; treating as empty", path.display());
                empty
            }
            Err(e) => {
                log::warn!("poll state {} is corrupt ({e}); treating as empty", path.display());
                empty
            }
        }
    }

    pub fn save_poll_state(&self, state: &PollState) -> Result<(), StoreError> {
        self.lock()?.save_poll_state(state)
    }
}

impl StoreLock<'_> {
    pub fn allocate_run_number(&self) -> Result<u64, StoreError> {
        let path = self.store.root.join("counter");
        let current = match fs::read_to_string(&path) {
            Ok(text) => text
                .trim()
                .parse::<u64>()
                .map_err(|_| StoreError::CorruptCounter(text.clone()))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => 0,
            Err(e) => return Err(StoreError::Io { path, source: e }),
        };
        let next = current + 1;
        write_atomic(&path, format!("{next}\n").as_bytes()).map_err(io_err(&path))?;
        Ok(next)
    }

    pub fn save_run(&self, record: &RunRecord) -> Result<(), StoreError> {
        let dir = self.store.run_dir(record.run_number);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let json = serde_json::to_vec_pretty(record).expect("run records always serialize");
        let path = dir.join("record.json");
        write_atomic(&path, &self.store.redactor.redact(&json)).map_err(io_err(&path))
    }

    pub fn save_poll_state(&self, state: &PollState) -> Result<(), StoreError> {
        let path = self.store.poll_path(&state.repo, &state.branch);
        let json = serde_json::to_vec_pretty(state).expect("poll state always serializes");
        write_atomic(&path, &json).map_err(io_err(&path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsl::Mode;
    use crate::executor::{Promotion, Status, Trigger};
    use chrono::{TimeZone, Utc};

    fn record(n: u64) -> RunRecord {
        let t = Utc.with_ymd_and_hms(2024, 1, 15, 12, 0, 0).unwrap();
        RunRecord {
            schema: RECORD_SCHEMA,
            pipeline: "p".into(),
            run_number: n,
            commit: "0123456789abcdef0123456789abcdef01234567".into(),
            trigger: Trigger::Manual,
            mode: Mode::Delivery,
            stages: vec![],
            status: Status::Success,
            promotion: Promotion::NotApplicable,
            created: t,
            finished: Some(t),
            duration_ms: 5,
            workspace: format!("workspaces/{n}"),
            artifact: None,
            receipt: None,
            post: vec![],
            promotion_steps: vec![],
            warnings: vec![],
            error: None,
        }
    }

    #[test]
    fn allocation_is_sequential() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.allocate_run_number().unwrap(), 1);
        store.allocate_run_number().unwrap();
        store.allocate_run_number().unwrap();
        assert_eq!(store.allocate_run_number().unwrap(), 4);
    }

    #[test]
    fn concurrent_allocators_get_distinct_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let root = root.clone();
                std::thread::spawn(move || {
                    let store = Store::open(&root).unwrap();
                    (0..10).map(|_| store.allocate_run_number().unwrap()).collect::<Vec<_>>()
                })
            })
            .collect();
        let mut all: Vec<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        all.sort_unstable();
        assert_eq!(all, (1..=80).collect::<Vec<_>>());
    }

    #[test]
    fn record_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        assert!(matches!(store.load_run(999), Err(StoreError::NotFound(999))));
        let r = record(1);
        store.save_run(&r).unwrap();
        assert_eq!(store.load_run(1).unwrap(), r);

        let path = store.run_dir(1).join("record.json");
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"schema\": 1"));
        fs::write(&path, &text[..text.len() / 2]).unwrap();
        assert!(matches!(store.load_run(1), Err(StoreError::CorruptRecord { number: 1, .. })));
    }

    #[test]
    fn listing_is_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        for _ in 0..12 {
            let n = store.allocate_run_number().unwrap();
            store.save_run(&record(n)).unwrap();
        }
        assert_eq!(store.list_runs().unwrap(), (1..=12).collect::<Vec<_>>());
        assert_eq!(store.latest_run().unwrap().unwrap().run_number, 12);
    }

    #[test]
    fn records_are_scrubbed() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap().with_redactor(Redactor::new(["hunter2"]));
        let mut r = record(1);
        r.warnings.push("leaked hunter2".into());
        store.save_run(&r).unwrap();
        let raw = fs::read(store.run_dir(1).join("record.json")).unwrap();
        assert!(!raw.windows(7).any(|w| w == b"hunter2"));
    }

    #[test]
    fn poll_state_round_trip_and_fail_open() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let fresh = store.load_poll_state("/repo", "master");
        assert_eq!(fresh.last_seen_commit, None);

        let t = Utc.with_ymd_and_hms(2024, 1, 15, 12, 0, 0).unwrap();
        let state = crate::scm::record_poll(&fresh, "abc123", t);
        store.save_poll_state(&state).unwrap();
        assert_eq!(store.load_poll_state("/repo", "master"), state);
        assert_eq!(store.load_poll_state("/repo", "other").last_seen_commit, None);

        fs::write(store.poll_path("/repo", "master"), b"{not json").unwrap();
        assert_eq!(store.load_poll_state("/repo", "master"), fresh);
    }

    #[test]
    fn atomic_write_leaves_no_temp_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
