use std::fs::File;
use std::io::{self, Read};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Debug,
    Release,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub kind: ArtifactKind,
    pub sha256: String,
    pub size_bytes: u64,
    pub version_label: String,
}

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("no file matches {0:?}")]
    Missing(String),
    #[error("{pattern:?} matches {} files: {}", .matches.len(), display_paths(.matches))]
    Ambiguous { pattern: String, matches: Vec<PathBuf> },
    #[error("artifact {0} is empty")]
    Empty(PathBuf),
    #[error("invalid artifact pattern {pattern:?}: {reason}")]
    Pattern { pattern: String, reason: String },
    #[error("cannot read artifact: {0}")]
    Io(#[from] io::Error),
}

fn display_paths(paths: &[PathBuf]) -> String {
    paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", ")
}

pub fn sha256_file(path: &Path) -> io::Result<(String, u64)> {
    let mut file = File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    let mut size = 0u64;
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        size += n as u64;
        hasher.update(&buf[..n]);
    }
    Ok((hex::encode(hasher.finalize()), size))
}

/// Finds exactly one file under `workspace` matching `pattern` (relative
/// glob; `.git` is not searched) and fingerprints it.
pub fn collect_artifact(
    workspace: &Path,
    pattern: &str,
    kind: ArtifactKind,
    version_label: &str,
) -> Result<Artifact, ArtifactError> {
    let glob = glob::Pattern::new(pattern).map_err(|e| ArtifactError::Pattern {
        pattern: pattern.to_string(),
        reason: e.to_string(),
    })?;
    let options = glob::MatchOptions { require_literal_separator: true, ..Default::default() };
    let mut matches: Vec<PathBuf> = walkdir::WalkDir::new(workspace)
        .sort_by_file_name()
        .into_iter()
        .filter_entry(|e| e.file_name() != ".git")
        .filter_map(Result::ok)
        .filter(|e| e.file_type().is_file())
        .filter(|e| {
            e.path()
                .strip_prefix(workspace)
                .map(|rel| glob.matches_path_with(rel, options))
                .unwrap_or(false)
        })
        .map(|e| e.into_path())
        .collect();
    match matches.len() {
        0 => Err(ArtifactError::Missing(pattern.to_string())),
        1 => {
            let path = matches.remove(0);
            let (sha256, size_bytes) = sha256_file(&path)?;
            if size_bytes == 0 {
                return Err(ArtifactError::Empty(path));
            }
            Ok(Artifact { path, kind, sha256, size_bytes, version_label: version_label.to_string() })
        }
        _ => Err(ArtifactError::Ambiguous { pattern: pattern.to_string(), matches }),
    }
}
