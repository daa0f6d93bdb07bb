//! Run manifests: one JSON record per run directory tying the config hash
//! to every file the run produced.
//!
//! The manifest is written atomically (temp file + rename) when a run
//! starts, updated as artifacts appear, and finalized with an end timestamp
//! and status when the run completes or fails. Re-running into a directory
//! that already holds a manifest is refused unless forced, so results are
//! never silently overwritten.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// File name of the run manifest inside a run directory.
pub const MANIFEST_NAME: &str = "manifest.json";

/// Lifecycle state of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Complete,
    Failed,
}

/// The persisted run record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// SHA-256 of the canonical config echo.
    pub config_hash: String,
    /// The fully resolved config, key by key.
    pub config: BTreeMap<String, String>,
    /// Crate version that produced the run.
    pub code_version: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: Option<u64>,
    pub status: RunStatus,
    /// Every file this run wrote, relative to the run directory (the
    /// manifest itself excluded).
    pub artifacts: Vec<String>,
}

/// Milliseconds since the Unix epoch.
pub fn now_unix_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

impl RunManifest {
    /// A fresh manifest in the `Running` state, stamped now.
    pub fn new(config_hash: String, config: BTreeMap<String, String>) -> RunManifest {
        RunManifest {
            config_hash,
            config,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: now_unix_ms(),
            finished_unix_ms: None,
            status: RunStatus::Running,
            artifacts: Vec::new(),
        }
    }

    /// Path of the manifest file inside `dir`.
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_NAME)
    }

    /// Writes the manifest atomically: serialize to `manifest.json.tmp` in
    /// the same directory, then rename over the final name.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let final_path = Self::path(dir);
        let tmp_path = dir.join(format!("{MANIFEST_NAME}.tmp"));
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::config(format!("manifest serialization failed: {e}")))?;
        std::fs::write(&tmp_path, json).map_err(|e| CliError::io(&tmp_path, e))?;
        std::fs::rename(&tmp_path, &final_path).map_err(|e| CliError::io(&final_path, e))?;
        Ok(())
    }

    /// Reads and deserializes the manifest in `dir`.
    pub fn load(dir: &Path) -> Result<RunManifest> {
        let path = Self::path(dir);
        let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| {
            CliError::config(format!("{}: malformed manifest: {e}", path.display()))
        })
    }

    /// Records one produced file (relative to the run directory); repeats
    /// are ignored so re-emitting an artifact stays idempotent.
    pub fn add_artifact(&mut self, relative: impl Into<String>) {
        let relative = relative.into();
        if !self.artifacts.iter().any(|a| a == &relative) {
            self.artifacts.push(relative);
        }
    }

    /// Records every file directly inside `run_dir/subdir` (checkpoint and
    /// feature directories are flat).
    pub fn add_dir_artifacts(&mut self, run_dir: &Path, subdir: &str) -> Result<()> {
        let dir = run_dir.join(subdir);
        let entries = std::fs::read_dir(&dir).map_err(|e| CliError::io(&dir, e))?;
        let mut names = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| CliError::io(&dir, e))?;
            if entry.path().is_file() {
                names.push(entry.file_name().to_string_lossy().into_owned());
            }
        }
        names.sort();
        for name in names {
            self.add_artifact(format!("{subdir}/{name}"));
        }
        Ok(())
    }

    /// Stamps the end timestamp and final status.
    pub fn finalize(&mut self, status: RunStatus) {
        self.finished_unix_ms = Some(now_unix_ms());
        self.status = status;
    }
}

/// Prepares `dir` for a new run. An existing manifest is refused unless
/// `force` is set (an identical config hash gets the more specific message);
/// with `force` the whole directory is wiped first.
pub fn prepare_run_dir(dir: &Path, config_hash: &str, force: bool) -> Result<()> {
    if RunManifest::path(dir).exists() {
        if !force {
            let detail = match RunManifest::load(dir) {
                Ok(prev) if prev.config_hash == config_hash => {
                    "a run with this exact config hash".to_string()
                }
                Ok(prev) => format!("a run with config hash {}", prev.config_hash),
                Err(_) => "an unreadable manifest".to_string(),
            };
            return Err(CliError::config(format!(
                "{}: already holds {detail}; pass --force to replace it",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    Ok(())
}
