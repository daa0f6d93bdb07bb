//! Subcommand implementations and the plumbing they share: resolving a
//! trained model from either a run directory or an explicit
//! checkpoint/config pair, and routing output files through a manifest.

pub mod diagnose;
pub mod evaluate;
pub mod export;
pub mod sweep;
pub mod train;

use std::path::{Path, PathBuf};

use phl_core::datasets::LabeledDataset;
use phl_core::models::{load_checkpoint, Encoder, Head};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::manifest::{prepare_run_dir, RunManifest, RunStatus};

/// Subdirectory names inside a run directory.
pub const CHECKPOINT_INITIAL: &str = "checkpoint-initial";
pub const CHECKPOINT_FINAL: &str = "checkpoint-final";
pub const FEATURES_FINAL: &str = "features-final";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// A trained model plus the config that produced it, resolved from CLI
/// flags. `run_dir` is set when the source was a run directory.
pub struct ModelSource {
    pub config: ExperimentConfig,
    pub encoder: Encoder<f64>,
    pub head: Head<f64>,
    pub checkpoint_dir: PathBuf,
    pub run_dir: Option<PathBuf>,
}

/// Loads the model named by `--run` or by `--checkpoint` + `--config`.
///
/// Run mode re-parses the manifest's config echo, re-validates it, and
/// insists it re-hashes to the recorded hash, so a tampered or stale
/// manifest cannot silently misdescribe its artifacts.
pub fn resolve_model(
    run: Option<&Path>,
    checkpoint: Option<&Path>,
    config_path: Option<&Path>,
) -> Result<ModelSource> {
    let (config, checkpoint_dir, run_dir) = match (run, checkpoint, config_path) {
        (Some(run), None, None) => {
            let manifest = RunManifest::load(run)?;
            let config = ExperimentConfig::from_map(manifest.config.clone()).map_err(|e| {
                CliError::config(format!("{}: manifest config no longer validates: {e}", run.display()))
            })?;
            if config.hash() != manifest.config_hash {
                return Err(CliError::config(format!(
                    "{}: manifest config re-hashes to {} but records {}",
                    run.display(),
                    config.hash(),
                    manifest.config_hash
                )));
            }
            let checkpoint_dir = run.join(CHECKPOINT_FINAL);
            if !checkpoint_dir.is_dir() {
                return Err(CliError::config(format!(
                    "{}: no {CHECKPOINT_FINAL} directory (did training complete?)",
                    run.display()
                )));
            }
            (config, checkpoint_dir, Some(run.to_path_buf()))
        }
        (None, Some(checkpoint), Some(config_path)) => {
            let config = ExperimentConfig::load(config_path)?;
            (config, checkpoint.to_path_buf(), None)
        }
        _ => {
            return Err(CliError::config(
                "pass either --run <dir>, or --checkpoint <dir> together with --config <file>",
            ))
        }
    };
    let (encoder, head) = load_checkpoint::<f64>(&checkpoint_dir)?;
    Ok(ModelSource { config, encoder, head, checkpoint_dir, run_dir })
}

impl ModelSource {
    /// Loads the dataset this model was trained on and checks that the
    /// checkpoint's input width matches it.
    pub fn load_dataset(&self) -> Result<LabeledDataset<f64>> {
        let dataset = self.config.load_dataset()?;
        if self.encoder.input_dim() != dataset.dim() {
            return Err(CliError::config(format!(
                "checkpoint expects {}-dimensional inputs but the dataset has dimension {}",
                self.encoder.input_dim(),
                dataset.dim()
            )));
        }
        Ok(dataset)
    }
}

/// Where a command's output files go, and which manifest records them.
pub enum OutputSink {
    /// Extend the manifest of an existing run directory.
    ExistingRun { dir: PathBuf, manifest: RunManifest },
    /// A fresh directory with its own manifest (created up front in the
    /// `Running` state, finalized on commit).
    FreshDir { dir: PathBuf, manifest: RunManifest },
}

impl OutputSink {
    /// Picks the sink: `--out` wins (fresh directory); otherwise run mode
    /// extends the run's own manifest.
    pub fn resolve(source: &ModelSource, out: Option<&Path>) -> Result<OutputSink> {
        match (out, &source.run_dir) {
            (Some(out), _) => {
                prepare_run_dir(out, &source.config.hash(), false)?;
                let manifest =
                    RunManifest::new(source.config.hash(), source.config.to_map());
                manifest.save(out)?;
                Ok(OutputSink::FreshDir { dir: out.to_path_buf(), manifest })
            }
            (None, Some(run_dir)) => {
                let manifest = RunManifest::load(run_dir)?;
                Ok(OutputSink::ExistingRun { dir: run_dir.clone(), manifest })
            }
            (None, None) => Err(CliError::config(
                "pass --out <dir> to choose where checkpoint-mode outputs go",
            )),
        }
    }

    pub fn dir(&self) -> &Path {
        match self {
            OutputSink::ExistingRun { dir, .. } | OutputSink::FreshDir { dir, .. } => dir,
        }
    }

    pub fn add_artifact(&mut self, relative: impl Into<String>) {
        match self {
            OutputSink::ExistingRun { manifest, .. } | OutputSink::FreshDir { manifest, .. } => {
                manifest.add_artifact(relative)
            }
        }
    }

    /// Records every file in `dir()/subdir`.
    pub fn add_dir(&mut self, subdir: &str) -> Result<()> {
        let dir = self.dir().to_path_buf();
        match self {
            OutputSink::ExistingRun { manifest, .. } | OutputSink::FreshDir { manifest, .. } => {
                manifest.add_dir_artifacts(&dir, subdir)
            }
        }
    }

    /// Persists the manifest; fresh directories are stamped `Complete`.
    pub fn commit(self) -> Result<()> {
        match self {
            OutputSink::ExistingRun { dir, manifest } => manifest.save(&dir),
            OutputSink::FreshDir { dir, mut manifest } => {
                manifest.finalize(RunStatus::Complete);
                manifest.save(&dir)
            }
        }
    }
}

/// Clamp on worker threads from the `PHL_THREADS` environment variable;
/// `None` when unset or unparsable.
pub fn thread_cap() -> Option<usize> {
    std::env::var("PHL_THREADS").ok().and_then(|raw| raw.parse::<usize>().ok()).map(|n| n.max(1))
}
