//! `train`: one self-supervised run from a config file into a fresh run
//! directory.
//!
//! Layout of a completed run directory:
//!
//! ```text
//! manifest.json            run record (config echo, hash, artifact list)
//! metrics.jsonl            one JSON object per epoch
//! checkpoint-initial/      model before the first epoch
//! checkpoint-final/        model after the last epoch
//! features-final/          train-split h/z tensors + labels
//! checkpoint-epoch-E/      optional periodic dumps (run.dump_every)
//! features-epoch-E/
//! ```
//!
//! A zero-epoch run stops after the manifest and the initial checkpoint.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use phl_core::datasets::LabeledDataset;
use phl_core::eval::extract_features;
use phl_core::models::{save_checkpoint, Encoder, Head};
use phl_core::train::run_schedule;

use super::{CHECKPOINT_FINAL, CHECKPOINT_INITIAL, FEATURES_FINAL, METRICS_FILE};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::manifest::{prepare_run_dir, RunManifest, RunStatus};

pub fn run(config_path: &Path, force: bool) -> Result<()> {
    let config = ExperimentConfig::load(config_path)?;
    if config.sweep.is_some() {
        return Err(CliError::config(
            "config has sweep.* keys; run the sweep subcommand instead of train",
        ));
    }
    let dir = train_into(&config, force)?;
    println!("run complete: {}", dir.display());
    Ok(())
}

/// Trains per `config` into `config.run.out_dir`; returns the run directory.
/// The manifest goes down first (atomically, status `Running`) and is
/// finalized `Complete` or `Failed` on the way out.
pub fn train_into(config: &ExperimentConfig, force: bool) -> Result<PathBuf> {
    let dir = config.run.out_dir.clone();
    prepare_run_dir(&dir, &config.hash(), force)?;
    let mut manifest = RunManifest::new(config.hash(), config.to_map());
    manifest.save(&dir)?;
    match execute(config, &dir, &mut manifest) {
        Ok(()) => {
            manifest.finalize(RunStatus::Complete);
            manifest.save(&dir)?;
            Ok(dir)
        }
        Err(err) => {
            manifest.finalize(RunStatus::Failed);
            let _ = manifest.save(&dir); // the training error is the one to report
            Err(err)
        }
    }
}

fn execute(config: &ExperimentConfig, dir: &Path, manifest: &mut RunManifest) -> Result<()> {
    let dataset = config.load_dataset()?;
    let (train_idx, _) = config.split_indices(dataset.n())?;
    let train_ds = dataset.subset(&train_idx)?;
    let mut encoder = config.build_encoder(train_ds.dim())?;
    let mut head = config.build_head()?;

    save_checkpoint(&dir.join(CHECKPOINT_INITIAL), &encoder, &head)?;
    manifest.add_dir_artifacts(dir, CHECKPOINT_INITIAL)?;

    let schedule = config.schedule();
    let total = schedule.epochs;
    if total == 0 {
        return Ok(());
    }

    let metrics_path = dir.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| CliError::io(&metrics_path, e))?;
    let mut writer = BufWriter::new(file);
    let chunk = config.eval.chunk;
    let dump_every = config.run.dump_every;
    let mut dumped: Vec<String> = Vec::new();
    let mut sink_err: Option<CliError> = None;

    let metrics = run_schedule(&schedule, &train_ds, &mut encoder, &mut head, |record, enc, hd| {
        if sink_err.is_some() {
            return;
        }
        let mut step = || -> Result<()> {
            let line = serde_json::to_string(record)
                .map_err(|e| CliError::io(&metrics_path, std::io::Error::other(e)))?;
            writer
                .write_all(line.as_bytes())
                .and_then(|_| writer.write_all(b"\n"))
                .and_then(|_| writer.flush())
                .map_err(|e| CliError::io(&metrics_path, e))?;
            println!(
                "epoch {:>4}/{total}  loss {:.6}  head-delta {:.3e}",
                record.epoch + 1,
                record.loss,
                record.g_delta_norm
            );
            let position = record.epoch + 1;
            if dump_every > 0 && position % dump_every == 0 && position != total {
                let ckpt = format!("checkpoint-epoch-{position}");
                save_checkpoint(&dir.join(&ckpt), enc, hd)?;
                dumped.push(ckpt);
                let feats = format!("features-epoch-{position}");
                dump_features(dir, &feats, enc, hd, &train_ds, chunk)?;
                dumped.push(feats);
            }
            Ok(())
        };
        if let Err(e) = step() {
            sink_err = Some(e);
        }
    });
    let metrics = metrics?;
    if let Some(e) = sink_err {
        return Err(e);
    }
    manifest.add_artifact(METRICS_FILE);
    for subdir in &dumped {
        manifest.add_dir_artifacts(dir, subdir)?;
    }

    save_checkpoint(&dir.join(CHECKPOINT_FINAL), &encoder, &head)?;
    manifest.add_dir_artifacts(dir, CHECKPOINT_FINAL)?;
    dump_features(dir, FEATURES_FINAL, &encoder, &head, &train_ds, chunk)?;
    manifest.add_dir_artifacts(dir, FEATURES_FINAL)?;

    println!(
        "trained {} epochs; final loss {:.6}",
        metrics.records.len(),
        metrics.final_loss().unwrap_or(f64::NAN)
    );
    Ok(())
}

/// Writes `h.pht`, `z.pht`, and `labels.txt` for `dataset` into
/// `dir/subdir`.
pub(crate) fn dump_features(
    dir: &Path,
    subdir: &str,
    encoder: &Encoder<f64>,
    head: &Head<f64>,
    dataset: &LabeledDataset<f64>,
    chunk: usize,
) -> Result<()> {
    let out = dir.join(subdir);
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    let (h, z) = extract_features(encoder, head, dataset.examples(), chunk)?;
    h.save(out.join("h.pht"))?;
    z.save(out.join("z.pht"))?;
    let labels_path = out.join("labels.txt");
    let mut text = String::with_capacity(dataset.n() * 3);
    for &label in dataset.labels() {
        text.push_str(&label.to_string());
        text.push('\n');
    }
    std::fs::write(&labels_path, text).map_err(|e| CliError::io(&labels_path, e))?;
    Ok(())
}
