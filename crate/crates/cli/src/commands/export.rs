//! `export-features`: persist a model's feature matrices for one dataset
//! split as tensor files plus a label sidecar.
//!
//! Always writes `h.pht`, `z.pht`, and `labels.txt` into
//! `features-<split>/`; when the head ends in a full-row-rank linear map
//! (and the split has at least two rows), `h_r.pht` and `h_n.pht` are
//! written alongside.

use std::path::Path;

use phl_core::diagnostics::analyze;
use phl_core::eval::extract_features;

use super::{resolve_model, OutputSink};
use crate::error::{CliError, Result};

pub fn run(
    run_dir: Option<&Path>,
    checkpoint: Option<&Path>,
    config_path: Option<&Path>,
    split: &str,
    out: Option<&Path>,
) -> Result<()> {
    let source = resolve_model(run_dir, checkpoint, config_path)?;
    let dataset = source.load_dataset()?;
    let (train_idx, test_idx) = source.config.split_indices(dataset.n())?;
    let subset = match split {
        "train" => dataset.subset(&train_idx)?,
        "test" => dataset.subset(&test_idx)?,
        "all" => dataset,
        other => {
            return Err(CliError::config(format!(
                "--split: unknown value '{other}' (expected train, test, or all)"
            )))
        }
    };

    let mut sink = OutputSink::resolve(&source, out)?;
    let subdir = format!("features-{split}");
    let feat_dir = sink.dir().join(&subdir);
    std::fs::create_dir_all(&feat_dir).map_err(|e| CliError::io(&feat_dir, e))?;

    let (h, z) =
        extract_features(&source.encoder, &source.head, subset.examples(), source.config.eval.chunk)?;
    h.save(feat_dir.join("h.pht"))?;
    z.save(feat_dir.join("z.pht"))?;
    let labels_path = feat_dir.join("labels.txt");
    let mut text = String::with_capacity(subset.n() * 3);
    for &label in subset.labels() {
        text.push_str(&label.to_string());
        text.push('\n');
    }
    std::fs::write(&labels_path, text).map_err(|e| CliError::io(&labels_path, e))?;

    // The range/null-space split rides along whenever the head admits one
    // (the analysis needs at least two rows to center the features).
    let mut note: Option<String> = None;
    if subset.n() >= 2 {
        let checkpoint_name = source.checkpoint_dir.display().to_string();
        let diagnostics = analyze(&checkpoint_name, &source.head, &h, &z)?;
        if let (Some(h_r), Some(h_n)) = (&diagnostics.h_r, &diagnostics.h_n) {
            h_r.save(feat_dir.join("h_r.pht"))?;
            h_n.save(feat_dir.join("h_n.pht"))?;
        } else {
            note = Some(match &diagnostics.report.null_space {
                Some(ns) => ns.note.clone(),
                None => "this head has no linear map, so h_r/h_n were not exported".to_string(),
            });
        }
    } else {
        note = Some("split has fewer than two rows; h_r/h_n skipped".to_string());
    }

    sink.add_dir(&subdir)?;
    sink.commit()?;

    println!(
        "exported {} rows ({} columns of h, {} of z) to {}",
        subset.n(),
        source.encoder.output_dim(),
        source.head.output_dim(),
        feat_dir.display()
    );
    if let Some(note) = note {
        println!("note: {note}");
    }
    Ok(())
}
