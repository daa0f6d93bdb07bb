//! `diagnose`: covariance spectra, numerical ranks, the rank deficit
//! between backbone features and embeddings, and — when the head ends in a
//! linear map — the range/null-space split of the features.
//!
//! Outputs `diagnostics.json` plus `h_r.pht` / `h_n.pht` tensors (when the
//! decomposition exists), recorded in the run's manifest (or a fresh one
//! under `--out`).

use std::path::Path;

use phl_core::diagnostics::analyze;
use phl_core::eval::extract_features;

use super::{resolve_model, OutputSink};
use crate::error::{CliError, Result};

pub fn run(
    run_dir: Option<&Path>,
    checkpoint: Option<&Path>,
    config_path: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let source = resolve_model(run_dir, checkpoint, config_path)?;
    let dataset = source.load_dataset()?;
    let (train_idx, _) = source.config.split_indices(dataset.n())?;
    let train_ds = dataset.subset(&train_idx)?;

    let (h, z) = extract_features(
        &source.encoder,
        &source.head,
        train_ds.examples(),
        source.config.eval.chunk,
    )?;
    let checkpoint_name = source.checkpoint_dir.display().to_string();
    let diagnostics = analyze(&checkpoint_name, &source.head, &h, &z)?;

    let mut sink = OutputSink::resolve(&source, out)?;
    let dir = sink.dir().to_path_buf();
    let json_path = dir.join("diagnostics.json");
    let json = serde_json::to_string_pretty(&diagnostics.report)
        .map_err(|e| CliError::io(&json_path, std::io::Error::other(e)))?;
    std::fs::write(&json_path, json).map_err(|e| CliError::io(&json_path, e))?;
    sink.add_artifact("diagnostics.json");
    if let Some(h_r) = &diagnostics.h_r {
        h_r.save(dir.join("h_r.pht"))?;
        sink.add_artifact("h_r.pht");
    }
    if let Some(h_n) = &diagnostics.h_n {
        h_n.save(dir.join("h_n.pht"))?;
        sink.add_artifact("h_n.pht");
    }
    sink.commit()?;

    let report = &diagnostics.report;
    println!("head kind: {}", report.head_kind);
    for space in &report.spaces {
        println!(
            "{:>4}: rank {:>3} of {}x{} (tolerance {:.3e})",
            space.space, space.rank, space.rows, space.cols, space.tolerance
        );
    }
    println!("rank deficit (h vs z): {}", report.rank_deficit);
    match &report.null_space {
        Some(ns) => println!(
            "null space: basis {}, rank {}, null dim {} — {}",
            ns.basis, ns.rank, ns.null_dim, ns.note
        ),
        None => println!("null space: not applicable for this head"),
    }
    println!("wrote {}", json_path.display());
    Ok(())
}
