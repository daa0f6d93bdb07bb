//! `eval`: KNN and linear-probe accuracy over the feature components of a
//! trained model (`h`, `z`, and — when the head allows it — `h_r`, `h_n`).
//!
//! Writes `eval.csv` with columns `regime,feature,method,accuracy` and
//! prints the same rows. Components requested explicitly but unavailable
//! for the head (no linear final map, or a rank-deficient one) are errors;
//! the default selection simply reports what exists.

use std::path::Path;

use phl_core::eval::{component_eval, default_k, EvalMethod};

use super::{resolve_model, OutputSink};
use crate::error::{CliError, Result};

const ALL_COMPONENTS: [&str; 4] = ["h", "z", "h_r", "h_n"];

pub fn run(
    run_dir: Option<&Path>,
    checkpoint: Option<&Path>,
    config_path: Option<&Path>,
    components: &[String],
    methods: &[String],
    k: Option<usize>,
    out: Option<&Path>,
) -> Result<()> {
    let explicit_components = !components.is_empty();
    let wanted_components: Vec<String> = if explicit_components {
        for c in components {
            if !ALL_COMPONENTS.contains(&c.as_str()) {
                return Err(CliError::config(format!(
                    "--components: unknown component '{c}' (expected h, z, h_r, h_n)"
                )));
            }
        }
        components.to_vec()
    } else {
        ALL_COMPONENTS.iter().map(|s| s.to_string()).collect()
    };
    let wanted_methods: Vec<EvalMethod> = if methods.is_empty() {
        vec![EvalMethod::Knn, EvalMethod::Linear]
    } else {
        methods
            .iter()
            .map(|m| match m.as_str() {
                "knn" => Ok(EvalMethod::Knn),
                "linear" => Ok(EvalMethod::Linear),
                other => Err(CliError::config(format!(
                    "--methods: unknown method '{other}' (expected knn, linear)"
                ))),
            })
            .collect::<Result<_>>()?
    };

    let source = resolve_model(run_dir, checkpoint, config_path)?;
    let dataset = source.load_dataset()?;
    let (train_idx, test_idx) = source.config.split_indices(dataset.n())?;
    let train_ds = dataset.subset(&train_idx)?;
    let test_ds = dataset.subset(&test_idx)?;

    let mut eval_config = source.config.eval_config();
    if k.is_some() {
        eval_config.k = k;
    }
    let k_effective = eval_config.k.unwrap_or_else(|| default_k(train_ds.n()));
    if k_effective == 0 || k_effective > train_ds.n() {
        return Err(CliError::config(format!(
            "k = {k_effective} is outside 1..={} (the train-split size)",
            train_ds.n()
        )));
    }

    let outcome = component_eval(
        &source.encoder,
        &source.head,
        train_ds.examples(),
        train_ds.labels(),
        test_ds.examples(),
        test_ds.labels(),
        &eval_config,
    )?;

    if explicit_components {
        for component in &wanted_components {
            if !outcome.reports.iter().any(|r| &r.feature == component) {
                let reason = outcome.notice.as_deref().unwrap_or("component not produced");
                return Err(CliError::config(format!(
                    "component '{component}' is unavailable for this head: {reason}"
                )));
            }
        }
    }

    let regime = source.config.train.regime.as_str();
    let mut csv = String::from("regime,feature,method,accuracy\n");
    let mut printed = Vec::new();
    for report in &outcome.reports {
        if wanted_components.iter().any(|c| c == &report.feature)
            && wanted_methods.contains(&report.method)
        {
            csv.push_str(&format!(
                "{regime},{},{},{:.4}\n",
                report.feature,
                report.method.as_str(),
                report.accuracy
            ));
            printed.push(format!(
                "{:>4}  {:<6} accuracy {:.4}  ({}/{})",
                report.feature,
                report.method.as_str(),
                report.accuracy,
                report.correct,
                report.test_size
            ));
        }
    }

    let mut sink = OutputSink::resolve(&source, out)?;
    let csv_path = sink.dir().join("eval.csv");
    std::fs::write(&csv_path, csv).map_err(|e| CliError::io(&csv_path, e))?;
    sink.add_artifact("eval.csv");
    sink.commit()?;

    for line in &printed {
        println!("{line}");
    }
    if let Some(notice) = &outcome.notice {
        println!("note: {notice}");
    }
    println!("wrote {}", csv_path.display());
    Ok(())
}
