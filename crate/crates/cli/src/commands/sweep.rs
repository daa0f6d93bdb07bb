//! `sweep`: the variant × seed experiment matrix, run as child `train`
//! processes so every run keeps single-process determinism.
//!
//! Each variant names a (regime, head) pairing. The `pretrained` variant
//! needs a donor: a joint run with a plain linear head is trained first for
//! each seed, and its final checkpoint becomes the frozen head. Child
//! configs, logs, and the two summary CSVs live under the sweep's own
//! output directory:
//!
//! ```text
//! manifest.json                 sweep record
//! configs/<name>.conf           one resolved config per child run
//! logs/<name>.log               child stdout+stderr
//! <variant>-s<seed>/            one run directory per child
//! pretrained-donor-s<seed>/     donor runs (only with the pretrained variant)
//! sweep-results.csv             per-run backbone accuracy rows
//! sweep-summary.csv             mean ± std per variant
//! ```
//!
//! Any child failure is recorded and the sweep continues; a sweep with
//! failures exits nonzero after the summary is written. `PHL_THREADS` caps
//! how many children run at once (default: available parallelism).

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use phl_core::datasets::LabeledDataset;
use phl_core::eval::{default_k, extract_features, knn_eval, linear_probe, EvalConfig};
use phl_core::models::load_checkpoint;

use super::{thread_cap, CHECKPOINT_FINAL};
use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::manifest::{prepare_run_dir, RunManifest, RunStatus};

/// The (regime, head) pairing behind each sweep variant name.
fn variant_spec(variant: &str) -> (&'static str, &'static str) {
    match variant {
        "joint" => ("joint", "nonlinear"),
        "bilevel" => ("bilevel", "nonlinear"),
        "no_head" => ("no_head", "none"),
        "fixed_random" => ("fixed_head", "fixed_random"),
        "diagonal_low_rank" => ("fixed_head", "diagonal_low_rank"),
        "pretrained" => ("fixed_head", "fixed_pretrained"),
        "pca_top" => ("pca_top", "linear"),
        "pca_bottom" => ("pca_bottom", "linear"),
        "slow_single" => ("slow_single", "nonlinear"),
        "slow_optimal" => ("slow_optimal", "nonlinear"),
        other => unreachable!("variant '{other}' passed config validation"),
    }
}

/// One child `train` invocation.
struct Job {
    name: String,
    /// `Some((variant, seed))` for runs that feed the summary; `None` for
    /// donor runs.
    variant: Option<(String, u64)>,
    config_path: PathBuf,
    run_dir: PathBuf,
    log_path: PathBuf,
}

pub fn run(config_path: &Path, force: bool) -> Result<()> {
    let base = ExperimentConfig::load(config_path)?;
    let Some(sweep) = base.sweep.clone() else {
        return Err(CliError::config(
            "config has no sweep.variants; add them or use the train subcommand",
        ));
    };
    let parent = base.run.out_dir.clone();
    prepare_run_dir(&parent, &base.hash(), force)?;
    let mut manifest = RunManifest::new(base.hash(), base.to_map());
    manifest.save(&parent)?;

    let outcome = execute(&base, &sweep.variants, &sweep.seeds, &parent, &mut manifest);
    match outcome {
        Ok(failed_total) => {
            let (failed, total) = failed_total;
            let status = if failed == 0 { RunStatus::Complete } else { RunStatus::Failed };
            manifest.finalize(status);
            manifest.save(&parent)?;
            if failed > 0 {
                return Err(CliError::PartialSweep { failed, total });
            }
            Ok(())
        }
        Err(err) => {
            manifest.finalize(RunStatus::Failed);
            let _ = manifest.save(&parent);
            Err(err)
        }
    }
}

/// Runs the full matrix; returns (failed runs, total runs).
fn execute(
    base: &ExperimentConfig,
    variants: &[String],
    seeds: &[u64],
    parent: &Path,
    manifest: &mut RunManifest,
) -> Result<(usize, usize)> {
    let configs_dir = parent.join("configs");
    let logs_dir = parent.join("logs");
    std::fs::create_dir_all(&configs_dir).map_err(|e| CliError::io(&configs_dir, e))?;
    std::fs::create_dir_all(&logs_dir).map_err(|e| CliError::io(&logs_dir, e))?;
    let exe = std::env::current_exe()
        .map_err(|e| CliError::io(Path::new("current executable"), e))?;
    let cap = thread_cap().unwrap_or_else(|| {
        std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
    });

    // Wave 1: donors for the pretrained variant, one per seed.
    let mut failed = 0usize;
    let mut total = 0usize;
    let mut donor_ok: BTreeMap<u64, bool> = BTreeMap::new();
    if variants.iter().any(|v| v == "pretrained") {
        let mut donor_jobs = Vec::new();
        for &seed in seeds {
            let name = format!("pretrained-donor-s{seed}");
            match build_job(base, parent, &configs_dir, &logs_dir, &name, None, |map| {
                map.insert("train.regime".into(), "joint".into());
                map.insert("model.head".into(), "linear".into());
                map.insert("run.seed".into(), seed.to_string());
            }) {
                Ok(job) => donor_jobs.push(job),
                Err(e) => {
                    println!("failed to prepare {name}: {e}");
                    donor_ok.insert(seed, false);
                    failed += 1;
                    total += 1;
                }
            }
        }
        total += donor_jobs.len();
        let outcomes = run_wave(&exe, &donor_jobs, cap);
        for (job, outcome) in donor_jobs.iter().zip(&outcomes) {
            let seed = job
                .name
                .rsplit_once("-s")
                .and_then(|(_, s)| s.parse::<u64>().ok())
                .expect("donor name carries its seed");
            match outcome {
                None => {
                    donor_ok.insert(seed, true);
                }
                Some(reason) => {
                    println!("{} failed: {reason} (see {})", job.name, job.log_path.display());
                    donor_ok.insert(seed, false);
                    failed += 1;
                }
            }
        }
        for job in &donor_jobs {
            record_job_files(manifest, job);
        }
    }

    // Wave 2: the variant × seed matrix.
    let mut jobs = Vec::new();
    for variant in variants {
        let (regime, head) = variant_spec(variant);
        for &seed in seeds {
            let name = format!("{variant}-s{seed}");
            if variant == "pretrained" && donor_ok.get(&seed) != Some(&true) {
                println!("skipping {name}: its donor run failed");
                failed += 1;
                total += 1;
                continue;
            }
            let donor_checkpoint =
                parent.join(format!("pretrained-donor-s{seed}")).join(CHECKPOINT_FINAL);
            let built = build_job(
                base,
                parent,
                &configs_dir,
                &logs_dir,
                &name,
                Some((variant.clone(), seed)),
                |map| {
                    map.insert("train.regime".into(), regime.into());
                    map.insert("model.head".into(), head.into());
                    map.insert("run.seed".into(), seed.to_string());
                    if head == "none" {
                        let feature = map["model.feature_dim"].clone();
                        map.insert("model.embed_dim".into(), feature);
                    }
                    if head == "fixed_pretrained" {
                        map.insert(
                            "model.pretrained_from".into(),
                            donor_checkpoint.display().to_string(),
                        );
                    }
                },
            );
            match built {
                Ok(job) => jobs.push(job),
                Err(e) => {
                    println!("failed to prepare {name}: {e}");
                    failed += 1;
                    total += 1;
                }
            }
        }
    }
    total += jobs.len();
    let outcomes = run_wave(&exe, &jobs, cap);
    let mut job_failed: Vec<Option<String>> = outcomes;
    for job in &jobs {
        record_job_files(manifest, job);
    }

    // Evaluate successful runs in-process (sequentially): KNN and linear
    // probe on the backbone features h.
    let dataset = base.load_dataset()?;
    let (train_idx, test_idx) = base.split_indices(dataset.n())?;
    let train_ds = dataset.subset(&train_idx)?;
    let test_ds = dataset.subset(&test_idx)?;
    let eval_config = base.eval_config();

    let mut accuracy: BTreeMap<(String, u64), (f64, f64)> = BTreeMap::new();
    for (job, outcome) in jobs.iter().zip(job_failed.iter_mut()) {
        if outcome.is_some() {
            println!(
                "{} failed: {} (see {})",
                job.name,
                outcome.as_deref().unwrap_or(""),
                job.log_path.display()
            );
            continue;
        }
        let key = job.variant.clone().expect("wave-2 jobs carry variants");
        match eval_backbone(&job.run_dir, &train_ds, &test_ds, &eval_config) {
            Ok(pair) => {
                accuracy.insert(key, pair);
            }
            Err(e) => {
                println!("{} evaluation failed: {e}", job.name);
                *outcome = Some(format!("evaluation failed: {e}"));
            }
        }
    }
    failed += job_failed.iter().filter(|o| o.is_some()).count();

    // Per-run rows.
    let mut results = String::from("variant,seed,feature,method,accuracy\n");
    for variant in variants {
        for &seed in seeds {
            if let Some((knn, linear)) = accuracy.get(&(variant.clone(), seed)) {
                results.push_str(&format!("{variant},{seed},h,knn,{knn:.4}\n"));
                results.push_str(&format!("{variant},{seed},h,linear,{linear:.4}\n"));
            }
        }
    }
    let results_path = parent.join("sweep-results.csv");
    std::fs::write(&results_path, results).map_err(|e| CliError::io(&results_path, e))?;
    manifest.add_artifact("sweep-results.csv");

    // Aggregate rows, one per variant.
    let mut summary = String::from("variant,n_seeds,knn_h_mean,knn_h_std,linear_h_mean,linear_h_std\n");
    println!("\n{:<18} {:>2}  {:>17}  {:>17}", "variant", "n", "knn(h)", "linear(h)");
    for variant in variants {
        let knns: Vec<f64> = seeds
            .iter()
            .filter_map(|&s| accuracy.get(&(variant.clone(), s)).map(|p| p.0))
            .collect();
        let linears: Vec<f64> = seeds
            .iter()
            .filter_map(|&s| accuracy.get(&(variant.clone(), s)).map(|p| p.1))
            .collect();
        let (knn_mean, knn_std) = mean_std(&knns);
        let (lin_mean, lin_std) = mean_std(&linears);
        summary.push_str(&format!(
            "{variant},{},{knn_mean:.4},{knn_std:.4},{lin_mean:.4},{lin_std:.4}\n",
            knns.len()
        ));
        println!(
            "{variant:<18} {:>2}  {knn_mean:.4} +/- {knn_std:.4}  {lin_mean:.4} +/- {lin_std:.4}",
            knns.len()
        );
    }
    let summary_path = parent.join("sweep-summary.csv");
    std::fs::write(&summary_path, summary).map_err(|e| CliError::io(&summary_path, e))?;
    manifest.add_artifact("sweep-summary.csv");

    if failed > 0 {
        println!("\n{failed} of {total} runs failed");
    } else {
        println!("\nall {total} runs complete");
    }
    Ok((failed, total))
}

/// Builds a child config (base map with `tweak` applied, re-validated),
/// writes it under `configs/`, and returns the ready-to-spawn job.
fn build_job(
    base: &ExperimentConfig,
    parent: &Path,
    configs_dir: &Path,
    logs_dir: &Path,
    name: &str,
    variant: Option<(String, u64)>,
    tweak: impl FnOnce(&mut BTreeMap<String, String>),
) -> Result<Job> {
    let mut map = base.to_map();
    map.remove("sweep.variants");
    map.remove("sweep.seeds");
    // Children re-derive their model seed from their own run seed, and the
    // head-specific keys are re-established per variant.
    map.remove("model.seed");
    map.remove("model.pretrained_from");
    let base_head_hidden = map.remove("model.head_hidden");
    let run_dir = parent.join(name);
    map.insert("run.out_dir".into(), run_dir.display().to_string());
    tweak(&mut map);
    if map.get("model.head").map(String::as_str) == Some("nonlinear") {
        if let Some(hidden) = base_head_hidden {
            map.insert("model.head_hidden".into(), hidden);
        }
    }
    let config = ExperimentConfig::from_map(map)
        .map_err(|e| CliError::config(format!("{name}: {e}")))?;
    let config_path = configs_dir.join(format!("{name}.conf"));
    std::fs::write(&config_path, config.echo()).map_err(|e| CliError::io(&config_path, e))?;
    Ok(Job {
        name: name.to_string(),
        variant,
        config_path,
        run_dir,
        log_path: logs_dir.join(format!("{name}.log")),
    })
}

/// Records a job's config and log files in the sweep manifest (the child's
/// own run directory carries its own manifest).
fn record_job_files(manifest: &mut RunManifest, job: &Job) {
    manifest.add_artifact(format!("configs/{}.conf", job.name));
    if job.log_path.is_file() {
        manifest.add_artifact(format!("logs/{}.log", job.name));
    }
}

/// Spawns up to `cap` children at a time; returns one outcome per job
/// (`None` = success, `Some(reason)` = failure).
fn run_wave(exe: &Path, jobs: &[Job], cap: usize) -> Vec<Option<String>> {
    let mut outcomes: Vec<Option<String>> = vec![Some("did not run".to_string()); jobs.len()];
    let mut next = 0usize;
    let mut running: Vec<(usize, Child)> = Vec::new();
    while next < jobs.len() || !running.is_empty() {
        while running.len() < cap && next < jobs.len() {
            match spawn_job(exe, &jobs[next]) {
                Ok(child) => {
                    println!("started {}", jobs[next].name);
                    running.push((next, child));
                }
                Err(e) => outcomes[next] = Some(format!("spawn failed: {e}")),
            }
            next += 1;
        }
        let mut progressed = false;
        let mut i = 0;
        while i < running.len() {
            match running[i].1.try_wait() {
                Ok(Some(status)) => {
                    let (idx, _) = running.remove(i);
                    outcomes[idx] = if status.success() {
                        println!("finished {}", jobs[idx].name);
                        None
                    } else {
                        Some(match status.code() {
                            Some(code) => format!("exit code {code}"),
                            None => "terminated by signal".to_string(),
                        })
                    };
                    progressed = true;
                }
                Ok(None) => i += 1,
                Err(e) => {
                    let (idx, _) = running.remove(i);
                    outcomes[idx] = Some(format!("wait failed: {e}"));
                    progressed = true;
                }
            }
        }
        if !progressed && !running.is_empty() {
            std::thread::sleep(std::time::Duration::from_millis(25));
        }
    }
    outcomes
}

fn spawn_job(exe: &Path, job: &Job) -> Result<Child> {
    let log = File::create(&job.log_path).map_err(|e| CliError::io(&job.log_path, e))?;
    let log_err = log.try_clone().map_err(|e| CliError::io(&job.log_path, e))?;
    Command::new(exe)
        .arg("train")
        .arg(&job.config_path)
        .stdout(Stdio::from(log))
        .stderr(Stdio::from(log_err))
        .spawn()
        .map_err(|e| CliError::io(exe, e))
}

/// KNN and linear-probe accuracy on the backbone features of one finished
/// run.
fn eval_backbone(
    run_dir: &Path,
    train_ds: &LabeledDataset<f64>,
    test_ds: &LabeledDataset<f64>,
    config: &EvalConfig<f64>,
) -> Result<(f64, f64)> {
    let (encoder, head) = load_checkpoint::<f64>(&run_dir.join(CHECKPOINT_FINAL))?;
    let (h_train, _) = extract_features(&encoder, &head, train_ds.examples(), config.chunk)?;
    let (h_test, _) = extract_features(&encoder, &head, test_ds.examples(), config.chunk)?;
    let k = config.k.unwrap_or_else(|| default_k(train_ds.n()));
    let knn = knn_eval(&h_train, train_ds.labels(), &h_test, test_ds.labels(), k)?;
    let probe = linear_probe(&h_train, train_ds.labels(), &h_test, test_ds.labels(), &config.probe)?;
    Ok((knn.accuracy, probe.accuracy))
}

/// Mean and sample standard deviation (n − 1 divisor; 0 for a single value).
fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
