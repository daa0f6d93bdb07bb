//! Flat dotted-key experiment configuration.
//!
//! A config document is plain text: one `key = value` pair per line, `#`
//! starts a full-line comment, blank lines are ignored. Keys are grouped by
//! dotted prefix (`dataset.`, `model.`, `train.`, `aug.`, `eval.`, `run.`,
//! `sweep.`). Unknown keys are errors so hyperparameter typos fail loudly
//! instead of silently falling back to defaults.
//!
//! Parsing materializes every default, so [`ExperimentConfig::echo`] prints
//! the complete resolved configuration in canonical form (sorted keys, one
//! per line). The echo is what gets hashed ([`ExperimentConfig::hash`]) and
//! stored in run manifests; re-parsing an echo yields the same echo and the
//! same hash.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use phl_core::augment::AugConfig;
use phl_core::datasets::{
    generate_synthetic, load_cifar10_binary, LabeledDataset, SynthConfig,
};
use phl_core::eval::{EvalConfig, ProbeConfig};
use phl_core::loss::{LossConfig, NegativePolicy};
use phl_core::models::{init_encoder, init_head, load_checkpoint, Encoder, Head, HeadKind};
use phl_core::optim::{OptimConfig, OptimKind};
use phl_core::rng::{derive_seed, permutation};
use phl_core::train::{PcaWhich, Regime, TrainSchedule};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

/// Seed-derivation tag for the train/test split permutation, distinct from
/// every tag the training loop uses.
const SPLIT_TAG: u64 = 401;

/// Default hidden width of the nonlinear head, part of the stock desk-scale
/// geometry (features 64 → hidden 48 → embeddings 16).
const DEFAULT_HEAD_HIDDEN: usize = 48;

/// Which loader backs the dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Cifar10,
}

impl DatasetKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::Cifar10 => "cifar10",
        }
    }

    fn parse(raw: &str) -> Result<DatasetKind> {
        match raw {
            "synthetic" => Ok(DatasetKind::Synthetic),
            "cifar10" => Ok(DatasetKind::Cifar10),
            other => Err(CliError::config(format!(
                "dataset.kind: unknown value '{other}' (expected synthetic or cifar10)"
            ))),
        }
    }
}

/// Update regime by name; carries no parameters (those live in
/// [`TrainSection`]) so it can be parsed and echoed independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegimeName {
    Joint,
    Bilevel,
    FixedHead,
    PcaTop,
    PcaBottom,
    SlowSingle,
    SlowOptimal,
    NoHead,
}

impl RegimeName {
    pub fn as_str(self) -> &'static str {
        match self {
            RegimeName::Joint => "joint",
            RegimeName::Bilevel => "bilevel",
            RegimeName::FixedHead => "fixed_head",
            RegimeName::PcaTop => "pca_top",
            RegimeName::PcaBottom => "pca_bottom",
            RegimeName::SlowSingle => "slow_single",
            RegimeName::SlowOptimal => "slow_optimal",
            RegimeName::NoHead => "no_head",
        }
    }

    pub fn parse(raw: &str) -> Result<RegimeName> {
        Ok(match raw {
            "joint" => RegimeName::Joint,
            "bilevel" => RegimeName::Bilevel,
            "fixed_head" => RegimeName::FixedHead,
            "pca_top" => RegimeName::PcaTop,
            "pca_bottom" => RegimeName::PcaBottom,
            "slow_single" => RegimeName::SlowSingle,
            "slow_optimal" => RegimeName::SlowOptimal,
            "no_head" => RegimeName::NoHead,
            other => {
                return Err(CliError::config(format!(
                    "train.regime: unknown value '{other}' (expected joint, bilevel, \
                     fixed_head, pca_top, pca_bottom, slow_single, slow_optimal, or no_head)"
                )))
            }
        })
    }
}

/// `dataset.*` keys.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// Seed for synthetic generation and for the train/test split.
    pub seed: u64,
    /// Fraction of examples held out for evaluation, strictly inside (0, 1).
    pub test_fraction: f64,
    /// Populated only for the synthetic kind; its `seed` mirrors `self.seed`.
    pub synth: Option<SynthConfig<f64>>,
    /// Binary record files, only for the cifar10 kind.
    pub paths: Vec<String>,
    /// Keep only the first `limit` examples (cifar10 only).
    pub limit: Option<usize>,
}

/// `model.*` keys.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub hidden: Vec<usize>,
    /// Backbone output width m.
    pub feature_dim: usize,
    /// Head output width d.
    pub embed_dim: usize,
    pub head: HeadKind,
    /// Hidden width of the nonlinear head; `Some` exactly when the head is
    /// nonlinear (defaulted to `feature_dim`).
    pub head_hidden: Option<usize>,
    /// Donor checkpoint directory; `Some` exactly for fixed_pretrained.
    pub pretrained_from: Option<PathBuf>,
    /// Initialization seed (defaults to `run.seed`).
    pub seed: u64,
}

/// `train.*` keys. Regime parameters are always present (and echoed) no
/// matter the regime, so switching regimes never invalidates a document.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSection {
    pub regime: RegimeName,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub include_positive: bool,
    pub inner_steps: usize,
    pub lambda: f64,
    pub inner_persist: bool,
    pub subset_cap: usize,
    /// Basis size for the pca regimes (defaults to `embed_dim`).
    pub pca_k: usize,
    pub slow_tol: f64,
    pub slow_max_iters: usize,
    pub optim_f: OptimConfig<f64>,
    pub optim_g: OptimConfig<f64>,
}

/// `eval.*` keys.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    /// Neighbour count; `None` derives it from the train-split size.
    pub k: Option<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Probe mini-batch size; `None` trains full-batch.
    pub batch_size: Option<usize>,
    /// Feature-extraction row chunk.
    pub chunk: usize,
}

/// `run.*` keys.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Dump features/checkpoint every this many epochs (0 = final only).
    pub dump_every: usize,
}

/// `sweep.*` keys; present only when `sweep.variants` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSection {
    pub variants: Vec<String>,
    pub seeds: Vec<u64>,
}

/// Variant names `cmd_sweep` understands, each a (regime, head) pairing.
pub const SWEEP_VARIANTS: &[&str] = &[
    "joint",
    "bilevel",
    "no_head",
    "fixed_random",
    "diagonal_low_rank",
    "pretrained",
    "pca_top",
    "pca_bottom",
    "slow_single",
    "slow_optimal",
];

/// One experiment, fully resolved: every default is materialized and every
/// cross-field constraint has been checked.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub aug: AugConfig<f64>,
    pub eval: EvalSection,
    pub run: RunSection,
    pub sweep: Option<SweepSection>,
}

/// Splits a config document into raw key/value pairs, enforcing the line
/// grammar: `key = value`, full-line `#` comments, no duplicate keys.
pub fn parse_document(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = raw_line.trim();
        let lineno = i + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::config(format!(
                "line {lineno}: expected 'key = value', got '{line}'"
            )));
        };
        let key = key.trim();
        let value = value.trim();
        if key.is_empty()
            || !key
                .chars()
                .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_' || c == '.')
        {
            return Err(CliError::config(format!(
                "line {lineno}: bad key '{key}' (lowercase letters, digits, '_', '.')"
            )));
        }
        if value.is_empty() {
            return Err(CliError::config(format!("line {lineno}: key '{key}' has no value")));
        }
        if map.insert(key.to_string(), value.to_string()).is_some() {
            return Err(CliError::config(format!("line {lineno}: duplicate key '{key}'")));
        }
    }
    Ok(map)
}

/// Canonical text for one value; floats use the shortest representation that
/// parses back to the same bits.
fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn fmt_bool(v: bool) -> String {
    v.to_string()
}

/// Typed reads over the raw key map, consuming keys as they are read so
/// leftovers can be reported as unknown.
struct Reader {
    map: BTreeMap<String, String>,
}

impl Reader {
    fn new(map: BTreeMap<String, String>) -> Reader {
        Reader { map }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.map.remove(key)
    }

    fn required(&mut self, key: &str) -> Result<String> {
        self.take(key)
            .ok_or_else(|| CliError::config(format!("missing required key '{key}'")))
    }

    fn parse_as<T: std::str::FromStr>(key: &str, raw: &str, what: &str) -> Result<T> {
        raw.parse::<T>()
            .map_err(|_| CliError::config(format!("{key}: expected {what}, got '{raw}'")))
    }

    fn usize_or(&mut self, key: &str, default: usize) -> Result<usize> {
        match self.take(key) {
            Some(raw) => Self::parse_as(key, &raw, "an unsigned integer"),
            None => Ok(default),
        }
    }

    fn opt_usize(&mut self, key: &str) -> Result<Option<usize>> {
        self.take(key)
            .map(|raw| Self::parse_as(key, &raw, "an unsigned integer"))
            .transpose()
    }

    fn u64_or(&mut self, key: &str, default: u64) -> Result<u64> {
        match self.take(key) {
            Some(raw) => Self::parse_as(key, &raw, "an unsigned integer"),
            None => Ok(default),
        }
    }

    fn f64_or(&mut self, key: &str, default: f64) -> Result<f64> {
        match self.take(key) {
            Some(raw) => {
                let v: f64 = Self::parse_as(key, &raw, "a number")?;
                if !v.is_finite() {
                    return Err(CliError::config(format!("{key}: must be finite, got '{raw}'")));
                }
                Ok(v)
            }
            None => Ok(default),
        }
    }

    fn bool_or(&mut self, key: &str, default: bool) -> Result<bool> {
        match self.take(key) {
            Some(raw) => match raw.as_str() {
                "true" => Ok(true),
                "false" => Ok(false),
                other => {
                    Err(CliError::config(format!("{key}: expected true or false, got '{other}'")))
                }
            },
            None => Ok(default),
        }
    }

    fn string_or(&mut self, key: &str, default: &str) -> String {
        self.take(key).unwrap_or_else(|| default.to_string())
    }

    /// Errors if `key` is present; `context` explains when it is allowed.
    fn reject(&mut self, key: &str, context: &str) -> Result<()> {
        if self.take(key).is_some() {
            return Err(CliError::config(format!("{key} only applies {context}")));
        }
        Ok(())
    }

    /// Every key must have been consumed by now.
    fn finish(self) -> Result<()> {
        if self.map.is_empty() {
            return Ok(());
        }
        let unknown: Vec<&str> = self.map.keys().map(String::as_str).collect();
        Err(CliError::config(format!("unknown keys: {}", unknown.join(", "))))
    }
}

fn parse_usize_list(key: &str, raw: &str) -> Result<Vec<usize>> {
    raw.split(',')
        .map(|part| Reader::parse_as::<usize>(key, part.trim(), "an unsigned integer"))
        .collect()
}

fn parse_u64_list(key: &str, raw: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .map(|part| Reader::parse_as::<u64>(key, part.trim(), "an unsigned integer"))
        .collect()
}

fn parse_string_list(raw: &str) -> Vec<String> {
    raw.split(',').map(|part| part.trim().to_string()).collect()
}

fn join_list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_optim(
    reader: &mut Reader,
    kind_key: &str,
    lr_key: &str,
    wd_key: &str,
    mom_key: &str,
) -> Result<OptimConfig<f64>> {
    let kind = match reader.string_or(kind_key, "adam").as_str() {
        "adam" => OptimKind::Adam,
        "sgd" => OptimKind::SgdMomentum,
        other => {
            return Err(CliError::config(format!(
                "{kind_key}: unknown value '{other}' (expected adam or sgd)"
            )))
        }
    };
    Ok(OptimConfig {
        kind,
        lr: reader.f64_or(lr_key, 1e-3)?,
        weight_decay: reader.f64_or(wd_key, 1e-6)?,
        momentum: reader.f64_or(mom_key, 0.0)?,
    })
}

impl ExperimentConfig {
    /// Parses, materializes defaults, and validates a config document.
    pub fn parse(text: &str) -> Result<ExperimentConfig> {
        Self::from_map(parse_document(text)?)
    }

    /// Reads a config file and parses it.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Builds a config from raw key/value pairs (see [`parse_document`]).
    pub fn from_map(map: BTreeMap<String, String>) -> Result<ExperimentConfig> {
        let mut r = Reader::new(map);

        // run.* first: model.seed defaults to run.seed.
        let run = RunSection {
            seed: r.u64_or("run.seed", 0)?,
            out_dir: PathBuf::from(r.required("run.out_dir")?),
            dump_every: r.usize_or("run.dump_every", 0)?,
        };

        // dataset.*
        let kind = DatasetKind::parse(&r.required("dataset.kind")?)?;
        let dataset_seed = r.u64_or("dataset.seed", 7)?;
        let test_fraction = r.f64_or("dataset.test_fraction", 0.25)?;
        if !(test_fraction > 0.0 && test_fraction < 1.0) {
            return Err(CliError::config(format!(
                "dataset.test_fraction: must be strictly between 0 and 1, got {test_fraction}"
            )));
        }
        let dataset = match kind {
            DatasetKind::Synthetic => {
                r.reject("dataset.paths", "to the cifar10 dataset kind")?;
                r.reject("dataset.limit", "to the cifar10 dataset kind")?;
                let synth = SynthConfig {
                    content_dim: r.usize_or("dataset.content_dim", 8)?,
                    style_dim: r.usize_or("dataset.style_dim", 24)?,
                    class_count: r.usize_or("dataset.classes", 10)?,
                    samples_per_class: r.usize_or("dataset.samples_per_class", 200)?,
                    content_separation: r.f64_or("dataset.content_separation", 6.0)?,
                    style_scale: r.f64_or("dataset.style_scale", 3.0)?,
                    content_noise: r.f64_or("dataset.content_noise", 1.0)?,
                    seed: dataset_seed,
                };
                if synth.content_dim == 0 {
                    return Err(CliError::config("dataset.content_dim: must be >= 1"));
                }
                if synth.class_count < 2 {
                    return Err(CliError::config(
                        "dataset.classes: must be >= 2 so evaluation has something to separate",
                    ));
                }
                if synth.samples_per_class == 0 {
                    return Err(CliError::config("dataset.samples_per_class: must be >= 1"));
                }
                if synth.content_separation <= 0.0 {
                    return Err(CliError::config("dataset.content_separation: must be > 0"));
                }
                if synth.style_scale < 0.0 {
                    return Err(CliError::config("dataset.style_scale: must be >= 0"));
                }
                if synth.content_noise < 0.0 {
                    return Err(CliError::config("dataset.content_noise: must be >= 0"));
                }
                DatasetSection {
                    kind,
                    seed: dataset_seed,
                    test_fraction,
                    synth: Some(synth),
                    paths: Vec::new(),
                    limit: None,
                }
            }
            DatasetKind::Cifar10 => {
                for key in [
                    "dataset.classes",
                    "dataset.content_dim",
                    "dataset.style_dim",
                    "dataset.samples_per_class",
                    "dataset.content_separation",
                    "dataset.style_scale",
                    "dataset.content_noise",
                ] {
                    r.reject(key, "to the synthetic dataset kind")?;
                }
                let paths = parse_string_list(&r.required("dataset.paths")?);
                if paths.iter().any(String::is_empty) {
                    return Err(CliError::config("dataset.paths: empty path in list"));
                }
                let limit = r.opt_usize("dataset.limit")?;
                if let Some(n) = limit {
                    if n < 2 {
                        return Err(CliError::config(format!(
                            "dataset.limit: must be >= 2 to allow a train/test split, got {n}"
                        )));
                    }
                }
                DatasetSection {
                    kind,
                    seed: dataset_seed,
                    test_fraction,
                    synth: None,
                    paths,
                    limit,
                }
            }
        };

        // model.*
        let hidden = parse_usize_list("model.hidden", &r.string_or("model.hidden", "256,128"))?;
        if hidden.iter().any(|&w| w == 0) {
            return Err(CliError::config("model.hidden: layer widths must be >= 1"));
        }
        let feature_dim = r.usize_or("model.feature_dim", 64)?;
        let embed_dim = r.usize_or("model.embed_dim", 16)?;
        if feature_dim == 0 || embed_dim == 0 {
            return Err(CliError::config("model dims must be >= 1"));
        }
        if embed_dim > feature_dim {
            return Err(CliError::config(format!(
                "model.embed_dim ({embed_dim}) must not exceed model.feature_dim ({feature_dim})"
            )));
        }
        let head_raw = r.string_or("model.head", "nonlinear");
        let head = HeadKind::parse(&head_raw)
            .map_err(|_| CliError::config(format!("model.head: unknown value '{head_raw}'")))?;
        if head == HeadKind::PcaLinear {
            return Err(CliError::config(
                "model.head: pca_linear heads are built by the pca regimes, not configured \
                 directly (set train.regime = pca_top or pca_bottom)",
            ));
        }
        let head_hidden = if head == HeadKind::NonLinear {
            let w = r.usize_or("model.head_hidden", DEFAULT_HEAD_HIDDEN)?;
            if w == 0 {
                return Err(CliError::config("model.head_hidden: must be >= 1"));
            }
            Some(w)
        } else {
            r.reject("model.head_hidden", "to the nonlinear head")?;
            None
        };
        let pretrained_from = if head == HeadKind::FixedPretrained {
            Some(PathBuf::from(r.required("model.pretrained_from")?))
        } else {
            r.reject("model.pretrained_from", "to the fixed_pretrained head")?;
            None
        };
        let model = ModelSection {
            hidden,
            feature_dim,
            embed_dim,
            head,
            head_hidden,
            pretrained_from,
            seed: r.u64_or("model.seed", run.seed)?,
        };

        // train.*
        let regime = RegimeName::parse(&r.string_or("train.regime", "joint"))?;
        let train = TrainSection {
            regime,
            epochs: r.usize_or("train.epochs", 60)?,
            batch_size: r.usize_or("train.batch_size", 128)?,
            temperature: r.f64_or("train.temperature", 0.5)?,
            include_positive: r.bool_or("train.include_positive", true)?,
            inner_steps: r.usize_or("train.inner_steps", 5)?,
            lambda: r.f64_or("train.lambda", 1.0)?,
            inner_persist: r.bool_or("train.inner_persist", true)?,
            subset_cap: r.usize_or("train.subset_cap", 2048)?,
            pca_k: r.usize_or("train.pca_k", embed_dim)?,
            slow_tol: r.f64_or("train.slow_tol", 1e-3)?,
            slow_max_iters: r.usize_or("train.slow_max_iters", 100)?,
            optim_f: parse_optim(
                &mut r,
                "train.optim_f",
                "train.lr_f",
                "train.weight_decay_f",
                "train.momentum_f",
            )?,
            optim_g: parse_optim(
                &mut r,
                "train.optim_g",
                "train.lr_g",
                "train.weight_decay_g",
                "train.momentum_g",
            )?,
        };

        // aug.*
        let aug = AugConfig {
            crop_enabled: r.bool_or("aug.crop_enabled", true)?,
            crop_scale: (r.f64_or("aug.crop_lo", 0.2)?, r.f64_or("aug.crop_hi", 1.0)?),
            flip_enabled: r.bool_or("aug.flip_enabled", true)?,
            flip_prob: r.f64_or("aug.flip_prob", 0.5)?,
            jitter_enabled: r.bool_or("aug.jitter_enabled", true)?,
            jitter_prob: r.f64_or("aug.jitter_prob", 0.8)?,
            brightness: r.f64_or("aug.brightness", 0.4)?,
            contrast: r.f64_or("aug.contrast", 0.4)?,
            saturation: r.f64_or("aug.saturation", 0.4)?,
            hue: r.f64_or("aug.hue", 0.1)?,
            grayscale_enabled: r.bool_or("aug.grayscale_enabled", true)?,
            grayscale_prob: r.f64_or("aug.grayscale_prob", 0.2)?,
            style_resample: r.bool_or("aug.style_resample", true)?,
            noise_sigma: r.f64_or("aug.noise_sigma", 0.1)?,
        };

        // eval.*
        let eval = EvalSection {
            k: r.opt_usize("eval.k")?,
            epochs: r.usize_or("eval.epochs", 200)?,
            lr: r.f64_or("eval.lr", 1e-3)?,
            weight_decay: r.f64_or("eval.weight_decay", 1e-6)?,
            seed: r.u64_or("eval.seed", 0)?,
            batch_size: r.opt_usize("eval.batch_size")?,
            chunk: r.usize_or("eval.chunk", 256)?,
        };
        if eval.k == Some(0) {
            return Err(CliError::config("eval.k: must be >= 1"));
        }
        if eval.batch_size == Some(0) {
            return Err(CliError::config("eval.batch_size: must be >= 1"));
        }
        if eval.chunk == 0 {
            return Err(CliError::config("eval.chunk: must be >= 1"));
        }
        if eval.lr < 0.0 || eval.weight_decay < 0.0 {
            return Err(CliError::config("eval.lr and eval.weight_decay must be >= 0"));
        }

        // sweep.*
        let sweep = match r.take("sweep.variants") {
            Some(raw) => {
                let variants = parse_string_list(&raw);
                for v in &variants {
                    if !SWEEP_VARIANTS.contains(&v.as_str()) {
                        return Err(CliError::config(format!(
                            "sweep.variants: unknown variant '{v}' (expected one of {})",
                            SWEEP_VARIANTS.join(", ")
                        )));
                    }
                }
                let mut seen = variants.clone();
                seen.sort();
                seen.dedup();
                if seen.len() != variants.len() {
                    return Err(CliError::config("sweep.variants: duplicate variant"));
                }
                let seeds = match r.take("sweep.seeds") {
                    Some(raw) => parse_u64_list("sweep.seeds", &raw)?,
                    None => vec![0, 1, 2],
                };
                if seeds.is_empty() {
                    return Err(CliError::config("sweep.seeds: needs at least one seed"));
                }
                let mut sorted = seeds.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != seeds.len() {
                    return Err(CliError::config("sweep.seeds: duplicate seed"));
                }
                Some(SweepSection { variants, seeds })
            }
            None => {
                r.reject("sweep.seeds", "when sweep.variants is set")?;
                None
            }
        };

        r.finish()?;
        let config = ExperimentConfig { dataset, model, train, aug, eval, run, sweep };
        config.validate()?;
        Ok(config)
    }

    /// Cross-field constraints beyond per-key range checks. Called by
    /// [`ExperimentConfig::from_map`]; exposed for re-validation of echoes.
    pub fn validate(&self) -> Result<()> {
        let head = self.model.head;
        let regime = self.train.regime;

        // Regime/head compatibility.
        match regime {
            RegimeName::Joint | RegimeName::Bilevel | RegimeName::SlowSingle
            | RegimeName::SlowOptimal => {
                if !matches!(head, HeadKind::Linear | HeadKind::NonLinear) {
                    return Err(CliError::config(format!(
                        "train.regime = {} trains the head, so model.head must be linear or \
                         nonlinear, got {head}",
                        regime.as_str()
                    )));
                }
            }
            RegimeName::FixedHead => {
                if !matches!(
                    head,
                    HeadKind::FixedRandom | HeadKind::FixedPretrained | HeadKind::DiagonalLowRank
                ) {
                    return Err(CliError::config(format!(
                        "train.regime = fixed_head freezes the head, so model.head must be \
                         fixed_random, fixed_pretrained, or diagonal_low_rank, got {head}"
                    )));
                }
            }
            RegimeName::PcaTop | RegimeName::PcaBottom => {
                if head != HeadKind::Linear {
                    return Err(CliError::config(format!(
                        "train.regime = {} replaces the head with a refreshed basis; use the \
                         linear placeholder for model.head, got {head}",
                        regime.as_str()
                    )));
                }
                if self.train.pca_k == 0 || self.train.pca_k > self.model.feature_dim {
                    return Err(CliError::config(format!(
                        "train.pca_k: must be within 1..={}, got {}",
                        self.model.feature_dim, self.train.pca_k
                    )));
                }
                if self.train.pca_k != self.model.embed_dim {
                    return Err(CliError::config(format!(
                        "train.pca_k ({}) must equal model.embed_dim ({}) so the checkpointed \
                         head matches the declared embedding width",
                        self.train.pca_k, self.model.embed_dim
                    )));
                }
            }
            RegimeName::NoHead => {
                if head != HeadKind::None {
                    return Err(CliError::config(format!(
                        "train.regime = no_head applies the loss to backbone features; set \
                         model.head = none, got {head}"
                    )));
                }
            }
        }
        if head == HeadKind::None {
            if regime != RegimeName::NoHead {
                return Err(CliError::config(format!(
                    "model.head = none only pairs with train.regime = no_head, got {}",
                    regime.as_str()
                )));
            }
            if self.model.embed_dim != self.model.feature_dim {
                return Err(CliError::config(format!(
                    "model.head = none embeds features unchanged; model.embed_dim ({}) must \
                     equal model.feature_dim ({})",
                    self.model.embed_dim, self.model.feature_dim
                )));
            }
        }
        if self.train.slow_tol <= 0.0 {
            return Err(CliError::config("train.slow_tol: must be > 0"));
        }
        if self.train.lambda < 0.0 {
            return Err(CliError::config("train.lambda: must be >= 0"));
        }
        if self.train.subset_cap == 0 {
            return Err(CliError::config("train.subset_cap: must be >= 1"));
        }

        // Batch size, temperature, optimizers, and augmentation ranges all
        // funnel through the schedule validator so the CLI and the training
        // loop can never disagree.
        self.schedule()
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        Ok(())
    }

    /// The resolved key/value view: exactly the keys a round-trip reparse
    /// expects, with all defaults materialized.
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            map.insert(k.to_string(), v);
        };

        put("dataset.kind", self.dataset.kind.as_str().to_string());
        put("dataset.seed", self.dataset.seed.to_string());
        put("dataset.test_fraction", fmt_f64(self.dataset.test_fraction));
        match self.dataset.kind {
            DatasetKind::Synthetic => {
                let synth = self.dataset.synth.as_ref().expect("synthetic config");
                put("dataset.classes", synth.class_count.to_string());
                put("dataset.content_dim", synth.content_dim.to_string());
                put("dataset.style_dim", synth.style_dim.to_string());
                put("dataset.samples_per_class", synth.samples_per_class.to_string());
                put("dataset.content_separation", fmt_f64(synth.content_separation));
                put("dataset.style_scale", fmt_f64(synth.style_scale));
                put("dataset.content_noise", fmt_f64(synth.content_noise));
            }
            DatasetKind::Cifar10 => {
                put("dataset.paths", self.dataset.paths.join(","));
                if let Some(limit) = self.dataset.limit {
                    put("dataset.limit", limit.to_string());
                }
            }
        }

        put("model.hidden", join_list(&self.model.hidden));
        put("model.feature_dim", self.model.feature_dim.to_string());
        put("model.embed_dim", self.model.embed_dim.to_string());
        put("model.head", self.model.head.as_str().to_string());
        if let Some(w) = self.model.head_hidden {
            put("model.head_hidden", w.to_string());
        }
        if let Some(path) = &self.model.pretrained_from {
            put("model.pretrained_from", path.display().to_string());
        }
        put("model.seed", self.model.seed.to_string());

        put("train.regime", self.train.regime.as_str().to_string());
        put("train.epochs", self.train.epochs.to_string());
        put("train.batch_size", self.train.batch_size.to_string());
        put("train.temperature", fmt_f64(self.train.temperature));
        put("train.include_positive", fmt_bool(self.train.include_positive));
        put("train.inner_steps", self.train.inner_steps.to_string());
        put("train.lambda", fmt_f64(self.train.lambda));
        put("train.inner_persist", fmt_bool(self.train.inner_persist));
        put("train.subset_cap", self.train.subset_cap.to_string());
        put("train.pca_k", self.train.pca_k.to_string());
        put("train.slow_tol", fmt_f64(self.train.slow_tol));
        put("train.slow_max_iters", self.train.slow_max_iters.to_string());
        let optim_name = |kind: OptimKind| match kind {
            OptimKind::Adam => "adam",
            OptimKind::SgdMomentum => "sgd",
        };
        put("train.optim_f", optim_name(self.train.optim_f.kind).to_string());
        put("train.lr_f", fmt_f64(self.train.optim_f.lr));
        put("train.weight_decay_f", fmt_f64(self.train.optim_f.weight_decay));
        put("train.momentum_f", fmt_f64(self.train.optim_f.momentum));
        put("train.optim_g", optim_name(self.train.optim_g.kind).to_string());
        put("train.lr_g", fmt_f64(self.train.optim_g.lr));
        put("train.weight_decay_g", fmt_f64(self.train.optim_g.weight_decay));
        put("train.momentum_g", fmt_f64(self.train.optim_g.momentum));

        put("aug.crop_enabled", fmt_bool(self.aug.crop_enabled));
        put("aug.crop_lo", fmt_f64(self.aug.crop_scale.0));
        put("aug.crop_hi", fmt_f64(self.aug.crop_scale.1));
        put("aug.flip_enabled", fmt_bool(self.aug.flip_enabled));
        put("aug.flip_prob", fmt_f64(self.aug.flip_prob));
        put("aug.jitter_enabled", fmt_bool(self.aug.jitter_enabled));
        put("aug.jitter_prob", fmt_f64(self.aug.jitter_prob));
        put("aug.brightness", fmt_f64(self.aug.brightness));
        put("aug.contrast", fmt_f64(self.aug.contrast));
        put("aug.saturation", fmt_f64(self.aug.saturation));
        put("aug.hue", fmt_f64(self.aug.hue));
        put("aug.grayscale_enabled", fmt_bool(self.aug.grayscale_enabled));
        put("aug.grayscale_prob", fmt_f64(self.aug.grayscale_prob));
        put("aug.style_resample", fmt_bool(self.aug.style_resample));
        put("aug.noise_sigma", fmt_f64(self.aug.noise_sigma));

        if let Some(k) = self.eval.k {
            put("eval.k", k.to_string());
        }
        put("eval.epochs", self.eval.epochs.to_string());
        put("eval.lr", fmt_f64(self.eval.lr));
        put("eval.weight_decay", fmt_f64(self.eval.weight_decay));
        put("eval.seed", self.eval.seed.to_string());
        if let Some(b) = self.eval.batch_size {
            put("eval.batch_size", b.to_string());
        }
        put("eval.chunk", self.eval.chunk.to_string());

        put("run.seed", self.run.seed.to_string());
        put("run.out_dir", self.run.out_dir.display().to_string());
        put("run.dump_every", self.run.dump_every.to_string());

        if let Some(sweep) = &self.sweep {
            put("sweep.variants", sweep.variants.join(","));
            put("sweep.seeds", join_list(&sweep.seeds));
        }

        map
    }

    /// Canonical document: sorted `key = value` lines, one per key.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_map() {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 of the canonical echo, as lowercase hex.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.echo().as_bytes());
        format!("{:x}", hasher.finalize())
    }

    /// Loads the configured dataset (before any train/test split).
    pub fn load_dataset(&self) -> Result<LabeledDataset<f64>> {
        match self.dataset.kind {
            DatasetKind::Synthetic => {
                let synth = self.dataset.synth.as_ref().expect("synthetic config");
                Ok(generate_synthetic(synth)?)
            }
            DatasetKind::Cifar10 => {
                let paths: Vec<&str> = self.dataset.paths.iter().map(String::as_str).collect();
                let full = load_cifar10_binary::<f64>(&paths)?;
                match self.dataset.limit {
                    Some(limit) if limit < full.n() => {
                        let keep: Vec<usize> = (0..limit).collect();
                        Ok(full.subset(&keep)?)
                    }
                    _ => Ok(full),
                }
            }
        }
    }

    /// Deterministic train/test split of `n` examples: a seeded permutation
    /// is cut at `round(n · test_fraction)` (clamped so both sides are
    /// non-empty), then both index lists are sorted ascending.
    pub fn split_indices(&self, n: usize) -> Result<(Vec<usize>, Vec<usize>)> {
        if n < 2 {
            return Err(CliError::config(format!(
                "dataset has {n} examples; need at least 2 to split train/test"
            )));
        }
        let n_test =
            ((n as f64) * self.dataset.test_fraction).round() as usize;
        let n_test = n_test.clamp(1, n - 1);
        let order = permutation(n, derive_seed(self.dataset.seed, &[SPLIT_TAG]));
        let mut test: Vec<usize> = order[..n_test].to_vec();
        let mut train: Vec<usize> = order[n_test..].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((train, test))
    }

    /// Fresh encoder `[input_dim, hidden.., feature_dim]` from `model.seed`.
    pub fn build_encoder(&self, input_dim: usize) -> Result<Encoder<f64>> {
        let mut sizes = Vec::with_capacity(self.model.hidden.len() + 2);
        sizes.push(input_dim);
        sizes.extend_from_slice(&self.model.hidden);
        sizes.push(self.model.feature_dim);
        Ok(init_encoder(&sizes, derive_seed(self.model.seed, &[101]))?)
    }

    /// Fresh head per `model.*`; fixed_pretrained heads are lifted from the
    /// donor checkpoint's final linear map.
    pub fn build_head(&self) -> Result<Head<f64>> {
        let m = self.model.feature_dim;
        let d = self.model.embed_dim;
        if self.model.head == HeadKind::FixedPretrained {
            let donor_dir = self.model.pretrained_from.as_ref().expect("validated");
            let (_, donor) = load_checkpoint::<f64>(donor_dir)?;
            let w = donor.projection_weight().ok_or_else(|| {
                CliError::config(format!(
                    "model.pretrained_from: donor head kind '{}' has no single linear map to \
                     freeze",
                    donor.kind()
                ))
            })?;
            if w.shape() != (m, d) {
                return Err(CliError::config(format!(
                    "model.pretrained_from: donor head is {}x{}, expected {m}x{d}",
                    w.rows(),
                    w.cols()
                )));
            }
            let b = match donor.projection_bias() {
                Some(b) => b.clone(),
                None => phl_core::tensor::Tensor::zeros(1, d),
            };
            return Ok(Head::from_pretrained(w.clone(), b)?);
        }
        Ok(init_head(
            self.model.head,
            m,
            d,
            self.model.head_hidden,
            derive_seed(self.model.seed, &[102]),
        )?)
    }

    /// The [`Regime`] value with this config's regime parameters bound.
    pub fn regime(&self) -> Regime {
        match self.train.regime {
            RegimeName::Joint => Regime::Joint,
            RegimeName::Bilevel => Regime::Bilevel,
            RegimeName::FixedHead => Regime::FixedHead,
            RegimeName::PcaTop => Regime::PcaRefresh { which: PcaWhich::Top, k: self.train.pca_k },
            RegimeName::PcaBottom => {
                Regime::PcaRefresh { which: PcaWhich::Bottom, k: self.train.pca_k }
            }
            RegimeName::SlowSingle => Regime::SlowSingle,
            RegimeName::SlowOptimal => Regime::SlowOptimal {
                tol: self.train.slow_tol,
                max_iters: self.train.slow_max_iters,
            },
            RegimeName::NoHead => Regime::NoHead,
        }
    }

    /// The training schedule this config describes.
    pub fn schedule(&self) -> TrainSchedule<f64> {
        TrainSchedule {
            regime: self.regime(),
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            loss: LossConfig {
                temperature: self.train.temperature,
                include_positive: self.train.include_positive,
                negative_policy: NegativePolicy::BatchBothViews,
            },
            aug: self.aug.clone(),
            inner_steps: self.train.inner_steps,
            lambda: self.train.lambda,
            inner_persist: self.train.inner_persist,
            subset_cap: self.train.subset_cap,
            seed: self.run.seed,
            optim_f: self.train.optim_f,
            optim_g: self.train.optim_g,
        }
    }

    /// The evaluation configuration this config describes.
    pub fn eval_config(&self) -> EvalConfig<f64> {
        EvalConfig {
            k: self.eval.k,
            probe: ProbeConfig {
                epochs: self.eval.epochs,
                lr: self.eval.lr,
                weight_decay: self.eval.weight_decay,
                seed: self.eval.seed,
                batch_size: self.eval.batch_size,
            },
            chunk: self.eval.chunk,
        }
    }
}
