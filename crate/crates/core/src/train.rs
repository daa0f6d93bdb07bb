//! Training schedules over an encoder/head pair.
//!
//! One [`TrainSchedule`] describes a full run: the update regime, epoch and
//! batch counts, the contrastive loss configuration, augmentations, and the
//! optimizer settings for the backbone `f` and the head `g`. [`run_schedule`]
//! executes it, emitting one [`EpochRecord`] per epoch.
//!
//! The regimes differ only in *when* the head moves relative to the encoder:
//!
//! * [`Regime::Joint`] — one backward per batch, `f` and `g` step together.
//! * [`Regime::Bilevel`] — per batch, the head is refit with `l` proximal
//!   inner steps around its current value, then the encoder takes one step
//!   against the refit head (see [`bilevel_step`]).
//! * [`Regime::FixedHead`] / [`Regime::NoHead`] — the encoder trains alone,
//!   through a frozen projection or directly on its own output.
//! * [`Regime::PcaRefresh`] — the head is a PCA basis of the current feature
//!   covariance, recomputed before the first epoch and after every epoch.
//! * [`Regime::SlowSingle`] / [`Regime::SlowOptimal`] — the encoder trains
//!   every batch while the head moves once per epoch: a single averaged step,
//!   or a refit to convergence on a fixed subset.

use std::time::Instant;

use crate::augment::{chain_kind, make_view_pair, minibatches, AugConfig, ViewBatch};
use crate::datasets::LabeledDataset;
use crate::error::{Error, Result};
use crate::linalg::svd;
use crate::loss::{batch_loss_cat, LossConfig};
use crate::models::{
    encoder_features, forward_train, head_forward, Encoder, Head, HeadKind, Mode,
};
use crate::optim::{param_checksum, OptimConfig, OptimizerState};
use crate::rng::{derive_seed, permutation};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Which end of the eigenvalue spectrum a PCA head keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcaWhich {
    /// Largest-variance directions.
    Top,
    /// Smallest-variance directions.
    Bottom,
}

/// Update regime for one training run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Regime {
    /// Encoder and head step together from one backward pass per batch.
    Joint,
    /// Head refit by proximal inner steps per batch, then one encoder step.
    Bilevel,
    /// Frozen projection head; only the encoder trains.
    FixedHead,
    /// Head replaced by a PCA basis of the features before the first epoch
    /// and again after every epoch; encoder trains between refreshes.
    PcaRefresh { which: PcaWhich, k: usize },
    /// Head takes one averaged-gradient step per epoch.
    SlowSingle,
    /// Head refit to convergence on a fixed subset at each epoch end.
    SlowOptimal { tol: f64, max_iters: usize },
    /// No head at all; the loss is applied to the backbone output.
    NoHead,
}

impl Regime {
    /// Stable name used in metrics records and file output.
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Joint => "joint",
            Regime::Bilevel => "bilevel",
            Regime::FixedHead => "fixed_head",
            Regime::PcaRefresh { which: PcaWhich::Top, .. } => "pca_top",
            Regime::PcaRefresh { which: PcaWhich::Bottom, .. } => "pca_bottom",
            Regime::SlowSingle => "slow_single",
            Regime::SlowOptimal { .. } => "slow_optimal",
            Regime::NoHead => "no_head",
        }
    }
}

/// Everything needed to reproduce a training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainSchedule<S: Real = f64> {
    pub regime: Regime,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss: LossConfig<S>,
    pub aug: AugConfig<S>,
    /// Inner refit steps `l` per outer iteration (bilevel only).
    pub inner_steps: usize,
    /// Proximal strength λ anchoring the inner refit at the pre-step head.
    pub lambda: S,
    /// Keep the inner optimizer's moments across outer iterations.
    pub inner_persist: bool,
    /// Cap on the seeded subset used by PCA refreshes and slow-optimal
    /// refits: the subset size is `min(n, subset_cap)`.
    pub subset_cap: usize,
    /// Master seed for batch order, augmentation draws, and subset picks.
    pub seed: u64,
    pub optim_f: OptimConfig<S>,
    pub optim_g: OptimConfig<S>,
}

impl<S: Real> Default for TrainSchedule<S> {
    fn default() -> Self {
        TrainSchedule {
            regime: Regime::Joint,
            epochs: 10,
            batch_size: 128,
            loss: LossConfig::default(),
            aug: AugConfig::default(),
            inner_steps: 5,
            lambda: S::one(),
            inner_persist: true,
            subset_cap: 2048,
            seed: 7,
            optim_f: OptimConfig::default(),
            optim_g: OptimConfig::default(),
        }
    }
}

impl<S: Real> TrainSchedule<S> {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.aug.validate()?;
        self.optim_f.validate()?;
        self.optim_g.validate()?;
        if self.batch_size < 2 {
            return Err(Error::InvalidArg(format!(
                "batch size must be >= 2: the InfoNCE negative set is empty otherwise, got {}",
                self.batch_size
            )));
        }
        if !(self.lambda.as_f64().is_finite() && self.lambda >= S::zero()) {
            return Err(Error::InvalidArg(
                "proximal strength lambda must be finite and >= 0".into(),
            ));
        }
        if self.subset_cap == 0 {
            return Err(Error::InvalidArg("subset cap must be positive".into()));
        }
        match self.regime {
            Regime::PcaRefresh { k, .. } if k == 0 => {
                Err(Error::InvalidArg("pca refresh needs k >= 1".into()))
            }
            Regime::SlowOptimal { tol, .. } if !(tol.is_finite() && tol > 0.0) => {
                Err(Error::InvalidArg(
                    "slow-optimal convergence tolerance must be finite and > 0".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// One epoch's worth of metrics.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub regime: String,
    /// Mean training loss over the epoch's batches (the outer loss for
    /// bilevel runs).
    pub loss: f64,
    /// Inner-refit objective trajectory: the last batch's `l + 1` proximal
    /// objective values for bilevel runs, the convergence trajectory for
    /// slow-optimal runs, empty otherwise.
    pub inner_losses: Vec<f64>,
    /// Net head displacement `‖g_end − g_start‖` across the epoch.
    pub g_delta_norm: f64,
    /// Wall-clock duration; excluded from reproducibility comparisons.
    pub wall_ms: u64,
}

/// Full-run metrics: one record per epoch, in order.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
}

impl RunMetrics {
    /// Mean training loss of the final epoch, if any epoch ran.
    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }
}

// --- flat-parameter plumbing ---

fn flatten<S: Real>(tensors: &[Tensor<S>]) -> Vec<S> {
    let mut out = Vec::with_capacity(tensors.iter().map(|t| t.len()).sum());
    for t in tensors {
        out.extend_from_slice(t.data());
    }
    out
}

fn l2_distance<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .fold(S::zero(), |acc, d| acc + d)
        .sqrt()
}

fn cat_views<S: Real>(batch: &ViewBatch<S>) -> Result<Tensor<S>> {
    Tensor::vstack(&[&batch.view1, &batch.view2])
}

// --- single steps ---

/// One simultaneous update of encoder and (trainable) head from a single
/// backward pass on `batch`. Gradients for both are taken at the same point,
/// then each side steps with its own optimizer; a frozen head contributes no
/// parameter nodes and only the encoder moves. Returns the batch loss.
pub fn joint_step<S: Real>(
    encoder: &mut Encoder<S>,
    head: &mut Head<S>,
    batch: &ViewBatch<S>,
    loss_config: &LossConfig<S>,
    opt_f: &mut OptimizerState<S>,
    opt_g: &mut OptimizerState<S>,
) -> Result<S> {
    let b = batch.view1.rows();
    let x_cat = cat_views(batch)?;
    let mut fwd = forward_train(encoder, head, &x_cat)?;
    let objective = batch_loss_cat(&mut fwd.graph, fwd.z, b, loss_config)?;
    let loss = fwd.graph.value(objective.loss).get(0, 0);

    let mut wrt = fwd.enc_params.clone();
    wrt.extend_from_slice(&fwd.head_params);
    let grads = fwd.graph.gradient(objective.loss, &wrt)?;
    let (enc_grads, head_grads) = grads.split_at(fwd.enc_params.len());

    let mut enc_flat = encoder.parameters();
    opt_f.step(&mut enc_flat, &flatten(enc_grads))?;
    encoder.load_parameters(&enc_flat)?;

    if head.is_trainable() {
        let mut head_flat = head.parameters();
        opt_g.step(&mut head_flat, &flatten(head_grads))?;
        head.load_parameters(&head_flat)?;
    }
    Ok(loss)
}

/// Encoder-only update: same forward and loss as [`joint_step`], but only the
/// backbone parameters are differentiated and stepped. The head's parameters
/// are left untouched (normalization running statistics still track the
/// batches, as in any training-mode forward).
pub fn encoder_step<S: Real>(
    encoder: &mut Encoder<S>,
    head: &mut Head<S>,
    batch: &ViewBatch<S>,
    loss_config: &LossConfig<S>,
    opt_f: &mut OptimizerState<S>,
) -> Result<S> {
    let b = batch.view1.rows();
    let x_cat = cat_views(batch)?;
    let mut fwd = forward_train(encoder, head, &x_cat)?;
    let objective = batch_loss_cat(&mut fwd.graph, fwd.z, b, loss_config)?;
    let loss = fwd.graph.value(objective.loss).get(0, 0);

    let grads = fwd.graph.gradient(objective.loss, &fwd.enc_params)?;
    let mut enc_flat = encoder.parameters();
    opt_f.step(&mut enc_flat, &flatten(&grads))?;
    encoder.load_parameters(&enc_flat)?;
    Ok(loss)
}

/// Result of one [`bilevel_step`].
#[derive(Debug, Clone)]
pub struct BilevelOutcome<S: Real = f64> {
    /// The `l + 1` values of the inner objective
    /// `L(g ∘ f; batch) + λ‖g − g_start‖²` at the start and after each inner
    /// step.
    pub inner_losses: Vec<S>,
    /// `‖g_end − g_start‖` over the inner refit.
    pub g_delta_norm: S,
    /// Per-step head displacements `‖g_{i+1} − g_i‖`, one per inner step.
    pub step_norms: Vec<S>,
    /// Batch loss at the encoder step, i.e. evaluated against the refit head.
    pub outer_loss: S,
}

/// One bilevel update: refit the head with `inner_steps` proximal steps while
/// the encoder is frozen, then take a single encoder step against the refit
/// head.
///
/// Each inner step is forward–backward splitting on the objective
/// `L(g) + λ‖g − g_start‖²`: the optimizer consumes `∇L` alone, then the
/// proximal term is applied in closed form,
/// `g ← (g + 2ηλ·g_start) / (1 + 2ηλ)` with η the head optimizer's base
/// learning rate. λ = 0 reduces to plain optimizer steps; large λ pins the
/// head at `g_start` regardless of the optimizer's own step sizes.
/// `inner_steps = 0` leaves the head bit-identical and records the single
/// starting objective value.
///
/// The head optimizer's weight decay is suppressed here — the proximal term
/// is the inner regularizer, and decay stays on the outer (encoder) step.
/// With `inner_persist` false the head optimizer is reset at entry instead of
/// carrying moments across outer iterations. Backbone features are computed
/// once and reused by every inner forward; normalization running statistics
/// move only on the outer forward.
#[allow(clippy::too_many_arguments)]
pub fn bilevel_step<S: Real>(
    encoder: &mut Encoder<S>,
    head: &mut Head<S>,
    batch: &ViewBatch<S>,
    loss_config: &LossConfig<S>,
    inner_steps: usize,
    lambda: S,
    inner_persist: bool,
    opt_f: &mut OptimizerState<S>,
    opt_g: &mut OptimizerState<S>,
) -> Result<BilevelOutcome<S>> {
    if !head.is_trainable() {
        return Err(Error::InvalidArg(format!(
            "bilevel refit requires a trainable head, got kind '{}'",
            head.kind()
        )));
    }
    if !(lambda.as_f64().is_finite() && lambda >= S::zero()) {
        return Err(Error::InvalidArg(
            "proximal strength lambda must be finite and >= 0".into(),
        ));
    }
    if !inner_persist {
        opt_g.reset();
    }

    let b = batch.view1.rows();
    let x_cat = cat_views(batch)?;
    // The encoder is frozen for the whole inner loop, so its features are a
    // constant of the refit; compute them once.
    let h_cat = encoder_features(encoder, &x_cat)?;
    let g_start = head.parameters();

    let eta = opt_g.config().lr;
    let prox_denom = S::one() + S::of(2.0) * eta * lambda;

    let inner_objective = |head: &Head<S>, loss: S| -> S {
        let current = head.parameters();
        let dist = l2_distance(&current, &g_start);
        loss + lambda * dist * dist
    };

    let mut inner_losses = Vec::with_capacity(inner_steps + 1);
    let mut step_norms = Vec::with_capacity(inner_steps);
    for _ in 0..inner_steps {
        let mut hf = head_forward(head, &h_cat, Mode::Train)?;
        let objective = batch_loss_cat(&mut hf.graph, hf.z, b, loss_config)?;
        let loss = hf.graph.value(objective.loss).get(0, 0);
        inner_losses.push(inner_objective(head, loss));

        let grads = hf.graph.gradient(objective.loss, &hf.head_params)?;
        let before = head.parameters();
        let mut g_flat = before.clone();
        opt_g.step_with_weight_decay(&mut g_flat, &flatten(&grads), S::zero())?;
        if lambda > S::zero() {
            for (g, &anchor) in g_flat.iter_mut().zip(&g_start) {
                *g = (*g + S::of(2.0) * eta * lambda * anchor) / prox_denom;
            }
        }
        step_norms.push(l2_distance(&g_flat, &before));
        head.load_parameters(&g_flat)?;
    }
    // Objective at the final head (the only entry when inner_steps = 0).
    let mut hf = head_forward(head, &h_cat, Mode::Train)?;
    let objective = batch_loss_cat(&mut hf.graph, hf.z, b, loss_config)?;
    let final_loss = hf.graph.value(objective.loss).get(0, 0);
    inner_losses.push(inner_objective(head, final_loss));

    let g_delta_norm = l2_distance(&head.parameters(), &g_start);

    // Encoder step against the refit head.
    let mut fwd = forward_train(encoder, head, &x_cat)?;
    let outer = batch_loss_cat(&mut fwd.graph, fwd.z, b, loss_config)?;
    let outer_loss = fwd.graph.value(outer.loss).get(0, 0);
    let grads = fwd.graph.gradient(outer.loss, &fwd.enc_params)?;
    let mut enc_flat = encoder.parameters();
    opt_f.step(&mut enc_flat, &flatten(&grads))?;
    encoder.load_parameters(&enc_flat)?;

    Ok(BilevelOutcome { inner_losses, g_delta_norm, step_norms, outer_loss })
}

/// Replaces the head with the `k` top- or bottom-variance eigendirections of
/// the feature covariance on `subset` (rows are raw dataset examples).
///
/// Features are mean-centered; the covariance uses the `n − 1` divisor. The
/// returned head is an orthonormal-basis projection (its Gram matrix is the
/// identity to well below 1e-8). Requires more subset rows than feature
/// dimensions so the spectrum is well defined, and `k` at most the feature
/// dimension.
pub fn pca_refresh<S: Real>(
    encoder: &Encoder<S>,
    subset: &Tensor<S>,
    k: usize,
    which: PcaWhich,
) -> Result<Head<S>> {
    let m = encoder.output_dim();
    if subset.rows() <= m {
        return Err(Error::InvalidArg(format!(
            "pca refresh needs more examples than feature dimensions: got {} rows for {m} features",
            subset.rows()
        )));
    }
    if k == 0 || k > m {
        return Err(Error::InvalidArg(format!(
            "pca refresh needs 1 <= k <= {m}, got {k}"
        )));
    }
    let features = encoder_features(encoder, subset)?;
    let (centered, _means) = features.center_columns();
    // Right singular vectors of the centered features are the covariance
    // eigenvectors; singular values come out in descending order, so the
    // eigenvalues σ² / (n − 1) are ordered too.
    let decomp = svd(&centered)?;
    let cols: Vec<usize> = match which {
        PcaWhich::Top => (0..k).collect(),
        PcaWhich::Bottom => (m - k..m).collect(),
    };
    let mut w = Tensor::zeros(m, k);
    for (j, &col) in cols.iter().enumerate() {
        for i in 0..m {
            w.set(i, j, decomp.v.get(i, col));
        }
    }
    Head::from_pca_basis(w)
}

/// One epoch where the encoder trains per batch while head gradients are only
/// accumulated; at the epoch's end the head takes a single step with the
/// *mean* accumulated gradient. The head is untouched between batch
/// boundaries. Returns the mean batch loss and the batch count.
pub fn slow_single_epoch<S: Real>(
    encoder: &mut Encoder<S>,
    head: &mut Head<S>,
    batches: impl IntoIterator<Item = Result<ViewBatch<S>>>,
    loss_config: &LossConfig<S>,
    opt_f: &mut OptimizerState<S>,
    opt_g: &mut OptimizerState<S>,
) -> Result<(S, usize)> {
    if !head.is_trainable() {
        return Err(Error::InvalidArg(format!(
            "slow-single schedule requires a trainable head, got kind '{}'",
            head.kind()
        )));
    }
    let mut grad_accum = vec![S::zero(); head.param_count()];
    let mut loss_sum = S::zero();
    let mut count = 0usize;

    for batch in batches {
        let batch = batch?;
        let b = batch.view1.rows();
        let x_cat = cat_views(&batch)?;
        let mut fwd = forward_train(encoder, head, &x_cat)?;
        let objective = batch_loss_cat(&mut fwd.graph, fwd.z, b, loss_config)?;
        loss_sum += fwd.graph.value(objective.loss).get(0, 0);

        let mut wrt = fwd.enc_params.clone();
        wrt.extend_from_slice(&fwd.head_params);
        let grads = fwd.graph.gradient(objective.loss, &wrt)?;
        let (enc_grads, head_grads) = grads.split_at(fwd.enc_params.len());

        let mut enc_flat = encoder.parameters();
        opt_f.step(&mut enc_flat, &flatten(enc_grads))?;
        encoder.load_parameters(&enc_flat)?;

        for (acc, g) in grad_accum.iter_mut().zip(flatten(head_grads)) {
            *acc += g;
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidArg("slow-single epoch received no batches".into()));
    }

    let scale = S::one() / S::of(count as f64);
    for g in &mut grad_accum {
        *g *= scale;
    }
    let mut head_flat = head.parameters();
    opt_g.step(&mut head_flat, &grad_accum)?;
    head.load_parameters(&head_flat)?;
    Ok((loss_sum * scale, count))
}

/// Result of one [`slow_optimal_epoch`].
#[derive(Debug, Clone)]
pub struct SlowOptimalOutcome<S: Real = f64> {
    /// Objective (mean batch loss over the subset) at the start and after
    /// each accepted iteration.
    pub objective_trajectory: Vec<S>,
    /// Iterations actually taken (0 when `max_iters` is 0).
    pub iterations: usize,
}

/// Refits the head to convergence on a fixed set of view batches while the
/// encoder stays frozen: full passes over `views`, stepping the head once per
/// pass with the mean gradient, until the relative objective improvement
/// falls below `tol` or `max_iters` passes have run. `max_iters = 0` leaves
/// the head unchanged. An already-optimal head terminates after one
/// iteration (zero improvement is below any positive tolerance).
pub fn slow_optimal_epoch<S: Real>(
    encoder: &Encoder<S>,
    head: &mut Head<S>,
    views: &[ViewBatch<S>],
    tol: f64,
    max_iters: usize,
    opt_g: &mut OptimizerState<S>,
    loss_config: &LossConfig<S>,
) -> Result<SlowOptimalOutcome<S>> {
    if !head.is_trainable() {
        return Err(Error::InvalidArg(format!(
            "slow-optimal refit requires a trainable head, got kind '{}'",
            head.kind()
        )));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::InvalidArg(
            "slow-optimal convergence tolerance must be finite and > 0".into(),
        ));
    }
    if views.is_empty() {
        return Err(Error::InvalidArg("slow-optimal refit received no batches".into()));
    }
    // Frozen encoder: features per batch are constants of the refit.
    let mut features = Vec::with_capacity(views.len());
    for batch in views {
        features.push(encoder_features(encoder, &cat_views(batch)?)?);
    }

    // Mean objective and mean head gradient over all batches.
    let eval = |head: &Head<S>| -> Result<(S, Vec<S>)> {
        let mut grad_accum = vec![S::zero(); head.param_count()];
        let mut loss_sum = S::zero();
        for (batch, h_cat) in views.iter().zip(&features) {
            let b = batch.view1.rows();
            let mut hf = head_forward(head, h_cat, Mode::Train)?;
            let objective = batch_loss_cat(&mut hf.graph, hf.z, b, loss_config)?;
            loss_sum += hf.graph.value(objective.loss).get(0, 0);
            let grads = hf.graph.gradient(objective.loss, &hf.head_params)?;
            for (acc, g) in grad_accum.iter_mut().zip(flatten(&grads)) {
                *acc += g;
            }
        }
        let scale = S::one() / S::of(views.len() as f64);
        for g in &mut grad_accum {
            *g *= scale;
        }
        Ok((loss_sum * scale, grad_accum))
    };

    let (mut prev, mut grads) = eval(head)?;
    let mut trajectory = vec![prev];
    let mut iterations = 0usize;
    for _ in 0..max_iters {
        let mut head_flat = head.parameters();
        opt_g.step(&mut head_flat, &grads)?;
        head.load_parameters(&head_flat)?;
        iterations += 1;

        let (value, fresh_grads) = eval(head)?;
        trajectory.push(value);
        let improvement = (prev - value).as_f64() / prev.as_f64().abs().max(1e-12);
        if improvement < tol {
            break;
        }
        prev = value;
        grads = fresh_grads;
    }
    Ok(SlowOptimalOutcome { objective_trajectory: trajectory, iterations })
}

// --- full runs ---

/// Seeded subset of raw dataset rows, `min(n, cap)` of them.
fn seeded_subset<S: Real>(
    dataset: &LabeledDataset<S>,
    cap: usize,
    seed: u64,
) -> Result<Tensor<S>> {
    let take = dataset.n().min(cap);
    let order = permutation(dataset.n(), seed);
    dataset.examples().select_rows(&order[..take])
}

/// Fixed view batches over a seeded subset: one augmentation draw per
/// example, cut into `batch`-sized pieces (a final piece smaller than 2 is
/// dropped, matching the epoch batching rule).
fn fixed_view_batches<S: Real>(
    dataset: &LabeledDataset<S>,
    cap: usize,
    batch: usize,
    aug: &AugConfig<S>,
    seed: u64,
) -> Result<Vec<ViewBatch<S>>> {
    let kind = chain_kind(dataset)?;
    let take = dataset.n().min(cap);
    let order = permutation(dataset.n(), seed);
    let mut batches = Vec::new();
    for chunk in order[..take].chunks(batch) {
        if chunk.len() < 2 {
            break;
        }
        let mut view1 = Vec::with_capacity(chunk.len());
        let mut view2 = Vec::with_capacity(chunk.len());
        for &idx in chunk {
            let mut rng = crate::rng::rng_from(derive_seed(seed, &[idx as u64]));
            let (v1, v2) = make_view_pair(dataset.example(idx), &kind, aug, &mut rng)?;
            view1.push(v1);
            view2.push(v2);
        }
        batches.push(ViewBatch {
            view1: Tensor::from_rows(&view1)?,
            view2: Tensor::from_rows(&view2)?,
            source_indices: chunk.to_vec(),
            rng_seed: seed,
        });
    }
    Ok(batches)
}

/// Runs a full schedule, mutating `encoder` and `head` in place and calling
/// `on_epoch` with each epoch's record — plus the models as they stand at
/// that epoch's end, for checkpointing or feature dumps — as it completes.
/// Identical inputs (models, dataset, schedule) reproduce identical metrics
/// and final parameters, wall-clock fields aside.
pub fn run_schedule<S: Real>(
    schedule: &TrainSchedule<S>,
    dataset: &LabeledDataset<S>,
    encoder: &mut Encoder<S>,
    head: &mut Head<S>,
    mut on_epoch: impl FnMut(&EpochRecord, &Encoder<S>, &Head<S>),
) -> Result<RunMetrics> {
    schedule.validate()?;
    match schedule.regime {
        Regime::Joint | Regime::Bilevel | Regime::SlowSingle | Regime::SlowOptimal { .. } => {
            if !head.is_trainable() {
                return Err(Error::InvalidArg(format!(
                    "regime '{}' requires a trainable head, got kind '{}'",
                    schedule.regime.name(),
                    head.kind()
                )));
            }
        }
        Regime::FixedHead => {
            if head.is_trainable() || head.kind() == HeadKind::None {
                return Err(Error::InvalidArg(format!(
                    "fixed-head regime requires a frozen projection head, got kind '{}'",
                    head.kind()
                )));
            }
        }
        Regime::NoHead => {
            if head.kind() != HeadKind::None {
                return Err(Error::InvalidArg(format!(
                    "no-head regime requires head kind 'none', got '{}'",
                    head.kind()
                )));
            }
        }
        Regime::PcaRefresh { k, .. } => {
            if k > encoder.output_dim() {
                return Err(Error::InvalidArg(format!(
                    "pca refresh k = {k} exceeds feature dimension {}",
                    encoder.output_dim()
                )));
            }
        }
    }

    // Refresh index r: 0 installs the initial basis, r = e + 1 follows epoch e.
    let pca_seed = |r: usize| derive_seed(schedule.seed, &[201, r as u64]);
    let slow_seed = |epoch: usize| derive_seed(schedule.seed, &[301, epoch as u64]);

    if let Regime::PcaRefresh { which, k } = schedule.regime {
        let subset = seeded_subset(dataset, schedule.subset_cap, pca_seed(0))?;
        *head = pca_refresh(encoder, &subset, k, which)?;
    }

    let mut opt_f = OptimizerState::new(schedule.optim_f, encoder.param_count())?;
    let mut opt_g = OptimizerState::new(
        schedule.optim_g,
        if head.is_trainable() { head.param_count() } else { 0 },
    )?;
    let plan = minibatches(dataset, schedule.batch_size, schedule.seed, &schedule.aug)?;

    let mut metrics = RunMetrics::default();
    for epoch in 0..schedule.epochs {
        let start = Instant::now();
        let g_begin = head.parameters();
        let frozen = (!head.is_trainable()).then(|| param_checksum(&g_begin));
        let mut loss_sum = 0.0f64;
        let mut batch_count = 0usize;
        let mut inner_losses: Vec<f64> = Vec::new();

        match schedule.regime {
            Regime::Joint | Regime::FixedHead | Regime::NoHead => {
                for batch in plan.epoch(epoch as u64) {
                    let loss =
                        joint_step(encoder, head, &batch?, &schedule.loss, &mut opt_f, &mut opt_g)?;
                    loss_sum += loss.as_f64();
                    batch_count += 1;
                }
            }
            Regime::Bilevel => {
                for batch in plan.epoch(epoch as u64) {
                    let outcome = bilevel_step(
                        encoder,
                        head,
                        &batch?,
                        &schedule.loss,
                        schedule.inner_steps,
                        schedule.lambda,
                        schedule.inner_persist,
                        &mut opt_f,
                        &mut opt_g,
                    )?;
                    loss_sum += outcome.outer_loss.as_f64();
                    inner_losses = outcome.inner_losses.iter().map(|v| v.as_f64()).collect();
                    batch_count += 1;
                }
            }
            Regime::PcaRefresh { which, k } => {
                for batch in plan.epoch(epoch as u64) {
                    let loss =
                        joint_step(encoder, head, &batch?, &schedule.loss, &mut opt_f, &mut opt_g)?;
                    loss_sum += loss.as_f64();
                    batch_count += 1;
                }
                // The head must not have moved during the epoch's batches.
                if let Some(checksum) = frozen {
                    assert_eq!(
                        checksum,
                        param_checksum(&head.parameters()),
                        "frozen head moved during a pca-refresh epoch"
                    );
                }
                let subset = seeded_subset(dataset, schedule.subset_cap, pca_seed(epoch + 1))?;
                *head = pca_refresh(encoder, &subset, k, which)?;
            }
            Regime::SlowSingle => {
                let (mean_loss, count) = slow_single_epoch(
                    encoder,
                    head,
                    plan.epoch(epoch as u64),
                    &schedule.loss,
                    &mut opt_f,
                    &mut opt_g,
                )?;
                loss_sum = mean_loss.as_f64() * count as f64;
                batch_count = count;
            }
            Regime::SlowOptimal { tol, max_iters } => {
                for batch in plan.epoch(epoch as u64) {
                    let loss = encoder_step(encoder, head, &batch?, &schedule.loss, &mut opt_f)?;
                    loss_sum += loss.as_f64();
                    batch_count += 1;
                }
                let views = fixed_view_batches(
                    dataset,
                    schedule.subset_cap,
                    schedule.batch_size,
                    &schedule.aug,
                    slow_seed(epoch),
                )?;
                let outcome = slow_optimal_epoch(
                    encoder,
                    head,
                    &views,
                    tol,
                    max_iters,
                    &mut opt_g,
                    &schedule.loss,
                )?;
                inner_losses =
                    outcome.objective_trajectory.iter().map(|v| v.as_f64()).collect();
            }
        }

        if !matches!(schedule.regime, Regime::PcaRefresh { .. }) {
            if let Some(checksum) = frozen {
                assert_eq!(
                    checksum,
                    param_checksum(&head.parameters()),
                    "frozen head moved during epoch {epoch}"
                );
            }
        }

        let g_end = head.parameters();
        let record = EpochRecord {
            epoch,
            regime: schedule.regime.name().to_string(),
            loss: loss_sum / batch_count.max(1) as f64,
            inner_losses,
            g_delta_norm: if g_begin.len() == g_end.len() {
                l2_distance(&g_begin, &g_end).as_f64()
            } else {
                // A refresh can change the head's parameter count; report the
                // full displacement as the norm of both states.
                (g_begin.iter().map(|v| v.as_f64().powi(2)).sum::<f64>()
                    + g_end.iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
                .sqrt()
            },
            wall_ms: start.elapsed().as_millis() as u64,
        };
        on_epoch(&record, encoder, head);
        metrics.records.push(record);
    }
    Ok(metrics)
}
