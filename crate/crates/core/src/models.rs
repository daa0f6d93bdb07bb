//! MLP encoder and the projection-head catalog, plus checkpoint I/O.
//!
//! The encoder is a plain ReLU MLP. Heads map its m-dimensional output to a
//! d-dimensional embedding and come in seven kinds; only `Linear` and
//! `NonLinear` are trainable. Weight tensors are stored input-major
//! (`m x d`), so a batch forward is `h_batch (B x m) . w`; analysis code
//! that wants the conventional `d x m` map takes the transpose.
//!
//! [`forward_train`] / [`forward_eval`] build a fresh expression graph per
//! call and return node handles for the input, backbone features `h`,
//! embedding `z`, and every trainable parameter (frozen parameters enter
//! the graph as constants, so gradients cannot flow into them).

use std::fmt;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{ExprGraph, NodeId};
use crate::rng::rng_from;
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Batchnorm epsilon used inside the nonlinear head.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistics momentum: `running = momentum * running + (1 - momentum) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

// --- encoder ---

/// Fully connected ReLU network; hidden layers are ReLU, the output layer
/// is linear.
#[derive(Clone, Debug)]
pub struct Encoder<S: Real = f64> {
    sizes: Vec<usize>,
    weights: Vec<Tensor<S>>, // sizes[i] x sizes[i+1]
    biases: Vec<Tensor<S>>,  // 1 x sizes[i+1]
}

/// Glorot-uniform weights (range +-sqrt(6/(fan_in+fan_out))), zero biases;
/// deterministic per seed.
pub fn init_encoder<S: Real>(sizes: &[usize], seed: u64) -> Result<Encoder<S>> {
    if sizes.len() < 2 {
        return Err(Error::InvalidArg(format!(
            "encoder needs at least input and output sizes, got {sizes:?}"
        )));
    }
    if sizes.iter().any(|&s| s == 0) {
        return Err(Error::InvalidArg(format!("encoder sizes must be positive, got {sizes:?}")));
    }
    let mut rng = rng_from(seed);
    let mut weights = Vec::with_capacity(sizes.len() - 1);
    let mut biases = Vec::with_capacity(sizes.len() - 1);
    for win in sizes.windows(2) {
        let (fan_in, fan_out) = (win[0], win[1]);
        weights.push(glorot(fan_in, fan_out, &mut rng));
        biases.push(Tensor::zeros(1, fan_out));
    }
    Ok(Encoder { sizes: sizes.to_vec(), weights, biases })
}

fn glorot<S: Real, R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<S> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| S::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(fan_in, fan_out, data).expect("glorot shape")
}

impl<S: Real> Encoder<S> {
    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Flat parameter vector: layer by layer, weights (row-major) then bias.
    pub fn parameters(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b.data());
        }
        out
    }

    /// Inverse of [`Encoder::parameters`].
    pub fn load_parameters(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidArg(format!(
                "encoder expects {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wn = w.rows() * w.cols();
            w.data_mut().copy_from_slice(&flat[at..at + wn]);
            at += wn;
            let bn = b.cols();
            b.data_mut().copy_from_slice(&flat[at..at + bn]);
            at += bn;
        }
        Ok(())
    }

    pub fn weight(&self, layer: usize) -> &Tensor<S> {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &Tensor<S> {
        &self.biases[layer]
    }
}

// --- heads ---

/// Projection-head kind tags.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    None,
    Linear,
    NonLinear,
    FixedRandom,
    FixedPretrained,
    DiagonalLowRank,
    PcaLinear,
}

impl HeadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::None => "none",
            HeadKind::Linear => "linear",
            HeadKind::NonLinear => "nonlinear",
            HeadKind::FixedRandom => "fixed_random",
            HeadKind::FixedPretrained => "fixed_pretrained",
            HeadKind::DiagonalLowRank => "diagonal_low_rank",
            HeadKind::PcaLinear => "pca_linear",
        }
    }

    pub fn parse(s: &str) -> Result<HeadKind> {
        Ok(match s {
            "none" => HeadKind::None,
            "linear" => HeadKind::Linear,
            "nonlinear" => HeadKind::NonLinear,
            "fixed_random" => HeadKind::FixedRandom,
            "fixed_pretrained" => HeadKind::FixedPretrained,
            "diagonal_low_rank" => HeadKind::DiagonalLowRank,
            "pca_linear" => HeadKind::PcaLinear,
            other => return Err(Error::InvalidArg(format!("unknown head kind '{other}'"))),
        })
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug)]
enum HeadParams<S: Real> {
    /// `None`: no parameters at all.
    Empty,
    /// Linear / FixedRandom / FixedPretrained: `z = h . w + b`.
    Affine { w: Tensor<S>, b: Tensor<S> },
    /// DiagonalLowRank (coordinate selection) and PcaLinear (orthonormal
    /// basis): `z = h . w`, never trained.
    Basis { w: Tensor<S> },
    /// linear -> batchnorm -> ReLU -> linear.
    NonLinear {
        w1: Tensor<S>,
        b1: Tensor<S>,
        gamma: Tensor<S>,
        beta: Tensor<S>,
        w2: Tensor<S>,
        b2: Tensor<S>,
        running_mean: Tensor<S>,
        running_var: Tensor<S>,
    },
}

/// Projection head g mapping m-dimensional backbone features to
/// d-dimensional embeddings.
#[derive(Clone, Debug)]
pub struct Head<S: Real = f64> {
    kind: HeadKind,
    m: usize,
    d: usize,
    hidden: Option<usize>,
    params: HeadParams<S>,
}

/// Builds a head with freshly initialized parameters. `hidden` is required
/// exactly for `NonLinear`. `FixedPretrained` and `PcaLinear` carry
/// parameters that come from data, not an initializer — use
/// [`Head::from_pretrained`] / [`Head::from_pca_basis`].
pub fn init_head<S: Real>(
    kind: HeadKind,
    m: usize,
    d: usize,
    hidden: Option<usize>,
    seed: u64,
) -> Result<Head<S>> {
    if m == 0 || d == 0 {
        return Err(Error::InvalidArg("head dims must be positive".into()));
    }
    if d > m {
        return Err(Error::InvalidArg(format!(
            "head output dim {d} exceeds backbone dim {m}"
        )));
    }
    if kind != HeadKind::NonLinear && hidden.is_some() {
        return Err(Error::InvalidArg(format!("{kind} head takes no hidden size")));
    }
    match kind {
        HeadKind::None => {
            if d != m {
                return Err(Error::InvalidArg(format!(
                    "identity head requires d = m, got d = {d}, m = {m}"
                )));
            }
            Ok(Head { kind, m, d, hidden: None, params: HeadParams::Empty })
        }
        // FixedRandom is a Linear head whose initial draw is simply never
        // trained: same seed, same parameters.
        HeadKind::Linear | HeadKind::FixedRandom => {
            let mut rng = rng_from(seed);
            let w = glorot(m, d, &mut rng);
            let b = Tensor::zeros(1, d);
            Ok(Head { kind, m, d, hidden: None, params: HeadParams::Affine { w, b } })
        }
        HeadKind::NonLinear => {
            let h = hidden.ok_or_else(|| {
                Error::InvalidArg("nonlinear head requires a hidden size".into())
            })?;
            if h == 0 {
                return Err(Error::InvalidArg("hidden size must be positive".into()));
            }
            let mut rng = rng_from(seed);
            let w1 = glorot(m, h, &mut rng);
            let w2 = glorot(h, d, &mut rng);
            Ok(Head {
                kind,
                m,
                d,
                hidden: Some(h),
                params: HeadParams::NonLinear {
                    w1,
                    b1: Tensor::zeros(1, h),
                    gamma: Tensor::filled(1, h, S::one()),
                    beta: Tensor::zeros(1, h),
                    w2,
                    b2: Tensor::zeros(1, d),
                    running_mean: Tensor::zeros(1, h),
                    running_var: Tensor::filled(1, h, S::one()),
                },
            })
        }
        HeadKind::DiagonalLowRank => {
            // fixed selection of the first d coordinates: w = [I_d; 0]
            let mut w = Tensor::zeros(m, d);
            for i in 0..d {
                w.set(i, i, S::one());
            }
            Ok(Head { kind, m, d, hidden: None, params: HeadParams::Basis { w } })
        }
        HeadKind::FixedPretrained | HeadKind::PcaLinear => Err(Error::InvalidArg(format!(
            "{kind} head is built from existing parameters, not an initializer"
        ))),
    }
}

impl<S: Real> Head<S> {
    /// Frozen affine head with parameters taken from a previous run.
    pub fn from_pretrained(w: Tensor<S>, b: Tensor<S>) -> Result<Head<S>> {
        let (m, d) = w.shape();
        if m == 0 || d == 0 || d > m {
            return Err(Error::InvalidArg(format!("pretrained head has bad shape {m}x{d}")));
        }
        if b.shape() != (1, d) {
            return Err(Error::ShapeMismatch(format!(
                "pretrained bias must be 1x{d}, got {}x{}",
                b.rows(),
                b.cols()
            )));
        }
        if !w.is_all_finite() || !b.is_all_finite() {
            return Err(Error::InvalidArg("pretrained head parameters must be finite".into()));
        }
        Ok(Head {
            kind: HeadKind::FixedPretrained,
            m,
            d,
            hidden: None,
            params: HeadParams::Affine { w, b },
        })
    }

    /// Frozen projection onto an orthonormal basis (`w` is `m x d` with
    /// orthonormal columns, checked to 1e-8).
    pub fn from_pca_basis(w: Tensor<S>) -> Result<Head<S>> {
        let (m, d) = w.shape();
        if m == 0 || d == 0 || d > m {
            return Err(Error::InvalidArg(format!("basis head has bad shape {m}x{d}")));
        }
        let gram = w.matmul_tn(&w)?;
        let err = gram.sub(&Tensor::eye(d))?.max_abs();
        if err.as_f64() > 1e-8 {
            return Err(Error::InvalidArg(format!(
                "basis columns are not orthonormal (deviation {err})"
            )));
        }
        Ok(Head { kind: HeadKind::PcaLinear, m, d, hidden: None, params: HeadParams::Basis { w } })
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn output_dim(&self) -> usize {
        self.d
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        self.hidden
    }

    /// Whether training schedules may update this head's parameters.
    pub fn is_trainable(&self) -> bool {
        matches!(self.kind, HeadKind::Linear | HeadKind::NonLinear)
    }

    /// The `m x d` weight matrix of single-matrix heads (affine and basis
    /// kinds); `None` for identity and nonlinear heads.
    pub fn projection_weight(&self) -> Option<&Tensor<S>> {
        match &self.params {
            HeadParams::Affine { w, .. } | HeadParams::Basis { w } => Some(w),
            _ => None,
        }
    }

    /// The `1 x d` bias of affine heads; `None` for every other kind.
    pub fn projection_bias(&self) -> Option<&Tensor<S>> {
        match &self.params {
            HeadParams::Affine { b, .. } => Some(b),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.params {
            HeadParams::Empty => 0,
            HeadParams::Affine { .. } => self.m * self.d + self.d,
            HeadParams::Basis { .. } => self.m * self.d,
            HeadParams::NonLinear { .. } => {
                let h = self.hidden.unwrap();
                self.m * h + h + h + h + h * self.d + self.d
            }
        }
    }

    /// Flat parameter vector (excludes batchnorm running statistics, which
    /// are state, not parameters). Nonlinear order: w1, b1, gamma, beta,
    /// w2, b2.
    pub fn parameters(&self) -> Vec<S> {
        let mut out = Vec::with_capacity(self.param_count());
        match &self.params {
            HeadParams::Empty => {}
            HeadParams::Affine { w, b } => {
                out.extend_from_slice(w.data());
                out.extend_from_slice(b.data());
            }
            HeadParams::Basis { w } => out.extend_from_slice(w.data()),
            HeadParams::NonLinear { w1, b1, gamma, beta, w2, b2, .. } => {
                for t in [w1, b1, gamma, beta, w2, b2] {
                    out.extend_from_slice(t.data());
                }
            }
        }
        out
    }

    /// Inverse of [`Head::parameters`].
    pub fn load_parameters(&mut self, flat: &[S]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::InvalidArg(format!(
                "head expects {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut at = 0;
        let fill = |t: &mut Tensor<S>, from: &[S], at: &mut usize| {
            let n = t.rows() * t.cols();
            t.data_mut().copy_from_slice(&from[*at..*at + n]);
            *at += n;
        };
        match &mut self.params {
            HeadParams::Empty => {}
            HeadParams::Affine { w, b } => {
                fill(w, flat, &mut at);
                fill(b, flat, &mut at);
            }
            HeadParams::Basis { w } => fill(w, flat, &mut at),
            HeadParams::NonLinear { w1, b1, gamma, beta, w2, b2, .. } => {
                for t in [w1, b1, gamma, beta, w2, b2] {
                    fill(t, flat, &mut at);
                }
            }
        }
        Ok(())
    }

    /// Batchnorm running statistics of the nonlinear head, if any.
    /// The last linear map the head applies, transposed to act on column
    /// vectors: a `d x m` matrix for single-layer heads, `d x hidden` for the
    /// nonlinear head. The second value is true when the map acts on an
    /// intermediate hidden space rather than the backbone features. `None`
    /// for the identity head.
    pub fn analysis_matrix(&self) -> Option<(Tensor<S>, bool)> {
        match &self.params {
            HeadParams::Empty => None,
            HeadParams::Affine { w, .. } => Some((w.transpose(), false)),
            HeadParams::Basis { w } => Some((w.transpose(), false)),
            HeadParams::NonLinear { w2, .. } => Some((w2.transpose(), true)),
        }
    }

    /// Inference-mode inputs to the head's final linear layer: the features
    /// themselves for single-layer heads, the post-activation hidden features
    /// (running-statistics normalization) for the nonlinear head.
    pub fn final_layer_inputs(&self, h: &Tensor<S>) -> Result<Tensor<S>> {
        if h.cols() != self.m {
            return Err(Error::ShapeMismatch(format!(
                "features have {} columns, head expects {}",
                h.cols(),
                self.m
            )));
        }
        match &self.params {
            HeadParams::NonLinear { w1, b1, gamma, beta, running_mean, running_var, .. } => {
                let mut hidden = h.matmul(w1)?;
                let eps = S::of(BN_EPS);
                for r in 0..hidden.rows() {
                    for (j, v) in hidden.row_mut(r).iter_mut().enumerate() {
                        let pre = *v + b1.get(0, j);
                        let inv = S::one() / (running_var.get(0, j) + eps).sqrt();
                        let normed =
                            (pre - running_mean.get(0, j)) * inv * gamma.get(0, j) + beta.get(0, j);
                        *v = if normed > S::zero() { normed } else { S::zero() };
                    }
                }
                Ok(hidden)
            }
            _ => Ok(h.clone()),
        }
    }

    pub fn running_stats(&self) -> Option<(&Tensor<S>, &Tensor<S>)> {
        match &self.params {
            HeadParams::NonLinear { running_mean, running_var, .. } => {
                Some((running_mean, running_var))
            }
            _ => None,
        }
    }

    fn update_running_stats(&mut self, batch_mean: &Tensor<S>, batch_var: &Tensor<S>) {
        if let HeadParams::NonLinear { running_mean, running_var, .. } = &mut self.params {
            let momentum = S::of(BN_MOMENTUM);
            let fresh = S::one() - momentum;
            for (r, &b) in running_mean.data_mut().iter_mut().zip(batch_mean.data()) {
                *r = momentum * *r + fresh * b;
            }
            for (r, &b) in running_var.data_mut().iter_mut().zip(batch_var.data()) {
                *r = momentum * *r + fresh * b;
            }
        }
    }
}

// --- forward pass ---

/// Whether a forward pass uses batch statistics (training) or running
/// statistics (inference) in normalization layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A built forward graph with handles to its interesting nodes.
pub struct Forward<S: Real = f64> {
    pub graph: ExprGraph<S>,
    /// Input batch node ("x").
    pub x: NodeId,
    /// Backbone features `h = f(x)`, `B x m`.
    pub h: NodeId,
    /// Embeddings `z = g(h)`, `B x d`.
    pub z: NodeId,
    /// Encoder parameter nodes in [`Encoder::parameters`] order.
    pub enc_params: Vec<NodeId>,
    /// Trainable head parameter nodes in [`Head::parameters`] order; empty
    /// for frozen heads.
    pub head_params: Vec<NodeId>,
}

impl<S: Real> Forward<S> {
    pub fn h_value(&self) -> &Tensor<S> {
        self.graph.value(self.h)
    }

    pub fn z_value(&self) -> &Tensor<S> {
        self.graph.value(self.z)
    }
}

/// Training-mode forward; updates the head's batchnorm running statistics.
pub fn forward_train<S: Real>(
    encoder: &Encoder<S>,
    head: &mut Head<S>,
    x: &Tensor<S>,
) -> Result<Forward<S>> {
    let (fwd, bn) = build_forward(encoder, head, x, Mode::Train)?;
    if let Some(bn_node) = bn {
        let (mean, var) = fwd.graph.batchnorm_batch_stats(bn_node)?;
        head.update_running_stats(&mean, &var);
    }
    Ok(fwd)
}

/// Training-mode forward (batch statistics in normalization) that leaves
/// running statistics untouched — for inner refit loops whose forwards
/// should not disturb later inference behavior.
pub fn forward_train_frozen_stats<S: Real>(
    encoder: &Encoder<S>,
    head: &Head<S>,
    x: &Tensor<S>,
) -> Result<Forward<S>> {
    Ok(build_forward(encoder, head, x, Mode::Train)?.0)
}

/// Inference-mode forward: normalization uses stored running statistics, so
/// each row's output is independent of the rest of the batch.
pub fn forward_eval<S: Real>(
    encoder: &Encoder<S>,
    head: &Head<S>,
    x: &Tensor<S>,
) -> Result<Forward<S>> {
    Ok(build_forward(encoder, head, x, Mode::Eval)?.0)
}

/// Shared builder. Returns the forward handles and, in train mode with a
/// nonlinear head, the batchnorm node (for running-stat updates).
fn build_forward<S: Real>(
    encoder: &Encoder<S>,
    head: &Head<S>,
    x: &Tensor<S>,
    mode: Mode,
) -> Result<(Forward<S>, Option<NodeId>)> {
    if x.cols() != encoder.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} columns, encoder expects {}",
            x.cols(),
            encoder.input_dim()
        )));
    }
    if head.input_dim() != encoder.output_dim() {
        return Err(Error::ShapeMismatch(format!(
            "head expects {}-dim features, encoder produces {}",
            head.input_dim(),
            encoder.output_dim()
        )));
    }
    let mut g = ExprGraph::new();
    let x_id = g.input("x", x.clone())?;

    let mut enc_params = Vec::with_capacity(2 * encoder.layer_count());
    let mut cur = x_id;
    for layer in 0..encoder.layer_count() {
        let w = g.input(&format!("enc.w{layer}"), encoder.weight(layer).clone())?;
        let b = g.input(&format!("enc.b{layer}"), encoder.bias(layer).clone())?;
        enc_params.push(w);
        enc_params.push(b);
        let lin = g.matmul(cur, w)?;
        cur = g.add(lin, b)?;
        if layer + 1 < encoder.layer_count() {
            cur = g.relu(cur)?;
        }
    }
    let h_id = cur;

    let (z_id, head_params, bn_node) = append_head(&mut g, head, h_id, mode)?;

    Ok((Forward { graph: g, x: x_id, h: h_id, z: z_id, enc_params, head_params }, bn_node))
}

/// Appends the head subgraph `z = g(h)` to an existing graph. Returns the
/// embedding node, trainable-parameter nodes (empty for frozen heads, which
/// enter as constants), and the train-mode batchnorm node if one exists.
fn append_head<S: Real>(
    g: &mut ExprGraph<S>,
    head: &Head<S>,
    h_id: NodeId,
    mode: Mode,
) -> Result<(NodeId, Vec<NodeId>, Option<NodeId>)> {
    let trainable = head.is_trainable();
    let mut head_params = Vec::new();
    let mut bind = |g: &mut ExprGraph<S>, name: &str, t: &Tensor<S>| -> Result<NodeId> {
        if trainable {
            let id = g.input(name, t.clone())?;
            head_params.push(id);
            Ok(id)
        } else {
            g.constant(t.clone())
        }
    };

    let mut bn_node = None;
    let z_id = match &head.params {
        HeadParams::Empty => h_id,
        HeadParams::Affine { w, b } => {
            let w_id = bind(g, "head.w", w)?;
            let b_id = bind(g, "head.b", b)?;
            let lin = g.matmul(h_id, w_id)?;
            g.add(lin, b_id)?
        }
        HeadParams::Basis { w } => {
            let w_id = g.constant(w.clone())?;
            g.matmul(h_id, w_id)?
        }
        HeadParams::NonLinear { w1, b1, gamma, beta, w2, b2, running_mean, running_var } => {
            let w1_id = bind(g, "head.w1", w1)?;
            let b1_id = bind(g, "head.b1", b1)?;
            let gamma_id = bind(g, "head.gamma", gamma)?;
            let beta_id = bind(g, "head.beta", beta)?;
            let w2_id = bind(g, "head.w2", w2)?;
            let b2_id = bind(g, "head.b2", b2)?;
            let lin1 = g.matmul(h_id, w1_id)?;
            let pre = g.add(lin1, b1_id)?;
            let normed = match mode {
                Mode::Train => {
                    let n = g.batchnorm_train(pre, gamma_id, beta_id, S::of(BN_EPS))?;
                    bn_node = Some(n);
                    n
                }
                Mode::Eval => g.batchnorm_eval(
                    pre,
                    gamma_id,
                    beta_id,
                    running_mean.clone(),
                    running_var.clone(),
                    S::of(BN_EPS),
                )?,
            };
            let act = g.relu(normed)?;
            let lin2 = g.matmul(act, w2_id)?;
            g.add(lin2, b2_id)?
        }
    };
    Ok((z_id, head_params, bn_node))
}

/// A head-only forward graph built on a fixed feature batch `h`.
///
/// Useful wherever the backbone is frozen for several consecutive updates of
/// the head: features are computed once (see [`encoder_features`]) and each
/// refit iteration only pays for the small head subgraph. Running statistics
/// are never updated through this path.
pub struct HeadForward<S: Real = f64> {
    pub graph: ExprGraph<S>,
    /// Feature input node ("h").
    pub h: NodeId,
    /// Embedding node `z = g(h)`.
    pub z: NodeId,
    /// Trainable head parameter nodes in [`Head::parameters`] order.
    pub head_params: Vec<NodeId>,
}

impl<S: Real> HeadForward<S> {
    pub fn z_value(&self) -> &Tensor<S> {
        self.graph.value(self.z)
    }
}

/// Builds `z = g(h)` on a fixed feature batch. Train mode normalizes with
/// batch statistics, eval mode with the stored running statistics; neither
/// touches the head's running statistics.
pub fn head_forward<S: Real>(head: &Head<S>, h: &Tensor<S>, mode: Mode) -> Result<HeadForward<S>> {
    if h.cols() != head.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "features have {} columns, head expects {}",
            h.cols(),
            head.input_dim()
        )));
    }
    let mut g = ExprGraph::new();
    let h_id = g.input("h", h.clone())?;
    let (z_id, head_params, _bn) = append_head(&mut g, head, h_id, mode)?;
    Ok(HeadForward { graph: g, h: h_id, z: z_id, head_params })
}

/// Backbone features `h = f(x)` computed directly, without building a graph.
///
/// The arithmetic (kernel and operation order) matches the graph forward
/// exactly, so cached features can stand in for the `h` node of a full
/// forward bit-for-bit. Gradient-free: use the graph builders to train.
pub fn encoder_features<S: Real>(encoder: &Encoder<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.cols() != encoder.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "input has {} columns, encoder expects {}",
            x.cols(),
            encoder.input_dim()
        )));
    }
    let mut cur = x.clone();
    for layer in 0..encoder.layer_count() {
        let mut lin = cur.matmul(encoder.weight(layer))?;
        let bias = encoder.bias(layer);
        for r in 0..lin.rows() {
            for (v, &b) in lin.row_mut(r).iter_mut().zip(bias.row(0)) {
                *v += b;
            }
        }
        if layer + 1 < encoder.layer_count() {
            lin = lin.map(|v| if v > S::zero() { v } else { S::zero() });
        }
        cur = lin;
    }
    Ok(cur)
}

// --- checkpoints ---

const MANIFEST_NAME: &str = "manifest.txt";
const CHECKPOINT_FORMAT: u32 = 1;

/// Writes `encoder` and `head` to `dir` as PHT1 tensor files plus a
/// `manifest.txt` listing tensor names, shapes, head kind, and dims.
pub fn save_checkpoint<S: Real>(dir: &Path, encoder: &Encoder<S>, head: &Head<S>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut tensors: Vec<(String, &Tensor<S>)> = Vec::new();
    for layer in 0..encoder.layer_count() {
        tensors.push((format!("enc_w{layer}"), encoder.weight(layer)));
        tensors.push((format!("enc_b{layer}"), encoder.bias(layer)));
    }
    match &head.params {
        HeadParams::Empty => {}
        HeadParams::Affine { w, b } => {
            tensors.push(("head_w".into(), w));
            tensors.push(("head_b".into(), b));
        }
        HeadParams::Basis { w } => tensors.push(("head_w".into(), w)),
        HeadParams::NonLinear { w1, b1, gamma, beta, w2, b2, running_mean, running_var } => {
            tensors.push(("head_w1".into(), w1));
            tensors.push(("head_b1".into(), b1));
            tensors.push(("head_gamma".into(), gamma));
            tensors.push(("head_beta".into(), beta));
            tensors.push(("head_w2".into(), w2));
            tensors.push(("head_b2".into(), b2));
            tensors.push(("head_running_mean".into(), running_mean));
            tensors.push(("head_running_var".into(), running_var));
        }
    }

    let mut manifest = String::new();
    manifest.push_str(&format!("format {CHECKPOINT_FORMAT}\n"));
    manifest.push_str(&format!(
        "encoder_sizes {}\n",
        encoder.sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(" ")
    ));
    manifest.push_str(&format!("head_kind {}\n", head.kind));
    manifest.push_str(&format!("head_m {}\n", head.m));
    manifest.push_str(&format!("head_d {}\n", head.d));
    if let Some(h) = head.hidden {
        manifest.push_str(&format!("head_hidden {h}\n"));
    }
    for (name, t) in &tensors {
        manifest.push_str(&format!("tensor {name} {} {} {name}.pht\n", t.rows(), t.cols()));
        t.save(dir.join(format!("{name}.pht")))?;
    }
    // manifest last: a torn write leaves no manifest rather than a manifest
    // pointing at missing tensors
    std::fs::write(dir.join(MANIFEST_NAME), manifest)
        .map_err(|e| Error::io(dir.join(MANIFEST_NAME).display().to_string(), e))?;
    Ok(())
}

/// Reads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint<S: Real>(dir: &Path) -> Result<(Encoder<S>, Head<S>)> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = std::fs::read_to_string(&manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let bad = |reason: String| Error::MalformedCheckpoint(reason);

    let mut sizes: Option<Vec<usize>> = None;
    let mut kind: Option<HeadKind> = None;
    let mut m: Option<usize> = None;
    let mut d: Option<usize> = None;
    let mut hidden: Option<usize> = None;
    let mut tensors: Vec<(String, usize, usize, String)> = Vec::new();

    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let key = parts.next().unwrap();
        let rest: Vec<&str> = parts.collect();
        let parse_usize = |s: &str| -> Result<usize> {
            s.parse().map_err(|_| bad(format!("line {}: bad integer '{s}'", ln + 1)))
        };
        match key {
            "format" => {
                let v: u32 = rest
                    .first()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad(format!("line {}: bad format version", ln + 1)))?;
                if v != CHECKPOINT_FORMAT {
                    return Err(bad(format!("unsupported checkpoint format {v}")));
                }
            }
            "encoder_sizes" => {
                let s: Result<Vec<usize>> = rest.iter().map(|x| parse_usize(x)).collect();
                sizes = Some(s?);
            }
            "head_kind" => {
                kind = Some(HeadKind::parse(
                    rest.first().ok_or_else(|| bad("missing head kind".into()))?,
                )?);
            }
            "head_m" => m = Some(parse_usize(rest.first().ok_or_else(|| bad("missing head_m".into()))?)?),
            "head_d" => d = Some(parse_usize(rest.first().ok_or_else(|| bad("missing head_d".into()))?)?),
            "head_hidden" => {
                hidden =
                    Some(parse_usize(rest.first().ok_or_else(|| bad("missing head_hidden".into()))?)?)
            }
            "tensor" => {
                if rest.len() != 4 {
                    return Err(bad(format!("line {}: tensor entries need 4 fields", ln + 1)));
                }
                tensors.push((
                    rest[0].to_string(),
                    parse_usize(rest[1])?,
                    parse_usize(rest[2])?,
                    rest[3].to_string(),
                ));
            }
            other => return Err(bad(format!("line {}: unknown key '{other}'", ln + 1))),
        }
    }

    let sizes = sizes.ok_or_else(|| bad("manifest missing encoder_sizes".into()))?;
    let kind = kind.ok_or_else(|| bad("manifest missing head_kind".into()))?;
    let m = m.ok_or_else(|| bad("manifest missing head_m".into()))?;
    let d = d.ok_or_else(|| bad("manifest missing head_d".into()))?;

    let mut loaded: std::collections::BTreeMap<String, Tensor<S>> = std::collections::BTreeMap::new();
    for (name, rows, cols, file) in &tensors {
        let t = Tensor::load(dir.join(file))?;
        if t.shape() != (*rows, *cols) {
            return Err(bad(format!(
                "tensor {name}: manifest says {rows}x{cols}, file holds {}x{}",
                t.rows(),
                t.cols()
            )));
        }
        loaded.insert(name.clone(), t);
    }
    let mut take = |name: String| -> Result<Tensor<S>> {
        loaded.remove(&name).ok_or_else(|| bad(format!("manifest missing tensor {name}")))
    };

    let mut encoder = init_encoder::<S>(&sizes, 0)?;
    for layer in 0..encoder.layer_count() {
        let w = take(format!("enc_w{layer}"))?;
        let b = take(format!("enc_b{layer}"))?;
        let expect_w = (sizes[layer], sizes[layer + 1]);
        if w.shape() != expect_w || b.shape() != (1, sizes[layer + 1]) {
            return Err(bad(format!("encoder layer {layer} tensor shapes do not match sizes")));
        }
        encoder.weights[layer] = w;
        encoder.biases[layer] = b;
    }
    if encoder.output_dim() != m {
        return Err(bad(format!(
            "head_m {m} disagrees with encoder output {}",
            encoder.output_dim()
        )));
    }

    let params = match kind {
        HeadKind::None => HeadParams::Empty,
        HeadKind::Linear | HeadKind::FixedRandom | HeadKind::FixedPretrained => {
            let w = take("head_w".into())?;
            let b = take("head_b".into())?;
            if w.shape() != (m, d) || b.shape() != (1, d) {
                return Err(bad("affine head tensor shapes do not match dims".into()));
            }
            HeadParams::Affine { w, b }
        }
        HeadKind::DiagonalLowRank | HeadKind::PcaLinear => {
            let w = take("head_w".into())?;
            if w.shape() != (m, d) {
                return Err(bad("basis head tensor shape does not match dims".into()));
            }
            HeadParams::Basis { w }
        }
        HeadKind::NonLinear => {
            let hsize = hidden.ok_or_else(|| bad("nonlinear head missing head_hidden".into()))?;
            let fetch = |name: &str, shape: (usize, usize), loaded: &mut dyn FnMut(String) -> Result<Tensor<S>>| -> Result<Tensor<S>> {
                let t = loaded(name.to_string())?;
                if t.shape() != shape {
                    return Err(Error::MalformedCheckpoint(format!(
                        "tensor {name}: expected {}x{}, got {}x{}",
                        shape.0,
                        shape.1,
                        t.rows(),
                        t.cols()
                    )));
                }
                Ok(t)
            };
            HeadParams::NonLinear {
                w1: fetch("head_w1", (m, hsize), &mut take)?,
                b1: fetch("head_b1", (1, hsize), &mut take)?,
                gamma: fetch("head_gamma", (1, hsize), &mut take)?,
                beta: fetch("head_beta", (1, hsize), &mut take)?,
                w2: fetch("head_w2", (hsize, d), &mut take)?,
                b2: fetch("head_b2", (1, d), &mut take)?,
                running_mean: fetch("head_running_mean", (1, hsize), &mut take)?,
                running_var: fetch("head_running_var", (1, hsize), &mut take)?,
            }
        }
    };
    if !loaded.is_empty() {
        let extra: Vec<&String> = loaded.keys().collect();
        return Err(bad(format!("manifest lists unused tensors: {extra:?}")));
    }
    let head = Head { kind, m, d, hidden: if kind == HeadKind::NonLinear { hidden } else { None }, params };
    Ok((encoder, head))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn encoder_features_match_graph_forward_bitwise() {
        let enc = init_encoder::<f64>(&[5, 7, 4], 21).unwrap();
        let head = init_head::<f64>(HeadKind::Linear, 4, 3, None, 22).unwrap();
        let x = random_batch(6, 5, 23);
        let fwd = forward_eval(&enc, &head, &x).unwrap();
        let h = encoder_features(&enc, &x).unwrap();
        assert_eq!(h.data(), fwd.h_value().data());
        assert_eq!(h.shape(), (6, 4));
    }

    #[test]
    fn head_forward_on_cached_features_matches_full_forward() {
        let enc = init_encoder::<f64>(&[5, 6, 4], 31).unwrap();
        let x = random_batch(8, 5, 33);
        let h = encoder_features(&enc, &x).unwrap();
        for kind in [HeadKind::Linear, HeadKind::NonLinear, HeadKind::DiagonalLowRank] {
            let hidden = (kind == HeadKind::NonLinear).then_some(5);
            let head = init_head::<f64>(kind, 4, 3, hidden, 34).unwrap();
            let full = forward_train_frozen_stats(&enc, &head, &x).unwrap();
            let part = head_forward(&head, &h, Mode::Train).unwrap();
            assert_eq!(part.z_value().data(), full.z_value().data(), "{kind:?}");
            assert_eq!(part.head_params.len(), full.head_params.len());
        }
    }

    #[test]
    fn head_forward_rejects_wrong_feature_width() {
        let head = init_head::<f64>(HeadKind::Linear, 4, 2, None, 1).unwrap();
        let h = random_batch(3, 5, 2);
        assert!(head_forward(&head, &h, Mode::Eval).is_err());
    }

    #[test]
    fn encoder_shapes_and_zero_biases() {
        let enc = init_encoder::<f64>(&[4, 8, 16], 1).unwrap();
        assert_eq!(enc.weight(0).shape(), (4, 8));
        assert_eq!(enc.weight(1).shape(), (8, 16));
        assert!(enc.bias(0).data().iter().all(|&b| b == 0.0));
        assert!(enc.bias(1).data().iter().all(|&b| b == 0.0));
        assert_eq!(enc.param_count(), 4 * 8 + 8 + 8 * 16 + 16);
    }

    #[test]
    fn encoder_init_is_deterministic_per_seed() {
        let a = init_encoder::<f64>(&[6, 5, 4], 9).unwrap();
        let b = init_encoder::<f64>(&[6, 5, 4], 9).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        let c = init_encoder::<f64>(&[6, 5, 4], 10).unwrap();
        assert_ne!(a.parameters(), c.parameters());
    }

    #[test]
    fn glorot_bound_holds_and_is_reached() {
        let enc = init_encoder::<f64>(&[100, 100], 3).unwrap();
        let bound = (6.0 / 200.0f64).sqrt();
        let max = enc.weight(0).max_abs();
        assert!(max <= bound, "{max} > {bound}");
        assert!(max > 0.8 * bound, "draws suspiciously close to zero: {max}");
    }

    #[test]
    fn bad_encoder_sizes_are_rejected() {
        assert!(init_encoder::<f64>(&[5], 0).is_err());
        assert!(init_encoder::<f64>(&[5, 0, 3], 0).is_err());
    }

    #[test]
    fn encoder_parameter_round_trip() {
        let mut enc = init_encoder::<f64>(&[3, 4, 2], 7).unwrap();
        let flat = enc.parameters();
        let mut shifted = flat.clone();
        for v in shifted.iter_mut() {
            *v += 1.0;
        }
        enc.load_parameters(&shifted).unwrap();
        assert_eq!(enc.parameters(), shifted);
        assert!(enc.load_parameters(&shifted[1..]).is_err());
    }

    #[test]
    fn identity_head_is_identity() {
        let enc = init_encoder::<f64>(&[5, 6], 2).unwrap();
        let head = init_head::<f64>(HeadKind::None, 6, 6, None, 0).unwrap();
        let x = random_batch(3, 5, 11);
        let fwd = forward_eval(&enc, &head, &x).unwrap();
        assert_eq!(fwd.h_value().data(), fwd.z_value().data());
        assert!(init_head::<f64>(HeadKind::None, 6, 4, None, 0).is_err());
    }

    #[test]
    fn diagonal_low_rank_selects_leading_coordinates() {
        let enc = init_encoder::<f64>(&[4, 6], 5).unwrap();
        let head = init_head::<f64>(HeadKind::DiagonalLowRank, 6, 3, None, 0).unwrap();
        let x = random_batch(4, 4, 12);
        let fwd = forward_eval(&enc, &head, &x).unwrap();
        let h = fwd.h_value();
        let z = fwd.z_value();
        for r in 0..4 {
            assert_eq!(&h.row(r)[..3], z.row(r));
        }
        assert!(!head.is_trainable());
    }

    #[test]
    fn head_dim_and_hidden_preconditions() {
        assert!(init_head::<f64>(HeadKind::Linear, 4, 8, None, 0).is_err()); // d > m
        assert!(init_head::<f64>(HeadKind::NonLinear, 8, 4, None, 0).is_err()); // missing hidden
        assert!(init_head::<f64>(HeadKind::Linear, 8, 4, Some(6), 0).is_err()); // stray hidden
        assert!(init_head::<f64>(HeadKind::FixedPretrained, 8, 4, None, 0).is_err());
        assert!(init_head::<f64>(HeadKind::PcaLinear, 8, 4, None, 0).is_err());
        assert!(init_head::<f64>(HeadKind::NonLinear, 8, 4, Some(6), 0).is_ok());
    }

    #[test]
    fn linear_head_flat_length_and_round_trip() {
        let mut head = init_head::<f64>(HeadKind::Linear, 3, 2, None, 4).unwrap();
        let flat = head.parameters();
        assert_eq!(flat.len(), 8); // 6 weights + 2 biases

        let enc = init_encoder::<f64>(&[2, 3], 1).unwrap();
        let x = random_batch(2, 2, 44);
        let before = forward_eval(&enc, &head, &x).unwrap().z_value().clone();
        head.load_parameters(&flat).unwrap();
        let after = forward_eval(&enc, &head, &x).unwrap().z_value().clone();
        assert_eq!(before.data(), after.data());
        assert!(head.load_parameters(&flat[..7]).is_err());
    }

    #[test]
    fn fixed_random_draws_the_same_parameters_as_linear() {
        let a = init_head::<f64>(HeadKind::Linear, 6, 3, None, 17).unwrap();
        let b = init_head::<f64>(HeadKind::FixedRandom, 6, 3, None, 17).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert!(a.is_trainable());
        assert!(!b.is_trainable());
    }

    #[test]
    fn zero_linear_head_annihilates() {
        let enc = init_encoder::<f64>(&[4, 5], 3).unwrap();
        let mut head = init_head::<f64>(HeadKind::Linear, 5, 2, None, 6).unwrap();
        head.load_parameters(&vec![0.0; head.param_count()]).unwrap();
        let fwd = forward_eval(&enc, &head, &random_batch(3, 4, 13)).unwrap();
        assert!(fwd.z_value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nonlinear_train_mode_rejects_batch_of_one() {
        let enc = init_encoder::<f64>(&[4, 5], 3).unwrap();
        let mut head = init_head::<f64>(HeadKind::NonLinear, 5, 2, Some(6), 6).unwrap();
        let x = random_batch(1, 4, 14);
        match forward_train(&enc, &mut head, &x) {
            Err(Error::BatchNormBatch(1)) => {}
            Err(other) => panic!("expected batchnorm batch error, got {other:?}"),
            Ok(_) => panic!("expected batchnorm batch error, got a forward pass"),
        }
        // eval mode is fine with single rows
        assert!(forward_eval(&enc, &head, &x).is_ok());
    }

    #[test]
    fn forward_train_updates_running_stats_and_frozen_variant_does_not() {
        let enc = init_encoder::<f64>(&[4, 5], 3).unwrap();
        let mut head = init_head::<f64>(HeadKind::NonLinear, 5, 2, Some(6), 6).unwrap();
        let (m0, v0) = {
            let (m, v) = head.running_stats().unwrap();
            (m.clone(), v.clone())
        };
        let x = random_batch(8, 4, 15);
        forward_train_frozen_stats(&enc, &head, &x).unwrap();
        {
            let (m, v) = head.running_stats().unwrap();
            assert_eq!(m.data(), m0.data());
            assert_eq!(v.data(), v0.data());
        }
        forward_train(&enc, &mut head, &x).unwrap();
        let (m1, v1) = head.running_stats().unwrap();
        assert_ne!(m1.data(), m0.data());
        assert_ne!(v1.data(), v0.data());
    }

    #[test]
    fn nonlinear_eval_is_batch_composition_independent() {
        let enc = init_encoder::<f64>(&[4, 5], 3).unwrap();
        let mut head = init_head::<f64>(HeadKind::NonLinear, 5, 3, Some(6), 6).unwrap();
        // move running stats away from their init first
        forward_train(&enc, &mut head, &random_batch(16, 4, 16)).unwrap();

        let probe = random_batch(1, 4, 17);
        let companions_a = random_batch(3, 4, 18);
        let companions_b = random_batch(5, 4, 19);
        let with_a = Tensor::vstack(&[&probe, &companions_a]).unwrap();
        let with_b = Tensor::vstack(&[&probe, &companions_b]).unwrap();
        let za = forward_eval(&enc, &head, &with_a).unwrap().z_value().row(0).to_vec();
        let zb = forward_eval(&enc, &head, &with_b).unwrap().z_value().row(0).to_vec();
        assert_eq!(za, zb);
    }

    #[test]
    fn pca_basis_head_requires_orthonormal_columns() {
        let mut w = Tensor::<f64>::zeros(5, 2);
        w.set(0, 0, 1.0);
        w.set(2, 1, 1.0);
        let head = Head::from_pca_basis(w.clone()).unwrap();
        assert_eq!(head.kind(), HeadKind::PcaLinear);
        assert!(!head.is_trainable());
        w.set(0, 1, 0.5); // columns no longer orthogonal
        assert!(Head::from_pca_basis(w).is_err());
    }

    #[test]
    fn pretrained_head_shape_checks() {
        let w = random_batch(6, 3, 20);
        let b = Tensor::<f64>::zeros(1, 3);
        let head = Head::from_pretrained(w.clone(), b.clone()).unwrap();
        assert_eq!(head.kind(), HeadKind::FixedPretrained);
        assert_eq!(head.param_count(), 21);
        assert!(Head::from_pretrained(w, Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn frozen_heads_expose_no_gradient_nodes() {
        let enc = init_encoder::<f64>(&[4, 5], 3).unwrap();
        for head in [
            init_head::<f64>(HeadKind::FixedRandom, 5, 2, None, 1).unwrap(),
            init_head::<f64>(HeadKind::DiagonalLowRank, 5, 2, None, 1).unwrap(),
            init_head::<f64>(HeadKind::None, 5, 5, None, 1).unwrap(),
        ] {
            let fwd = forward_eval(&enc, &head, &random_batch(3, 4, 21)).unwrap();
            assert!(fwd.head_params.is_empty());
            assert_eq!(fwd.enc_params.len(), 2);
        }
        let head = init_head::<f64>(HeadKind::NonLinear, 5, 2, Some(7), 1).unwrap();
        let fwd = forward_eval(&enc, &head, &random_batch(3, 4, 22)).unwrap();
        assert_eq!(fwd.head_params.len(), 6);
    }

    #[test]
    fn full_model_gradient_matches_central_differences() {
        let enc = init_encoder::<f64>(&[3, 6, 4], 8).unwrap();
        let mut head = init_head::<f64>(HeadKind::NonLinear, 4, 2, Some(5), 9).unwrap();
        let x = random_batch(6, 3, 23);
        let mut fwd = forward_train(&enc, &mut head, &x).unwrap();
        let sq = fwd.graph.mul(fwd.z, fwd.z).unwrap();
        let loss = fwd.graph.sum(sq).unwrap();
        // Batch normalization of (a + b1) is invariant to b1, and a constant
        // shift of h (the encoder's final bias) reaches the normalization as
        // a constant per-column shift too. Both true gradients are exactly
        // zero, so a finite-difference quotient of rounding noise is
        // meaningless there; check them analytically instead.
        let flat_dirs = [*fwd.enc_params.last().unwrap(), fwd.head_params[1]];
        let wrt: Vec<NodeId> = fwd
            .enc_params
            .iter()
            .chain(&fwd.head_params)
            .copied()
            .filter(|id| !flat_dirs.contains(id))
            .collect();
        let err = fwd.graph.finite_difference_check(loss, &wrt, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        for dir in flat_dirs {
            let g = fwd.graph.gradient(loss, &[dir]).unwrap();
            assert!(g[0].max_abs() < 1e-10, "{}", g[0].max_abs());
        }
    }

    #[test]
    fn checkpoint_round_trip_preserves_everything() {
        let dir = tempfile::tempdir().unwrap();
        let enc = init_encoder::<f64>(&[4, 7, 5], 31).unwrap();
        let mut head = init_head::<f64>(HeadKind::NonLinear, 5, 3, Some(6), 32).unwrap();
        forward_train(&enc, &mut head, &random_batch(9, 4, 33)).unwrap(); // nudge running stats
        save_checkpoint(dir.path(), &enc, &head).unwrap();

        let (enc2, head2) = load_checkpoint::<f64>(dir.path()).unwrap();
        assert_eq!(enc.parameters(), enc2.parameters());
        assert_eq!(head.parameters(), head2.parameters());
        assert_eq!(head2.kind(), HeadKind::NonLinear);
        assert_eq!(head2.hidden_dim(), Some(6));
        let (m1, v1) = head.running_stats().unwrap();
        let (m2, v2) = head2.running_stats().unwrap();
        assert_eq!(m1.data(), m2.data());
        assert_eq!(v1.data(), v2.data());

        let x = random_batch(4, 4, 34);
        let z1 = forward_eval(&enc, &head, &x).unwrap().z_value().clone();
        let z2 = forward_eval(&enc2, &head2, &x).unwrap().z_value().clone();
        assert_eq!(z1.data(), z2.data());
    }

    #[test]
    fn checkpoint_round_trip_for_basis_and_identity_heads() {
        for head in [
            init_head::<f64>(HeadKind::DiagonalLowRank, 5, 2, None, 0).unwrap(),
            init_head::<f64>(HeadKind::None, 5, 5, None, 0).unwrap(),
            init_head::<f64>(HeadKind::FixedRandom, 5, 2, None, 3).unwrap(),
        ] {
            let dir = tempfile::tempdir().unwrap();
            let enc = init_encoder::<f64>(&[3, 5], 2).unwrap();
            save_checkpoint(dir.path(), &enc, &head).unwrap();
            let (_, head2) = load_checkpoint::<f64>(dir.path()).unwrap();
            assert_eq!(head2.kind(), head.kind());
            assert_eq!(head2.parameters(), head.parameters());
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let enc = init_encoder::<f64>(&[3, 5], 2).unwrap();
        let head = init_head::<f64>(HeadKind::Linear, 5, 2, None, 3).unwrap();
        save_checkpoint(dir.path(), &enc, &head).unwrap();

        // missing tensor file
        std::fs::remove_file(dir.path().join("head_w.pht")).unwrap();
        assert!(load_checkpoint::<f64>(dir.path()).is_err());

        // garbled manifest
        save_checkpoint(dir.path(), &enc, &head).unwrap();
        std::fs::write(dir.path().join("manifest.txt"), "format 1\nnonsense here\n").unwrap();
        match load_checkpoint::<f64>(dir.path()) {
            Err(Error::MalformedCheckpoint(_)) => {}
            other => panic!("expected MalformedCheckpoint, got {other:?}"),
        }
    }
}
