//! Temperature-scaled contrastive objectives on cosine similarities.
//!
//! Two independent routes compute the batch objective: a per-anchor scalar
//! route ([`info_nce`] / [`batch_loss_value`]) and the graph route
//! ([`batch_loss`]) used for training. Tests pin them against each other.
//!
//! Log-sum-exp terms subtract the row maximum before exponentiating. In the
//! graph route the shift is bound as a detached constant — mathematically a
//! no-op for any shift, so gradients are exact even though the constant is
//! not refreshed when inputs are re-bound.

use crate::error::{Error, Result};
use crate::graph::{ExprGraph, NodeId};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Additive mask value for logits excluded from a denominator; exp() of a
/// shifted masked logit underflows to exactly zero.
const MASK_NEG: f64 = -1e30;

/// Which embeddings act as negatives for each anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativePolicy {
    /// Both views of every other example in the batch (2(B-1) negatives).
    BatchBothViews,
    /// Only second-view embeddings of other examples (B-1 negatives).
    BatchView2Only,
}

/// Contrastive loss configuration.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossConfig<S: Real = f64> {
    /// Softmax temperature, strictly positive.
    pub temperature: S,
    /// Whether the positive similarity also appears in the denominator
    /// (standard practice). `false` gives the bare literal form.
    pub include_positive: bool,
    pub negative_policy: NegativePolicy,
}

impl<S: Real> Default for LossConfig<S> {
    fn default() -> Self {
        LossConfig {
            temperature: S::of(0.5),
            include_positive: true,
            negative_policy: NegativePolicy::BatchBothViews,
        }
    }
}

impl<S: Real> LossConfig<S> {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > S::zero()) || !self.temperature.is_finite() {
            return Err(Error::InvalidArg(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Cosine similarity of two vectors, clamped to [-1, 1] against rounding.
pub fn cosine_similarity<S: Real>(u: &[S], v: &[S]) -> Result<S> {
    if u.len() != v.len() {
        return Err(Error::ShapeMismatch(format!(
            "cosine_similarity: {} vs {}",
            u.len(),
            v.len()
        )));
    }
    let nu = u.iter().map(|&x| x * x).sum::<S>().sqrt();
    let nv = v.iter().map(|&x| x * x).sum::<S>().sqrt();
    if nu == S::zero() || nv == S::zero() {
        return Err(Error::ZeroNorm { context: "cosine_similarity" });
    }
    let dot: S = u.iter().zip(v).map(|(&a, &b)| a * b).sum();
    Ok((dot / (nu * nv)).min(S::one()).max(-S::one()))
}

/// Single-anchor contrastive loss.
///
/// `-log( exp(cos(z1,z2)/t) / sum_d exp(cos(z1,d)/t) )` where the
/// denominator runs over `negatives` rows, plus `z2` itself when
/// `include_positive` is set. Computed with max-subtraction.
pub fn info_nce<S: Real>(
    z1: &[S],
    z2: &[S],
    negatives: &Tensor<S>,
    config: &LossConfig<S>,
) -> Result<S> {
    config.validate()?;
    if negatives.rows() == 0 && !config.include_positive {
        return Err(Error::InvalidArg(
            "empty denominator: no negatives and positive excluded".into(),
        ));
    }
    let inv_t = S::one() / config.temperature;
    let pos = cosine_similarity(z1, z2)? * inv_t;
    let mut logits = Vec::with_capacity(negatives.rows() + 1);
    for i in 0..negatives.rows() {
        logits.push(cosine_similarity(z1, negatives.row(i))? * inv_t);
    }
    if config.include_positive {
        logits.push(pos);
    }
    let m = logits.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let den: S = logits.iter().map(|&l| (l - m).exp()).sum();
    Ok(-pos + m + den.ln())
}

/// Handles to the loss subgraph appended by [`batch_loss`].
pub struct BatchLoss {
    /// Scalar (1 x 1) mean loss over all 2B anchors.
    pub loss: NodeId,
    /// 2B x 1 per-anchor losses (view-1 anchors first).
    pub per_anchor: NodeId,
    /// The 2B x d concatenated embedding node the loss was built on.
    pub z_cat: NodeId,
}

/// Appends the batch objective for two B x d embedding views.
pub fn batch_loss<S: Real>(
    graph: &mut ExprGraph<S>,
    z_view1: NodeId,
    z_view2: NodeId,
    config: &LossConfig<S>,
) -> Result<BatchLoss> {
    let (r1, c1) = graph.value(z_view1).shape();
    let (r2, c2) = graph.value(z_view2).shape();
    if r1 != r2 || c1 != c2 {
        return Err(Error::ShapeMismatch(format!(
            "batch_loss views: {r1}x{c1} vs {r2}x{c2}"
        )));
    }
    let z_cat = graph.concat(z_view1, z_view2)?;
    batch_loss_cat(graph, z_cat, r1, config)
}

/// Same as [`batch_loss`] but on an already concatenated 2B x d node whose
/// first `b` rows are view 1.
pub fn batch_loss_cat<S: Real>(
    graph: &mut ExprGraph<S>,
    z_cat: NodeId,
    b: usize,
    config: &LossConfig<S>,
) -> Result<BatchLoss> {
    config.validate()?;
    let (rows, _) = graph.value(z_cat).shape();
    if b < 2 {
        return Err(Error::InvalidArg(format!(
            "contrastive batch needs at least 2 examples for a non-empty negative set, got {b}"
        )));
    }
    if rows != 2 * b {
        return Err(Error::ShapeMismatch(format!(
            "batch_loss_cat: expected {} rows, got {rows}",
            2 * b
        )));
    }
    let n = 2 * b;
    let inv_t = S::one() / config.temperature;

    let (mask, positives) = anchor_masks::<S>(b, config);
    let sims = graph.cosine(z_cat, z_cat)?;
    let logits = graph.scale(sims, inv_t)?;
    let mask_node = graph.constant(mask)?;
    let masked = graph.add(logits, mask_node)?;

    // Detached per-row maxima over the allowed entries; any fixed shift is
    // exact for log-sum-exp, this one also makes it overflow-safe.
    let row_max: Vec<S> = (0..n)
        .map(|i| {
            graph
                .value(masked)
                .row(i)
                .iter()
                .fold(S::neg_infinity(), |a, &v| a.max(v))
        })
        .collect();
    let max_col = graph.constant(Tensor::col_vector(row_max.clone()))?;
    let neg_max_col = graph.constant(Tensor::col_vector(row_max.iter().map(|&v| -v).collect()))?;
    let ones_row = graph.constant(Tensor::filled(1, n, S::one()))?;
    let ones_col = graph.constant(Tensor::filled(n, 1, S::one()))?;

    let shift = graph.matmul(neg_max_col, ones_row)?;
    let shifted = graph.add(masked, shift)?;
    let expd = graph.exp(shifted)?;
    let row_sums = graph.matmul(expd, ones_col)?;
    let log_sums = graph.log(row_sums)?;
    let lse = graph.add(log_sums, max_col)?;

    let pos_mask = graph.constant(positives)?;
    let pos_logits = graph.mul(logits, pos_mask)?;
    let pos_col = graph.matmul(pos_logits, ones_col)?;
    let neg_pos_col = graph.scale(pos_col, -S::one())?;

    let per_anchor = graph.add(lse, neg_pos_col)?;
    let total = graph.sum(per_anchor)?;
    let loss = graph.scale(total, S::one() / S::of(n as f64))?;
    Ok(BatchLoss { loss, per_anchor, z_cat })
}

/// Denominator mask (0 allowed / large negative excluded) and positive
/// indicator for the 2B x 2B logit matrix. Anchor `i < b` is view 1 of
/// example `i`; anchor `b + i` is view 2. The positive partner sits at
/// `(i + b) mod 2b`.
fn anchor_masks<S: Real>(b: usize, config: &LossConfig<S>) -> (Tensor<S>, Tensor<S>) {
    let n = 2 * b;
    let neg = S::of(MASK_NEG);
    let mut mask = Tensor::filled(n, n, neg);
    let mut pos = Tensor::zeros(n, n);
    for i in 0..n {
        let example = i % b;
        let partner = (i + b) % n;
        for j in 0..n {
            let is_negative = match config.negative_policy {
                NegativePolicy::BatchBothViews => j % b != example,
                NegativePolicy::BatchView2Only => j >= b && j % b != example,
            };
            if is_negative || (config.include_positive && j == partner) {
                mask.set(i, j, S::zero());
            }
        }
        pos.set(i, partner, S::one());
    }
    (mask, pos)
}

/// Reference batch objective: the mean of [`info_nce`] over all 2B anchors.
/// Slower scalar route used to cross-check the graph construction.
pub fn batch_loss_value<S: Real>(
    z_view1: &Tensor<S>,
    z_view2: &Tensor<S>,
    config: &LossConfig<S>,
) -> Result<S> {
    config.validate()?;
    if z_view1.shape() != z_view2.shape() {
        return Err(Error::ShapeMismatch("batch_loss_value views".into()));
    }
    let b = z_view1.rows();
    if b < 2 {
        return Err(Error::InvalidArg(format!(
            "contrastive batch needs at least 2 examples for a non-empty negative set, got {b}"
        )));
    }
    let z = Tensor::vstack(&[z_view1, z_view2])?;
    let n = 2 * b;
    let mut total = S::zero();
    for i in 0..n {
        let example = i % b;
        let partner = (i + b) % n;
        let negative_rows: Vec<usize> = (0..n)
            .filter(|&j| match config.negative_policy {
                NegativePolicy::BatchBothViews => j % b != example,
                NegativePolicy::BatchView2Only => j >= b && j % b != example,
            })
            .collect();
        let negatives = z.select_rows(&negative_rows)?;
        total += info_nce(z.row(i), z.row(partner), &negatives, config)?;
    }
    Ok(total / S::of(n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use rand::Rng;

    fn cfg(t: f64, include: bool, policy: NegativePolicy) -> LossConfig<f64> {
        LossConfig { temperature: t, include_positive: include, negative_policy: policy }
    }

    fn random_embeddings(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0) + 1.5).collect())
            .unwrap()
    }

    #[test]
    fn identical_pair_with_identical_negative_and_excluded_positive_is_zero() {
        let negs = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let c = cfg(0.5, false, NegativePolicy::BatchBothViews);
        let loss = info_nce(&[1.0, 0.0], &[1.0, 0.0], &negs, &c).unwrap();
        assert!(loss.abs() < 1e-10, "loss = {loss}");
    }

    #[test]
    fn orthogonal_negative_unit_temperature() {
        let negs = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let c = cfg(1.0, false, NegativePolicy::BatchBothViews);
        let loss = info_nce(&[1.0, 0.0], &[1.0, 0.0], &negs, &c).unwrap();
        assert!((loss - (-1.0)).abs() < 1e-10, "loss = {loss}");
    }

    #[test]
    fn orthogonal_negative_with_included_positive() {
        let negs = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let c = cfg(1.0, true, NegativePolicy::BatchBothViews);
        let loss = info_nce(&[1.0, 0.0], &[1.0, 0.0], &negs, &c).unwrap();
        let expected = (1.0 + (-1.0f64).exp()).ln(); // 0.31326168751822286
        assert!((loss - expected).abs() < 1e-10, "loss = {loss}");
    }

    #[test]
    fn scale_invariance_of_embeddings() {
        let mut rng = rng_from(5);
        for _ in 0..50 {
            let z1: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0) + 1.2).collect();
            let z2: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0) + 1.2).collect();
            let negs = random_embeddings(4, 6, 77);
            let c = cfg(0.5, true, NegativePolicy::BatchBothViews);
            let base = info_nce(&z1, &z2, &negs, &c).unwrap();
            let z1s: Vec<f64> = z1.iter().map(|&x| x * 37.5).collect();
            let negs_scaled = negs.scale(0.004);
            let scaled = info_nce(&z1s, &z2, &negs_scaled, &c).unwrap();
            assert!((base - scaled).abs() < 1e-10, "{base} vs {scaled}");
        }
    }

    #[test]
    fn zero_norm_and_empty_denominator_errors() {
        let negs = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        let c = cfg(0.5, false, NegativePolicy::BatchBothViews);
        assert!(matches!(
            info_nce(&[0.0, 0.0], &[1.0, 0.0], &negs, &c),
            Err(Error::ZeroNorm { .. })
        ));
        let empty = Tensor::zeros(0, 2);
        assert!(info_nce(&[1.0, 0.0], &[1.0, 0.0], &empty, &c).is_err());
        // with the positive included the denominator is non-empty
        let ok = cfg(0.5, true, NegativePolicy::BatchBothViews);
        assert!(info_nce(&[1.0, 0.0], &[1.0, 0.0], &empty, &ok).is_ok());
    }

    #[test]
    fn non_positive_temperature_is_rejected() {
        let negs = Tensor::from_rows(&[vec![0.0, 1.0]]).unwrap();
        for t in [0.0, -1.0] {
            let c = cfg(t, true, NegativePolicy::BatchBothViews);
            assert!(info_nce(&[1.0, 0.0], &[1.0, 0.0], &negs, &c).is_err());
        }
    }

    #[test]
    fn degenerate_identical_batch_gives_ln3() {
        // B = 2, all four embeddings identical: every similarity is 1, the
        // denominator has 3 equal terms, so each anchor loss is ln 3 for
        // any temperature.
        for t in [0.1, 0.5, 3.0] {
            let z = Tensor::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4]]).unwrap();
            let mut g = ExprGraph::new();
            let z1 = g.input("z1", z.clone()).unwrap();
            let z2 = g.input("z2", z.clone()).unwrap();
            let c = cfg(t, true, NegativePolicy::BatchBothViews);
            let bl = batch_loss(&mut g, z1, z2, &c).unwrap();
            let loss = g.value(bl.loss).get(0, 0);
            assert!((loss - 3.0f64.ln()).abs() < 1e-10, "t={t}: {loss}");
        }
    }

    #[test]
    fn graph_route_matches_scalar_route() {
        for seed in 0..20u64 {
            let b = 2 + (seed as usize) % 4;
            let z1 = random_embeddings(b, 5, seed * 2 + 1);
            let z2 = random_embeddings(b, 5, seed * 2 + 2);
            for (include, policy) in [
                (true, NegativePolicy::BatchBothViews),
                (false, NegativePolicy::BatchBothViews),
                (true, NegativePolicy::BatchView2Only),
                (false, NegativePolicy::BatchView2Only),
            ] {
                let c = cfg(0.5, include, policy);
                let reference = batch_loss_value(&z1, &z2, &c).unwrap();
                let mut g = ExprGraph::new();
                let n1 = g.input("z1", z1.clone()).unwrap();
                let n2 = g.input("z2", z2.clone()).unwrap();
                let bl = batch_loss(&mut g, n1, n2, &c).unwrap();
                let graph_loss = g.value(bl.loss).get(0, 0);
                assert!(
                    (graph_loss - reference).abs() < 1e-12,
                    "seed {seed} include {include} policy {policy:?}: {graph_loss} vs {reference}"
                );
            }
        }
    }

    #[test]
    fn per_anchor_losses_nonnegative_when_positive_included() {
        for seed in 0..30u64 {
            let b = 2 + (seed as usize) % 3;
            let z1 = random_embeddings(b, 4, 100 + seed);
            let z2 = random_embeddings(b, 4, 200 + seed);
            let c = cfg(0.5, true, NegativePolicy::BatchBothViews);
            let mut g = ExprGraph::new();
            let n1 = g.input("z1", z1).unwrap();
            let n2 = g.input("z2", z2).unwrap();
            let bl = batch_loss(&mut g, n1, n2, &c).unwrap();
            for (i, &v) in g.value(bl.per_anchor).data().iter().enumerate() {
                assert!(v >= -1e-12, "seed {seed} anchor {i}: {v}");
            }
        }
    }

    #[test]
    fn permuting_examples_permutes_anchor_losses() {
        let b = 5;
        let z1 = random_embeddings(b, 4, 31);
        let z2 = random_embeddings(b, 4, 32);
        let c = cfg(0.5, true, NegativePolicy::BatchBothViews);
        let anchor_losses = |a: &Tensor<f64>, b2: &Tensor<f64>| -> Vec<f64> {
            let mut g = ExprGraph::new();
            let n1 = g.input("z1", a.clone()).unwrap();
            let n2 = g.input("z2", b2.clone()).unwrap();
            let bl = batch_loss(&mut g, n1, n2, &c).unwrap();
            g.value(bl.per_anchor).data().to_vec()
        };
        let base = anchor_losses(&z1, &z2);
        let perm = [3usize, 0, 4, 1, 2];
        let z1p = z1.select_rows(&perm).unwrap();
        let z2p = z2.select_rows(&perm).unwrap();
        let permuted = anchor_losses(&z1p, &z2p);
        for (i, &src) in perm.iter().enumerate() {
            assert!((permuted[i] - base[src]).abs() < 1e-12, "view-1 anchor {i}");
            assert!((permuted[b + i] - base[b + src]).abs() < 1e-12, "view-2 anchor {i}");
        }
    }

    #[test]
    fn batch_gradient_matches_central_differences() {
        for seed in 0..10u64 {
            let b = 3;
            let z1 = random_embeddings(b, 4, 300 + seed);
            let z2 = random_embeddings(b, 4, 400 + seed);
            let c = cfg(0.5, true, NegativePolicy::BatchBothViews);
            let mut g = ExprGraph::new();
            let n1 = g.input("z1", z1).unwrap();
            let n2 = g.input("z2", z2).unwrap();
            let bl = batch_loss(&mut g, n1, n2, &c).unwrap();
            let err = g.finite_difference_check(bl.loss, &[n1, n2], 1e-5).unwrap();
            assert!(err < 1e-6, "seed {seed}: {err}");
        }
    }

    #[test]
    fn extreme_temperatures_stay_finite() {
        let b = 3;
        let z1 = random_embeddings(b, 4, 91);
        let z2 = random_embeddings(b, 4, 92);
        for t in [0.01, 100.0] {
            let c = cfg(t, true, NegativePolicy::BatchBothViews);
            let mut g = ExprGraph::new();
            let n1 = g.input("z1", z1.clone()).unwrap();
            let n2 = g.input("z2", z2.clone()).unwrap();
            let bl = batch_loss(&mut g, n1, n2, &c).unwrap();
            assert!(g.value(bl.loss).get(0, 0).is_finite());
        }
    }

    #[test]
    fn batch_of_one_is_rejected() {
        let z = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let c = cfg(0.5, true, NegativePolicy::BatchBothViews);
        assert!(batch_loss_value(&z, &z, &c).is_err());
        let mut g = ExprGraph::new();
        let n1 = g.input("z1", z.clone()).unwrap();
        let n2 = g.input("z2", z).unwrap();
        assert!(batch_loss(&mut g, n1, n2, &c).is_err());
    }

    #[test]
    fn view2_only_policy_shrinks_the_denominator() {
        // fewer negatives => smaller denominator => smaller loss
        let b = 4;
        let z1 = random_embeddings(b, 4, 55);
        let z2 = random_embeddings(b, 4, 56);
        let both = batch_loss_value(&z1, &z2, &cfg(0.5, true, NegativePolicy::BatchBothViews))
            .unwrap();
        let v2 = batch_loss_value(&z1, &z2, &cfg(0.5, true, NegativePolicy::BatchView2Only))
            .unwrap();
        assert!(v2 < both);
    }
}
