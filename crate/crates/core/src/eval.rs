//! Downstream generalization measurement: k-nearest-neighbour classification
//! and linear probing over stored feature matrices, plus component-wise
//! evaluation of a trained encoder/head pair across the backbone features,
//! the embeddings, and their range/null-space split.

use std::collections::BTreeMap;

use crate::diagnostics::null_space_decompose;
use crate::error::{Error, Result};
use crate::models::{encoder_features, head_forward, Encoder, Head, Mode};
use crate::optim::{OptimConfig, OptimKind, OptimizerState};
use crate::rng::{derive_seed, permutation};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Which classifier produced an [`EvalReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMethod {
    Knn,
    Linear,
}

impl EvalMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMethod::Knn => "knn",
            EvalMethod::Linear => "linear",
        }
    }
}

/// One classifier's result on one feature component.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    /// Feature component tag ("h", "z", "h_r", "h_n"). Direct calls on raw
    /// matrices leave it empty; [`component_eval`] fills it in.
    pub feature: String,
    pub method: EvalMethod,
    /// Exactly `correct / test_size`.
    pub accuracy: f64,
    pub correct: usize,
    pub train_size: usize,
    pub test_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
}

fn check_eval_inputs<S: Real>(
    train_feats: &Tensor<S>,
    train_labels: &[usize],
    test_feats: &Tensor<S>,
    test_labels: &[usize],
) -> Result<()> {
    if train_feats.rows() == 0 || test_feats.rows() == 0 {
        return Err(Error::InvalidArg("evaluation needs non-empty train and test sets".into()));
    }
    if train_feats.cols() != test_feats.cols() {
        return Err(Error::ShapeMismatch(format!(
            "train features have {} columns, test features {}",
            train_feats.cols(),
            test_feats.cols()
        )));
    }
    if train_feats.rows() != train_labels.len() || test_feats.rows() != test_labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "labels must pair rows 1:1 (train {} vs {}, test {} vs {})",
            train_feats.rows(),
            train_labels.len(),
            test_feats.rows(),
            test_labels.len()
        )));
    }
    if !train_feats.is_all_finite() || !test_feats.is_all_finite() {
        return Err(Error::InvalidArg("evaluation features must be finite".into()));
    }
    Ok(())
}

/// Most frequent label; ties go to the smallest class index.
fn majority_class(labels: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &y in labels {
        *counts.entry(y).or_insert(0) += 1;
    }
    let mut best = (usize::MAX, 0usize);
    for (&class, &count) in &counts {
        if count > best.1 {
            best = (class, count);
        }
    }
    best.0
}

fn row_norm_f64<S: Real>(row: &[S]) -> f64 {
    row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Scores one test row against every train row by cosine similarity.
/// Zero-norm train rows are ineligible as neighbours; a zero-norm test row
/// has no eligible neighbours at all. With no eligible neighbour the
/// prediction falls back to the train majority class.
fn knn_predict<S: Real>(
    test_row: &[S],
    train: &Tensor<S>,
    train_labels: &[usize],
    train_norms: &[f64],
    k: usize,
    fallback: usize,
) -> usize {
    let test_norm = row_norm_f64(test_row);
    let mut sims: Vec<(f64, usize)> = Vec::new();
    if test_norm > 0.0 {
        for j in 0..train.rows() {
            if train_norms[j] == 0.0 {
                continue;
            }
            let dot: f64 = test_row
                .iter()
                .zip(train.row(j))
                .map(|(a, b)| a.as_f64() * b.as_f64())
                .sum();
            sims.push((dot / (test_norm * train_norms[j]), j));
        }
    }
    if sims.is_empty() {
        return fallback;
    }
    // Highest similarity first; equal similarities keep train order.
    sims.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    sims.truncate(k.min(sims.len()));

    let mut votes: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
    for &(sim, j) in &sims {
        let entry = votes.entry(train_labels[j]).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 += sim;
    }
    // Majority vote, then summed similarity, then smallest class index
    // (ascending map order makes "first strictly better wins" do the rest).
    let mut best: Option<(usize, usize, f64)> = None;
    for (&class, &(count, sim_sum)) in &votes {
        let better = match best {
            None => true,
            Some((_, bc, bs)) => count > bc || (count == bc && sim_sum > bs),
        };
        if better {
            best = Some((class, count, sim_sum));
        }
    }
    best.unwrap().0
}

/// Nearest-neighbour classification of `test_feats` against `train_feats`
/// under cosine similarity on the stored features: the `k` most similar
/// train rows vote, ties broken by summed similarity and then by smallest
/// class index. Scoring is independent per test row and fans out across
/// available cores with an order-preserving merge, so results do not depend
/// on the thread count.
pub fn knn_eval<S: Real>(
    train_feats: &Tensor<S>,
    train_labels: &[usize],
    test_feats: &Tensor<S>,
    test_labels: &[usize],
    k: usize,
) -> Result<EvalReport> {
    check_eval_inputs(train_feats, train_labels, test_feats, test_labels)?;
    let n_train = train_feats.rows();
    let n_test = test_feats.rows();
    if k == 0 {
        return Err(Error::InvalidArg("k must be at least 1".into()));
    }
    if k > n_train {
        return Err(Error::InvalidArg(format!(
            "k = {k} exceeds the train size {n_train}"
        )));
    }

    let train_norms: Vec<f64> = (0..n_train).map(|j| row_norm_f64(train_feats.row(j))).collect();
    let fallback = majority_class(train_labels);

    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(n_test);
    let predictions: Vec<usize> = if threads <= 1 {
        (0..n_test)
            .map(|i| {
                knn_predict(test_feats.row(i), train_feats, train_labels, &train_norms, k, fallback)
            })
            .collect()
    } else {
        let chunk = n_test.div_ceil(threads);
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..n_test)
                .step_by(chunk)
                .map(|start| {
                    let end = (start + chunk).min(n_test);
                    let norms = &train_norms;
                    scope.spawn(move || {
                        (start..end)
                            .map(|i| {
                                knn_predict(
                                    test_feats.row(i),
                                    train_feats,
                                    train_labels,
                                    norms,
                                    k,
                                    fallback,
                                )
                            })
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            handles.into_iter().flat_map(|h| h.join().unwrap()).collect()
        })
    };

    let correct = predictions.iter().zip(test_labels).filter(|(p, y)| p == y).count();
    Ok(EvalReport {
        feature: String::new(),
        method: EvalMethod::Knn,
        accuracy: correct as f64 / n_test as f64,
        correct,
        train_size: n_train,
        test_size: n_test,
        k: Some(k),
        epochs: None,
        learning_rate: None,
    })
}

/// Default neighbour count: one tenth of the train set, capped at 200 and
/// floored at 1.
pub fn default_k(train_size: usize) -> usize {
    (train_size / 10).clamp(1, 200)
}

/// Hyper-parameters for [`linear_probe`].
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProbeConfig<S: Real = f64> {
    pub epochs: usize,
    pub lr: S,
    pub weight_decay: S,
    pub seed: u64,
    /// `None` trains full-batch (the corpus fits in memory); `Some(b)`
    /// reshuffles each epoch and steps per mini-batch.
    pub batch_size: Option<usize>,
}

impl<S: Real> Default for ProbeConfig<S> {
    fn default() -> Self {
        ProbeConfig {
            epochs: 200,
            lr: S::of(1e-3),
            weight_decay: S::of(1e-6),
            seed: 0,
            batch_size: None,
        }
    }
}

/// Softmax cross-entropy gradient of a single linear layer over the given
/// rows. Parameters are flat `[w (q*c row-major) | b (c)]`; returns the
/// mean-reduced gradient in the same layout.
fn probe_gradient<S: Real>(
    feats: &Tensor<S>,
    labels: &[usize],
    rows: &[usize],
    params: &[S],
    q: usize,
    c: usize,
) -> Vec<S> {
    let (w, b) = params.split_at(q * c);
    let mut grad = vec![S::zero(); params.len()];
    let (gw, gb) = grad.split_at_mut(q * c);
    let inv_batch = S::one() / S::of(rows.len() as f64);
    let mut logits = vec![S::zero(); c];
    for &r in rows {
        let x = feats.row(r);
        for (j, l) in logits.iter_mut().enumerate() {
            let mut acc = b[j];
            for (i, xi) in x.iter().enumerate() {
                acc += *xi * w[i * c + j];
            }
            *l = acc;
        }
        // Stable softmax.
        let max = logits.iter().copied().fold(S::neg_infinity(), S::max);
        let mut sum = S::zero();
        let mut p = vec![S::zero(); c];
        for j in 0..c {
            p[j] = (logits[j] - max).exp();
            sum += p[j];
        }
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= sum;
            let mut g = *pj;
            if j == labels[r] {
                g -= S::one();
            }
            let g = g * inv_batch;
            for (i, xi) in x.iter().enumerate() {
                gw[i * c + j] += *xi * g;
            }
            gb[j] += g;
        }
    }
    grad
}

fn probe_predict<S: Real>(feats: &Tensor<S>, params: &[S], q: usize, c: usize) -> Vec<usize> {
    let (w, b) = params.split_at(q * c);
    (0..feats.rows())
        .map(|r| {
            let x = feats.row(r);
            let mut best = (0usize, S::neg_infinity());
            for j in 0..c {
                let mut acc = b[j];
                for (i, xi) in x.iter().enumerate() {
                    acc += *xi * w[i * c + j];
                }
                if acc > best.1 {
                    best = (j, acc);
                }
            }
            best.0
        })
        .collect()
}

/// Trains a zero-initialized linear classifier on frozen features with
/// softmax cross-entropy under Adam and reports test accuracy. Deterministic
/// given the config's seed (full-batch mode has no randomness at all; the
/// seed drives mini-batch shuffling).
pub fn linear_probe<S: Real>(
    train_feats: &Tensor<S>,
    train_labels: &[usize],
    test_feats: &Tensor<S>,
    test_labels: &[usize],
    config: &ProbeConfig<S>,
) -> Result<EvalReport> {
    check_eval_inputs(train_feats, train_labels, test_feats, test_labels)?;
    let distinct: std::collections::BTreeSet<usize> = train_labels.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidArg(
            "linear probe needs at least two classes in the training set".into(),
        ));
    }
    if config.epochs == 0 {
        return Err(Error::InvalidArg("probe epochs must be at least 1".into()));
    }
    if config.batch_size == Some(0) {
        return Err(Error::InvalidArg("probe batch size must be at least 1".into()));
    }

    let n_train = train_feats.rows();
    let q = train_feats.cols();
    let c = *distinct.iter().next_back().unwrap() + 1;
    let mut params = vec![S::zero(); q * c + c];
    let mut optimizer = OptimizerState::new(
        OptimConfig {
            kind: OptimKind::Adam,
            lr: config.lr,
            weight_decay: config.weight_decay,
            momentum: S::zero(),
        },
        params.len(),
    )?;

    let all_rows: Vec<usize> = (0..n_train).collect();
    for epoch in 0..config.epochs {
        match config.batch_size {
            None => {
                let grad = probe_gradient(train_feats, train_labels, &all_rows, &params, q, c);
                optimizer.step(&mut params, &grad)?;
            }
            Some(batch) => {
                let order = permutation(n_train, derive_seed(config.seed, &[epoch as u64]));
                for rows in order.chunks(batch) {
                    let grad = probe_gradient(train_feats, train_labels, rows, &params, q, c);
                    optimizer.step(&mut params, &grad)?;
                }
            }
        }
    }

    let predictions = probe_predict(test_feats, &params, q, c);
    let correct = predictions.iter().zip(test_labels).filter(|(p, y)| p == y).count();
    Ok(EvalReport {
        feature: String::new(),
        method: EvalMethod::Linear,
        accuracy: correct as f64 / test_feats.rows() as f64,
        correct,
        train_size: n_train,
        test_size: test_feats.rows(),
        k: None,
        epochs: Some(config.epochs),
        learning_rate: Some(config.lr.as_f64()),
    })
}

/// Backbone features and embeddings for `x`, computed in evaluation mode in
/// row chunks of at most `chunk`. Evaluation-mode forwards are per-example,
/// so the outputs are bit-identical under any chunking.
pub fn extract_features<S: Real>(
    encoder: &Encoder<S>,
    head: &Head<S>,
    x: &Tensor<S>,
    chunk: usize,
) -> Result<(Tensor<S>, Tensor<S>)> {
    if chunk == 0 {
        return Err(Error::InvalidArg("extraction chunk must be at least 1".into()));
    }
    let n = x.rows();
    let mut h_parts = Vec::new();
    let mut z_parts = Vec::new();
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let xc = x.select_rows(&idx)?;
        let h = encoder_features(encoder, &xc)?;
        let z = head_forward(head, &h, Mode::Eval)?.z_value().clone();
        h_parts.push(h);
        z_parts.push(z);
    }
    let h = Tensor::vstack(&h_parts.iter().collect::<Vec<_>>())?;
    let z = Tensor::vstack(&z_parts.iter().collect::<Vec<_>>())?;
    Ok((h, z))
}

/// Settings shared by every component in a [`component_eval`] run.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalConfig<S: Real = f64> {
    /// Neighbour count; `None` applies [`default_k`] to the train size.
    pub k: Option<usize>,
    pub probe: ProbeConfig<S>,
    /// Row-chunk size for feature extraction.
    pub chunk: usize,
}

impl<S: Real> Default for EvalConfig<S> {
    fn default() -> Self {
        EvalConfig { k: None, probe: ProbeConfig::default(), chunk: 256 }
    }
}

/// The component-wise evaluation of one checkpoint.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ComponentEval {
    /// KNN and linear reports per component, ordered h, z, h_r, h_n.
    pub reports: Vec<EvalReport>,
    /// Set when the range/null-space components were skipped (head has no
    /// linear map, or the map is rank-deficient) or approximated (nonlinear
    /// head analyzed through its final layer).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub notice: Option<String>,
}

/// Runs both evaluators on every available feature component of one
/// encoder/head pair: backbone features `h`, embeddings `z`, and — when the
/// head ends in a full-row-rank linear map — the range/null-space split of
/// that map's inputs. All components share the same train/test rows, the
/// same `k`, and the same probe configuration. Parameters and running
/// statistics are never modified.
pub fn component_eval<S: Real>(
    encoder: &Encoder<S>,
    head: &Head<S>,
    train_x: &Tensor<S>,
    train_labels: &[usize],
    test_x: &Tensor<S>,
    test_labels: &[usize],
    config: &EvalConfig<S>,
) -> Result<ComponentEval> {
    let (h_train, z_train) = extract_features(encoder, head, train_x, config.chunk)?;
    let (h_test, z_test) = extract_features(encoder, head, test_x, config.chunk)?;
    let k = config.k.unwrap_or_else(|| default_k(train_x.rows()));

    let mut reports = Vec::new();
    let mut run_pair = |tag: &str, train: &Tensor<S>, test: &Tensor<S>| -> Result<()> {
        let mut knn = knn_eval(train, train_labels, test, test_labels, k)?;
        knn.feature = tag.to_string();
        reports.push(knn);
        let mut linear = linear_probe(train, train_labels, test, test_labels, &config.probe)?;
        linear.feature = tag.to_string();
        reports.push(linear);
        Ok(())
    };
    run_pair("h", &h_train, &h_test)?;
    run_pair("z", &z_train, &z_test)?;

    let notice = match head.analysis_matrix() {
        None => Some("head has no linear map; h_r/h_n omitted".to_string()),
        Some((map, is_final_layer)) => {
            let inputs_train = head.final_layer_inputs(&h_train)?;
            let inputs_test = head.final_layer_inputs(&h_test)?;
            match null_space_decompose(&map, &inputs_train) {
                Ok((hr_train, hn_train)) => {
                    let (hr_test, hn_test) = null_space_decompose(&map, &inputs_test)?;
                    run_pair("h_r", &hr_train, &hr_test)?;
                    run_pair("h_n", &hn_train, &hn_test)?;
                    if is_final_layer {
                        Some(
                            "h_r/h_n decompose the hidden features under the head's final \
                             linear layer; an approximation, since the head is non-linear"
                                .to_string(),
                        )
                    } else {
                        None
                    }
                }
                Err(Error::RankDeficient { sigma_min, tol }) => Some(format!(
                    "head's linear map is row-rank deficient (sigma_min = {sigma_min:e}, \
                     tolerance = {tol:e}); h_r/h_n omitted"
                )),
                Err(other) => return Err(other),
            }
        }
    };

    Ok(ComponentEval { reports, notice })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{init_encoder, init_head, HeadKind};
    use crate::optim::param_checksum;
    use crate::rng::rng_from;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = rng_from(seed);
        Tensor::new(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect())
            .unwrap()
    }

    /// Two clusters centered at ±(offset, 0, ..): label 1 for +, 0 for −.
    fn clusters(
        per_class: usize,
        dim: usize,
        offset: f64,
        noise: f64,
        seed: u64,
    ) -> (Tensor<f64>, Vec<usize>) {
        let mut rng = rng_from(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for class in 0..2usize {
            let sign = if class == 1 { 1.0 } else { -1.0 };
            for _ in 0..per_class {
                let mut row: Vec<f64> =
                    (0..dim).map(|_| noise * rng.sample::<f64, _>(StandardNormal)).collect();
                row[0] += sign * offset;
                rows.push(row);
                labels.push(class);
            }
        }
        (Tensor::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn knn_self_match_single_example() {
        let train = Tensor::<f64>::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let report = knn_eval(&train, &[0], &train, &[0], 1).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.correct, 1);
        assert_eq!(report.k, Some(1));
        assert_eq!(report.method, EvalMethod::Knn);
    }

    #[test]
    fn knn_separated_clusters_are_perfectly_classified() {
        let (train, train_y) = clusters(50, 2, 10.0, 0.1, 7);
        let (test, test_y) = clusters(50, 2, 10.0, 0.1, 8);
        // Margin oracle: the noise never comes close to flipping the first
        // coordinate's sign, so the clusters are separated by construction.
        for (i, &y) in train_y.iter().chain(test_y.iter()).enumerate() {
            let x0 = if i < 100 { train.get(i, 0) } else { test.get(i - 100, 0) };
            assert_eq!(x0 > 0.0, y == 1, "cluster construction violated its margin");
        }
        let report = knn_eval(&train, &train_y, &test, &test_y, 5).unwrap();
        assert_eq!(report.accuracy, 1.0, "correct = {}", report.correct);
    }

    #[test]
    fn knn_default_neighbour_count() {
        assert_eq!(default_k(50_000), 200);
        assert_eq!(default_k(2_000), 200);
        assert_eq!(default_k(199), 19);
        assert_eq!(default_k(5), 1);
        assert_eq!(default_k(0), 1);
    }

    #[test]
    fn knn_vote_tie_broken_by_similarity_sum() {
        // k = 4 takes all rows; two votes per class. Class 0's rows are more
        // aligned with the query in sum, so it must win.
        let train = Tensor::<f64>::from_rows(&[
            vec![1.0, 0.0],   // class 0, cos = 1
            vec![1.0, 0.2],   // class 0, cos ≈ 0.9806
            vec![1.0, -0.01], // class 1, cos ≈ 0.99995
            vec![1.0, 0.21],  // class 1, cos ≈ 0.97868
        ])
        .unwrap();
        let test = Tensor::<f64>::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let report = knn_eval(&train, &[0, 0, 1, 1], &test, &[0], 4).unwrap();
        assert_eq!(report.accuracy, 1.0);
        // Same geometry with the labels swapped flips the prediction.
        let report = knn_eval(&train, &[1, 1, 0, 0], &test, &[0], 4).unwrap();
        assert_eq!(report.accuracy, 0.0);
    }

    #[test]
    fn knn_full_tie_prefers_smallest_class() {
        // Query equidistant from one row of each class: vote 1-1, equal
        // similarity sums, class 0 wins.
        let train = Tensor::<f64>::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let test = Tensor::<f64>::from_rows(&[vec![1.0, 1.0]]).unwrap();
        let report = knn_eval(&train, &[1, 0], &test, &[0], 2).unwrap();
        assert_eq!(report.accuracy, 1.0);
        let report = knn_eval(&train, &[1, 0], &test, &[1], 2).unwrap();
        assert_eq!(report.accuracy, 0.0);
    }

    #[test]
    fn knn_zero_norm_train_rows_are_not_neighbours() {
        // Two zero rows of class 0 would win any vote if they counted.
        let train = Tensor::<f64>::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
        ])
        .unwrap();
        let test = Tensor::<f64>::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let report = knn_eval(&train, &[0, 0, 1], &test, &[1], 3).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn knn_zero_norm_test_row_falls_back_to_majority() {
        let train = Tensor::<f64>::from_rows(&[
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, -1.0],
        ])
        .unwrap();
        let test = Tensor::<f64>::from_rows(&[vec![0.0, 0.0]]).unwrap();
        // Majority class is 1 (two rows).
        let report = knn_eval(&train, &[0, 1, 1], &test, &[1], 1).unwrap();
        assert_eq!(report.accuracy, 1.0);
        // Balanced counts tie toward the smallest class.
        let train2 = Tensor::<f64>::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let report = knn_eval(&train2, &[0, 1], &test, &[0], 1).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn knn_input_validation() {
        let train = gaussian(4, 3, 1);
        let test = gaussian(2, 3, 2);
        let ty = vec![0, 1, 0, 1];
        let sy = vec![0, 1];
        assert!(knn_eval(&train, &ty, &test, &sy, 0).is_err());
        assert!(knn_eval(&train, &ty, &test, &sy, 5).is_err(), "k beyond train size");
        assert!(knn_eval(&train, &ty[..3], &test, &sy, 1).is_err(), "label count");
        let wide = gaussian(2, 4, 3);
        assert!(knn_eval(&train, &ty, &wide, &sy, 1).is_err(), "dim mismatch");
    }

    proptest::proptest! {
        /// With train = test and k = 1, every example finds itself (or an
        /// equally-similar twin with the same label) at similarity 1.
        #[test]
        fn knn_k1_on_train_set_is_perfect(
            rows in proptest::collection::vec(
                proptest::collection::vec(-5i8..=5, 3),
                2..12,
            )
        ) {
            let feats: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect();
            proptest::prop_assume!(feats.iter().all(|r| r.iter().any(|&v| v != 0.0)));
            // Cosine similarity 1.0 requires positive colinearity, which
            // preserves the sign pattern — labeling by sign pattern makes
            // any perfect-similarity twin share the label.
            let labels: Vec<usize> = feats
                .iter()
                .map(|r| {
                    r.iter().fold(0usize, |acc, &v| {
                        acc * 3 + if v > 0.0 { 2 } else if v < 0.0 { 1 } else { 0 }
                    })
                })
                .collect();
            let train = Tensor::from_rows(&feats).unwrap();
            let report = knn_eval(&train, &labels, &train, &labels, 1).unwrap();
            proptest::prop_assert_eq!(report.accuracy, 1.0);
        }
    }

    #[test]
    fn probe_separable_clusters_reach_full_accuracy() {
        let (train, train_y) = clusters(20, 2, 2.0, 0.3, 21);
        let (test, test_y) = clusters(20, 2, 2.0, 0.3, 22);
        // Closed-form separability witness: the first coordinate alone
        // classifies every point with margin ≥ 1.
        for i in 0..train.rows() {
            assert!(train.get(i, 0).abs() >= 1.0 && test.get(i, 0).abs() >= 1.0);
        }
        let report =
            linear_probe(&train, &train_y, &test, &test_y, &ProbeConfig::default()).unwrap();
        assert_eq!(report.accuracy, 1.0, "correct = {}", report.correct);
        assert_eq!(report.epochs, Some(200));
        assert_eq!(report.learning_rate, Some(1e-3));
    }

    #[test]
    fn probe_zero_features_predict_majority_class() {
        let train = Tensor::<f64>::zeros(10, 3);
        let train_y = vec![1, 1, 1, 1, 1, 1, 1, 0, 0, 0];
        let test = Tensor::<f64>::zeros(10, 3);
        let test_y = vec![1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
        let report =
            linear_probe(&train, &train_y, &test, &test_y, &ProbeConfig::default()).unwrap();
        // The probe can only learn the bias, which converges to the class
        // log-frequencies: every prediction is the train majority class 1.
        assert_eq!(report.accuracy, 0.6);
        assert_eq!(report.correct, 6);
    }

    #[test]
    fn probe_random_labels_score_at_chance() {
        let c = 4;
        let mut rng = rng_from(99);
        let train = gaussian(120, 6, 31);
        let train_y: Vec<usize> = (0..120).map(|_| rng.gen_range(0..c)).collect();
        let test = gaussian(400, 6, 32);
        let test_y: Vec<usize> = (0..400).map(|_| rng.gen_range(0..c)).collect();
        let report =
            linear_probe(&train, &train_y, &test, &test_y, &ProbeConfig::default()).unwrap();
        let p = 1.0 / c as f64;
        let sigma = (p * (1.0 - p) / 400.0).sqrt();
        assert!(
            (report.accuracy - p).abs() <= 3.0 * sigma,
            "accuracy {} vs chance {p} (3σ = {})",
            report.accuracy,
            3.0 * sigma
        );
    }

    #[test]
    fn probe_rejects_single_class_training_set() {
        let train = gaussian(6, 2, 5);
        let test = gaussian(2, 2, 6);
        let err = linear_probe(&train, &[2; 6], &test, &[2, 2], &ProbeConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn probe_is_deterministic_given_seed() {
        let (train, train_y) = clusters(15, 3, 1.5, 0.5, 41);
        let (test, test_y) = clusters(15, 3, 1.5, 0.5, 42);
        for batch_size in [None, Some(8)] {
            let config = ProbeConfig { batch_size, seed: 17, ..ProbeConfig::default() };
            let a = linear_probe(&train, &train_y, &test, &test_y, &config).unwrap();
            let b = linear_probe(&train, &train_y, &test, &test_y, &config).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn probe_minibatch_mode_still_separates() {
        let (train, train_y) = clusters(20, 2, 2.0, 0.3, 51);
        let (test, test_y) = clusters(20, 2, 2.0, 0.3, 52);
        let config = ProbeConfig { batch_size: Some(8), ..ProbeConfig::default() };
        let report = linear_probe(&train, &train_y, &test, &test_y, &config).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }

    #[test]
    fn extraction_is_invariant_to_chunking() {
        let encoder = init_encoder::<f64>(&[4, 16, 6], 3).unwrap();
        let head = init_head::<f64>(HeadKind::NonLinear, 6, 2, Some(8), 4).unwrap();
        let x = gaussian(23, 4, 61);
        let (h_full, z_full) = extract_features(&encoder, &head, &x, 23).unwrap();
        for chunk in [1usize, 7, 64] {
            let (h, z) = extract_features(&encoder, &head, &x, chunk).unwrap();
            assert_eq!(h.data(), h_full.data(), "h differs at chunk {chunk}");
            assert_eq!(z.data(), z_full.data(), "z differs at chunk {chunk}");
        }
    }

    fn labeled_clusters_through_encoder(
        seed: u64,
    ) -> (Tensor<f64>, Vec<usize>, Tensor<f64>, Vec<usize>) {
        let (train, train_y) = clusters(25, 4, 3.0, 0.4, seed);
        let (test, test_y) = clusters(25, 4, 3.0, 0.4, seed + 1);
        (train, train_y, test, test_y)
    }

    #[test]
    fn component_eval_never_mutates_models() {
        let encoder = init_encoder::<f64>(&[4, 16, 6], 13).unwrap();
        let head = init_head::<f64>(HeadKind::NonLinear, 6, 2, Some(8), 14).unwrap();
        let before_e = param_checksum(&encoder.parameters());
        let before_h = param_checksum(&head.parameters());
        let (mean, var) = head.running_stats().unwrap();
        let before_stats = param_checksum(
            &mean.data().iter().chain(var.data()).copied().collect::<Vec<_>>(),
        );

        let (train, train_y, test, test_y) = labeled_clusters_through_encoder(71);
        let config = EvalConfig { probe: ProbeConfig { epochs: 20, ..Default::default() }, ..Default::default() };
        component_eval(&encoder, &head, &train, &train_y, &test, &test_y, &config).unwrap();

        assert_eq!(param_checksum(&encoder.parameters()), before_e);
        assert_eq!(param_checksum(&head.parameters()), before_h);
        let (mean, var) = head.running_stats().unwrap();
        let after_stats = param_checksum(
            &mean.data().iter().chain(var.data()).copied().collect::<Vec<_>>(),
        );
        assert_eq!(after_stats, before_stats);
    }

    #[test]
    fn component_eval_identity_head_reports_h_equals_z() {
        let encoder = init_encoder::<f64>(&[4, 16, 5], 23).unwrap();
        let head = init_head::<f64>(HeadKind::None, 5, 5, None, 0).unwrap();
        let (train, train_y, test, test_y) = labeled_clusters_through_encoder(81);
        let config = EvalConfig { probe: ProbeConfig { epochs: 30, ..Default::default() }, ..Default::default() };
        let out =
            component_eval(&encoder, &head, &train, &train_y, &test, &test_y, &config).unwrap();
        assert_eq!(out.reports.len(), 4, "identity head has no h_r/h_n");
        assert!(out.notice.is_some());
        let tags: Vec<&str> = out.reports.iter().map(|r| r.feature.as_str()).collect();
        assert_eq!(tags, vec!["h", "h", "z", "z"]);
        assert_eq!(out.reports[0].accuracy, out.reports[2].accuracy);
        assert_eq!(out.reports[0].correct, out.reports[2].correct);
        assert_eq!(out.reports[1].accuracy, out.reports[3].accuracy);
    }

    #[test]
    fn component_eval_linear_head_covers_all_components() {
        let encoder = init_encoder::<f64>(&[4, 16, 6], 33).unwrap();
        let head = init_head::<f64>(HeadKind::Linear, 6, 2, None, 34).unwrap();
        let (train, train_y, test, test_y) = labeled_clusters_through_encoder(91);
        let config = EvalConfig {
            k: Some(5),
            probe: ProbeConfig { epochs: 30, ..Default::default() },
            chunk: 16,
        };
        let out =
            component_eval(&encoder, &head, &train, &train_y, &test, &test_y, &config).unwrap();
        assert_eq!(out.reports.len(), 8);
        assert!(out.notice.is_none());
        let tags: Vec<&str> = out.reports.iter().map(|r| r.feature.as_str()).collect();
        assert_eq!(tags, vec!["h", "h", "z", "z", "h_r", "h_r", "h_n", "h_n"]);
        for report in &out.reports {
            assert!((0.0..=1.0).contains(&report.accuracy));
            assert_eq!(report.accuracy, report.correct as f64 / report.test_size as f64);
            assert_eq!(report.train_size, 50);
            assert_eq!(report.test_size, 50);
            if report.method == EvalMethod::Knn {
                assert_eq!(report.k, Some(5));
            }
        }
    }

    #[test]
    fn component_eval_recombined_split_matches_h() {
        let encoder = init_encoder::<f64>(&[4, 16, 6], 43).unwrap();
        let head = init_head::<f64>(HeadKind::Linear, 6, 2, None, 44).unwrap();
        let (train, train_y, test, test_y) = labeled_clusters_through_encoder(101);
        let (h_train, _) = extract_features(&encoder, &head, &train, 256).unwrap();
        let (h_test, _) = extract_features(&encoder, &head, &test, 256).unwrap();
        let (map, _) = head.analysis_matrix().unwrap();
        let (hr_train, hn_train) = null_space_decompose(&map, &h_train).unwrap();
        let (hr_test, hn_test) = null_space_decompose(&map, &h_test).unwrap();
        let recombined_train = hr_train.add(&hn_train).unwrap();
        let recombined_test = hr_test.add(&hn_test).unwrap();

        let base = knn_eval(&h_train, &train_y, &h_test, &test_y, 5).unwrap();
        let recombined =
            knn_eval(&recombined_train, &train_y, &recombined_test, &test_y, 5).unwrap();
        assert_eq!(base.accuracy, recombined.accuracy);

        let probe = ProbeConfig { epochs: 30, ..Default::default() };
        let base = linear_probe(&h_train, &train_y, &h_test, &test_y, &probe).unwrap();
        let recombined =
            linear_probe(&recombined_train, &train_y, &recombined_test, &test_y, &probe).unwrap();
        assert_eq!(base.accuracy, recombined.accuracy);
    }

    #[test]
    fn component_eval_nonlinear_head_notes_the_approximation() {
        let encoder = init_encoder::<f64>(&[4, 16, 6], 53).unwrap();
        let head = init_head::<f64>(HeadKind::NonLinear, 6, 2, Some(8), 54).unwrap();
        let (train, train_y, test, test_y) = labeled_clusters_through_encoder(111);
        let config = EvalConfig { probe: ProbeConfig { epochs: 20, ..Default::default() }, ..Default::default() };
        let out =
            component_eval(&encoder, &head, &train, &train_y, &test, &test_y, &config).unwrap();
        assert_eq!(out.reports.len(), 8);
        let notice = out.notice.unwrap();
        assert!(notice.contains("final"), "notice was: {notice}");
    }

    #[test]
    fn component_eval_collapsed_head_omits_split() {
        let head = Head::from_pretrained(Tensor::<f64>::zeros(6, 2), Tensor::zeros(1, 2)).unwrap();
        let encoder = init_encoder::<f64>(&[4, 16, 6], 63).unwrap();
        let (train, train_y, test, test_y) = labeled_clusters_through_encoder(121);
        let config = EvalConfig { probe: ProbeConfig { epochs: 10, ..Default::default() }, ..Default::default() };
        let out =
            component_eval(&encoder, &head, &train, &train_y, &test, &test_y, &config).unwrap();
        assert_eq!(out.reports.len(), 4);
        assert!(out.notice.unwrap().contains("rank"));
    }

    #[test]
    fn eval_report_round_trips_through_json() {
        let train = gaussian(10, 3, 71);
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let report = knn_eval(&train, &labels, &train, &labels, 3).unwrap();
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"knn\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
