//! Reverse-mode automatic differentiation on an eager expression graph.
//!
//! Nodes are appended in topological order and evaluated as they are built,
//! so intermediate values are always available (the contrastive loss uses
//! this to bind numerically safe log-sum-exp shift constants). Re-binding
//! named inputs via [`ExprGraph::evaluate`] recomputes the whole graph, and
//! [`ExprGraph::gradient`] runs the adjoint sweep.
//!
//! Broadcasting is deliberately minimal: `add` accepts a `1 x c` row on the
//! right (bias addition); everything else requires exact shapes.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Index of a node in its graph.
pub type NodeId = usize;

#[derive(Clone)]
enum Op<S: Real> {
    /// Leaf: a named re-bindable input or an anonymous constant. The
    /// graph's name registry distinguishes the two.
    Input,
    MatMul,
    Add,
    Mul,
    Relu,
    BatchNorm { eps: S, stats: BnStats<S> },
    L2Norm,
    Scale(S),
    Exp,
    Log,
    Sum,
    Concat,
    Cosine,
}

#[derive(Clone)]
enum BnStats<S: Real> {
    /// Normalize with statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics (1 x c mean and variance).
    Fixed { mean: Tensor<S>, var: Tensor<S> },
}

impl<S: Real> Op<S> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Mul => "mul",
            Op::Relu => "relu",
            Op::BatchNorm { .. } => "batchnorm",
            Op::L2Norm => "l2norm",
            Op::Scale(_) => "scale",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum => "sum",
            Op::Concat => "concat",
            Op::Cosine => "cosine",
        }
    }
}

struct Node<S: Real> {
    op: Op<S>,
    parents: Vec<NodeId>,
    value: Tensor<S>,
    adjoint: Option<Tensor<S>>,
}

/// Expression graph over tensors with reverse-mode gradients.
pub struct ExprGraph<S: Real = f64> {
    nodes: Vec<Node<S>>,
    names: HashMap<String, NodeId>,
}

impl<S: Real> Default for ExprGraph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> ExprGraph<S> {
    pub fn new() -> Self {
        ExprGraph { nodes: Vec::new(), names: HashMap::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    /// Adjoint of a node from the most recent gradient sweep.
    pub fn adjoint(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes[id].adjoint.as_ref()
    }

    /// Adds a named, re-bindable input.
    pub fn input(&mut self, name: &str, value: Tensor<S>) -> Result<NodeId> {
        if self.names.contains_key(name) {
            return Err(Error::InvalidArg(format!("duplicate input name '{name}'")));
        }
        let id = self.push(Op::Input, vec![], value)?;
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Adds an anonymous constant leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<NodeId> {
        self.push(Op::Input, vec![], value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::MatMul, vec![a, b])
    }

    /// Elementwise addition; the right operand may be a `1 x c` bias row.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::Add, vec![a, b])
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::Mul, vec![a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::Relu, vec![a])
    }

    /// Batch normalization over rows using current-batch statistics
    /// (training behavior). `gamma` and `beta` are `1 x c`.
    pub fn batchnorm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: S,
    ) -> Result<NodeId> {
        self.op(Op::BatchNorm { eps, stats: BnStats::Batch }, vec![x, gamma, beta])
    }

    /// Batch normalization with fixed running statistics (inference behavior).
    pub fn batchnorm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Tensor<S>,
        var: Tensor<S>,
        eps: S,
    ) -> Result<NodeId> {
        self.op(Op::BatchNorm { eps, stats: BnStats::Fixed { mean, var } }, vec![x, gamma, beta])
    }

    /// Rows rescaled to unit Euclidean norm.
    pub fn l2norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::L2Norm, vec![a])
    }

    pub fn scale(&mut self, a: NodeId, c: S) -> Result<NodeId> {
        self.op(Op::Scale(c), vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::Log, vec![a])
    }

    /// Sum of all entries as a `1 x 1` tensor.
    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.op(Op::Sum, vec![a])
    }

    /// Vertical stack (rows of `a`, then rows of `b`).
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::Concat, vec![a, b])
    }

    /// Pairwise cosine similarities between rows of `a` and rows of `b`.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.op(Op::Cosine, vec![a, b])
    }

    /// Column mean and unbiased column variance of a batchnorm node's input,
    /// for running-average updates.
    pub fn batchnorm_batch_stats(&self, id: NodeId) -> Result<(Tensor<S>, Tensor<S>)> {
        match &self.nodes[id].op {
            Op::BatchNorm { .. } => {
                let x = &self.nodes[self.nodes[id].parents[0]].value;
                let (mean, var_biased) = column_moments(x);
                let n = S::of(x.rows() as f64);
                let bessel = n / (n - S::one());
                Ok((mean, var_biased.scale(bessel)))
            }
            _ => Err(Error::InvalidArg(format!("node {id} is not a batchnorm node"))),
        }
    }

    fn op(&mut self, op: Op<S>, parents: Vec<NodeId>) -> Result<NodeId> {
        for &p in &parents {
            if p >= self.nodes.len() {
                return Err(Error::InvalidArg(format!("parent node {p} does not exist")));
            }
        }
        let value = self.compute(&op, &parents, self.nodes.len())?;
        self.push(op, parents, value)
    }

    fn push(&mut self, op: Op<S>, parents: Vec<NodeId>, value: Tensor<S>) -> Result<NodeId> {
        let id = self.nodes.len();
        if !value.is_all_finite() {
            return Err(Error::NonFinite { node: id, op: op.tag() });
        }
        self.nodes.push(Node { op, parents, value, adjoint: None });
        Ok(id)
    }

    /// Forward computation for one op; used at build time and on re-evaluation.
    fn compute(&self, op: &Op<S>, parents: &[NodeId], id: NodeId) -> Result<Tensor<S>> {
        let val = |i: usize| &self.nodes[parents[i]].value;
        let out = match op {
            Op::Input => unreachable!("inputs are never recomputed"),
            Op::MatMul => val(0).matmul(val(1))?,
            Op::Add => {
                let (a, b) = (val(0), val(1));
                if a.shape() == b.shape() {
                    a.add(b)?
                } else if b.rows() == 1 && b.cols() == a.cols() {
                    // row-vector bias broadcast
                    let mut out = a.clone();
                    for i in 0..out.rows() {
                        for (v, &bv) in out.row_mut(i).iter_mut().zip(b.row(0)) {
                            *v += bv;
                        }
                    }
                    out
                } else {
                    return Err(Error::ShapeMismatch(format!(
                        "add {}x{} + {}x{}",
                        a.rows(),
                        a.cols(),
                        b.rows(),
                        b.cols()
                    )));
                }
            }
            Op::Mul => val(0).hadamard(val(1))?,
            Op::Relu => val(0).map(|x| if x > S::zero() { x } else { S::zero() }),
            Op::BatchNorm { eps, stats } => {
                let (x, gamma, beta) = (val(0), val(1), val(2));
                if gamma.shape() != (1, x.cols()) || beta.shape() != (1, x.cols()) {
                    return Err(Error::ShapeMismatch("batchnorm gamma/beta must be 1 x cols".into()));
                }
                let (mean, var) = match stats {
                    BnStats::Batch => {
                        if x.rows() < 2 {
                            return Err(Error::BatchNormBatch(x.rows()));
                        }
                        column_moments(x)
                    }
                    BnStats::Fixed { mean, var } => {
                        if mean.shape() != (1, x.cols()) || var.shape() != (1, x.cols()) {
                            return Err(Error::ShapeMismatch(
                                "batchnorm running stats must be 1 x cols".into(),
                            ));
                        }
                        (mean.clone(), var.clone())
                    }
                };
                let mut out = x.clone();
                for i in 0..out.rows() {
                    let row = out.row_mut(i);
                    for j in 0..row.len() {
                        let inv = S::one() / (var.get(0, j) + *eps).sqrt();
                        row[j] = (row[j] - mean.get(0, j)) * inv * gamma.get(0, j) + beta.get(0, j);
                    }
                }
                out
            }
            Op::L2Norm => {
                let a = val(0);
                let mut out = a.clone();
                for i in 0..a.rows() {
                    let norm = a.row(i).iter().map(|&x| x * x).sum::<S>().sqrt();
                    if norm == S::zero() {
                        return Err(Error::ZeroNormRow { node: id, row: i });
                    }
                    let inv = S::one() / norm;
                    for v in out.row_mut(i) {
                        *v *= inv;
                    }
                }
                out
            }
            Op::Scale(c) => val(0).scale(*c),
            Op::Exp => val(0).map(|x| x.exp()),
            Op::Log => val(0).map(|x| x.ln()),
            Op::Sum => Tensor::new(1, 1, vec![val(0).sum()])?,
            Op::Concat => Tensor::vstack(&[val(0), val(1)])?,
            Op::Cosine => {
                let (a, b) = (val(0), val(1));
                if a.cols() != b.cols() {
                    return Err(Error::ShapeMismatch(format!(
                        "cosine {}x{} vs {}x{}",
                        a.rows(),
                        a.cols(),
                        b.rows(),
                        b.cols()
                    )));
                }
                let ahat = normalized_rows(a).map_err(|row| Error::ZeroNormRow { node: id, row })?;
                let bhat = normalized_rows(b).map_err(|row| Error::ZeroNormRow { node: id, row })?;
                ahat.matmul_nt(&bhat)?
            }
        };
        if !out.is_all_finite() {
            return Err(Error::NonFinite { node: id, op: op.tag() });
        }
        Ok(out)
    }

    /// Re-binds the named inputs and recomputes every op node in order.
    /// Bit-identical outputs for identical bindings.
    pub fn evaluate(&mut self, bindings: &[(&str, Tensor<S>)]) -> Result<()> {
        for (name, value) in bindings {
            let &id = self
                .names
                .get(*name)
                .ok_or_else(|| Error::UnknownBinding(name.to_string()))?;
            if self.nodes[id].value.shape() != value.shape() {
                return Err(Error::BindingShape(name.to_string()));
            }
            if !value.is_all_finite() {
                return Err(Error::NonFinite { node: id, op: "input" });
            }
            self.nodes[id].value = value.clone();
        }
        self.recompute_all()
    }

    fn recompute_all(&mut self) -> Result<()> {
        for id in 0..self.nodes.len() {
            if matches!(self.nodes[id].op, Op::Input) {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let parents = self.nodes[id].parents.clone();
            let value = self.compute(&op, &parents, id)?;
            self.nodes[id].value = value;
        }
        for node in &mut self.nodes {
            node.adjoint = None;
        }
        Ok(())
    }

    /// Node ids the loss depends on (including the loss itself).
    fn ancestors(&self, loss: NodeId) -> Vec<bool> {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![loss];
        seen[loss] = true;
        while let Some(id) = stack.pop() {
            for &p in &self.nodes[id].parents {
                if !seen[p] {
                    seen[p] = true;
                    stack.push(p);
                }
            }
        }
        seen
    }

    /// Reverse-mode sweep from a scalar loss node. Returns the gradients of
    /// the loss with respect to each requested node, in request order.
    pub fn gradient(&mut self, loss: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor<S>>> {
        let (lr, lc) = self.nodes[loss].value.shape();
        if (lr, lc) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: lr, cols: lc });
        }
        let reachable = self.ancestors(loss);
        for &id in wrt {
            if id >= self.nodes.len() || !reachable[id] {
                return Err(Error::Unreachable(id));
            }
        }

        for node in &mut self.nodes {
            node.adjoint = None;
        }
        self.nodes[loss].adjoint = Some(Tensor::filled(1, 1, S::one()));

        for id in (0..=loss).rev() {
            if !reachable[id] || self.nodes[id].adjoint.is_none() {
                continue;
            }
            self.backward_into_parents(id)?;
        }

        wrt.iter()
            .map(|&id| {
                self.nodes[id]
                    .adjoint
                    .clone()
                    .ok_or(Error::Unreachable(id))
            })
            .collect()
    }

    fn accumulate(&mut self, id: NodeId, delta: Tensor<S>) -> Result<()> {
        match &mut self.nodes[id].adjoint {
            Some(a) => a.add_scaled(S::one(), &delta),
            slot @ None => {
                *slot = Some(delta);
                Ok(())
            }
        }
    }

    fn backward_into_parents(&mut self, id: NodeId) -> Result<()> {
        let grad = self.nodes[id].adjoint.clone().expect("adjoint present");
        let parents = self.nodes[id].parents.clone();
        let op = self.nodes[id].op.clone();
        match op {
            Op::Input => {}
            Op::MatMul => {
                let a = self.nodes[parents[0]].value.clone();
                let b = self.nodes[parents[1]].value.clone();
                self.accumulate(parents[0], grad.matmul_nt(&b)?)?;
                self.accumulate(parents[1], a.matmul_tn(&grad)?)?;
            }
            Op::Add => {
                let bshape = self.nodes[parents[1]].value.shape();
                self.accumulate(parents[0], grad.clone())?;
                if bshape == grad.shape() {
                    self.accumulate(parents[1], grad)?;
                } else {
                    // bias row: gradient is the column sum
                    let mut sums = Tensor::zeros(1, grad.cols());
                    for i in 0..grad.rows() {
                        for (s, &g) in sums.row_mut(0).iter_mut().zip(grad.row(i)) {
                            *s += g;
                        }
                    }
                    self.accumulate(parents[1], sums)?;
                }
            }
            Op::Mul => {
                let a = self.nodes[parents[0]].value.clone();
                let b = self.nodes[parents[1]].value.clone();
                self.accumulate(parents[0], grad.hadamard(&b)?)?;
                self.accumulate(parents[1], grad.hadamard(&a)?)?;
            }
            Op::Relu => {
                let x = &self.nodes[parents[0]].value;
                // derivative at exactly zero is taken as zero
                let mask = x.map(|v| if v > S::zero() { S::one() } else { S::zero() });
                self.accumulate(parents[0], grad.hadamard(&mask)?)?;
            }
            Op::BatchNorm { eps, stats } => {
                let x = self.nodes[parents[0]].value.clone();
                let gamma = self.nodes[parents[1]].value.clone();
                let (rows, cols) = x.shape();
                let n = S::of(rows as f64);
                let (mean, var, batch_stats) = match &stats {
                    BnStats::Batch => {
                        let (m, v) = column_moments(&x);
                        (m, v, true)
                    }
                    BnStats::Fixed { mean, var } => (mean.clone(), var.clone(), false),
                };
                let inv_std: Vec<S> =
                    (0..cols).map(|j| S::one() / (var.get(0, j) + eps).sqrt()).collect();
                let mut xhat = x.clone();
                for i in 0..rows {
                    let row = xhat.row_mut(i);
                    for j in 0..cols {
                        row[j] = (row[j] - mean.get(0, j)) * inv_std[j];
                    }
                }

                let mut dgamma = Tensor::zeros(1, cols);
                let mut dbeta = Tensor::zeros(1, cols);
                for i in 0..rows {
                    for j in 0..cols {
                        let g = grad.get(i, j);
                        dgamma.set(0, j, dgamma.get(0, j) + g * xhat.get(i, j));
                        dbeta.set(0, j, dbeta.get(0, j) + g);
                    }
                }

                let mut dx = Tensor::zeros(rows, cols);
                if batch_stats {
                    // dL/dx = gamma/std * (g - mean(g) - xhat * mean(g*xhat))
                    for j in 0..cols {
                        let g_mean = dbeta.get(0, j) / n;
                        let gx_mean = dgamma.get(0, j) / n;
                        let scale = gamma.get(0, j) * inv_std[j];
                        for i in 0..rows {
                            let v = scale * (grad.get(i, j) - g_mean - xhat.get(i, j) * gx_mean);
                            dx.set(i, j, v);
                        }
                    }
                } else {
                    // fixed statistics: plain affine map per column
                    for j in 0..cols {
                        let scale = gamma.get(0, j) * inv_std[j];
                        for i in 0..rows {
                            dx.set(i, j, grad.get(i, j) * scale);
                        }
                    }
                }
                self.accumulate(parents[0], dx)?;
                self.accumulate(parents[1], dgamma)?;
                self.accumulate(parents[2], dbeta)?;
            }
            Op::L2Norm => {
                let x = &self.nodes[parents[0]].value;
                let y = &self.nodes[id].value;
                let mut dx = Tensor::zeros(x.rows(), x.cols());
                for i in 0..x.rows() {
                    let norm = x.row(i).iter().map(|&v| v * v).sum::<S>().sqrt();
                    let dot: S = grad.row(i).iter().zip(y.row(i)).map(|(&g, &u)| g * u).sum();
                    let inv = S::one() / norm;
                    for j in 0..x.cols() {
                        dx.set(i, j, (grad.get(i, j) - dot * y.get(i, j)) * inv);
                    }
                }
                self.accumulate(parents[0], dx)?;
            }
            Op::Scale(c) => {
                self.accumulate(parents[0], grad.scale(c))?;
            }
            Op::Exp => {
                let y = self.nodes[id].value.clone();
                self.accumulate(parents[0], grad.hadamard(&y)?)?;
            }
            Op::Log => {
                let x = self.nodes[parents[0]].value.clone();
                let inv = x.map(|v| S::one() / v);
                self.accumulate(parents[0], grad.hadamard(&inv)?)?;
            }
            Op::Sum => {
                let x = &self.nodes[parents[0]].value;
                let g = grad.get(0, 0);
                self.accumulate(parents[0], Tensor::filled(x.rows(), x.cols(), g))?;
            }
            Op::Concat => {
                let top_rows = self.nodes[parents[0]].value.rows();
                let top = grad.select_rows(&(0..top_rows).collect::<Vec<_>>())?;
                let bottom = grad.select_rows(&(top_rows..grad.rows()).collect::<Vec<_>>())?;
                self.accumulate(parents[0], top)?;
                self.accumulate(parents[1], bottom)?;
            }
            Op::Cosine => {
                let a = self.nodes[parents[0]].value.clone();
                let b = self.nodes[parents[1]].value.clone();
                let ahat = normalized_rows(&a).expect("checked in forward");
                let bhat = normalized_rows(&b).expect("checked in forward");
                // d/d ahat = grad @ bhat, then back through the normalization
                let da_hat = grad.matmul(&bhat)?;
                let db_hat = grad.matmul_tn(&ahat)?;
                self.accumulate(parents[0], normalization_backward(&a, &ahat, &da_hat))?;
                self.accumulate(parents[1], normalization_backward(&b, &bhat, &db_hat))?;
            }
        }
        Ok(())
    }

    /// Central-difference check of `gradient` at the current binding point.
    ///
    /// Perturbs each coordinate of each `wrt` input node by `±step` and
    /// compares the analytic gradient against `(f(x+h) - f(x-h)) / 2h`,
    /// returning the maximum relative error
    /// `|a - n| / max(|a|, |n|, 1e-12)` over all coordinates.
    pub fn finite_difference_check(
        &mut self,
        loss: NodeId,
        wrt: &[NodeId],
        step: S,
    ) -> Result<S> {
        if step <= S::zero() {
            return Err(Error::InvalidArg("finite-difference step must be positive".into()));
        }
        for &id in wrt {
            if !matches!(self.nodes[id].op, Op::Input) {
                return Err(Error::InvalidArg(format!(
                    "finite differences need input nodes, node {id} is not one"
                )));
            }
        }
        let analytic = self.gradient(loss, wrt)?;
        let floor = S::of(1e-12);
        let mut max_rel = S::zero();
        for (&id, grads) in wrt.iter().zip(&analytic) {
            for idx in 0..self.nodes[id].value.len() {
                let orig = self.nodes[id].value.data()[idx];
                self.nodes[id].value.data_mut()[idx] = orig + step;
                self.recompute_all()?;
                let up = self.nodes[loss].value.get(0, 0);
                self.nodes[id].value.data_mut()[idx] = orig - step;
                self.recompute_all()?;
                let down = self.nodes[loss].value.get(0, 0);
                self.nodes[id].value.data_mut()[idx] = orig;
                let numeric = (up - down) / (S::of(2.0) * step);
                let a = grads.data()[idx];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                max_rel = max_rel.max(rel);
            }
        }
        self.recompute_all()?;
        max_rel
            .is_finite()
            .then_some(max_rel)
            .ok_or(Error::NonFinite { node: loss, op: "finite_difference" })
    }
}

/// Column mean and biased variance (1 x c each).
fn column_moments<S: Real>(x: &Tensor<S>) -> (Tensor<S>, Tensor<S>) {
    let cols = x.cols();
    let n = S::of(x.rows() as f64);
    let mut mean = Tensor::zeros(1, cols);
    for i in 0..x.rows() {
        for (m, &v) in mean.row_mut(0).iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    for m in mean.row_mut(0) {
        *m /= n;
    }
    let mut var = Tensor::zeros(1, cols);
    for i in 0..x.rows() {
        for j in 0..cols {
            let d = x.get(i, j) - mean.get(0, j);
            var.set(0, j, var.get(0, j) + d * d);
        }
    }
    for v in var.row_mut(0) {
        *v /= n;
    }
    (mean, var)
}

/// Row-normalized copy, or the index of the first zero-norm row.
fn normalized_rows<S: Real>(a: &Tensor<S>) -> std::result::Result<Tensor<S>, usize> {
    let mut out = a.clone();
    for i in 0..a.rows() {
        let norm = a.row(i).iter().map(|&x| x * x).sum::<S>().sqrt();
        if norm == S::zero() {
            return Err(i);
        }
        let inv = S::one() / norm;
        for v in out.row_mut(i) {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Pulls a gradient on normalized rows back to the raw rows:
/// `dx_i = (du_i - (du_i . u_i) u_i) / ||x_i||`.
fn normalization_backward<S: Real>(
    x: &Tensor<S>,
    unit: &Tensor<S>,
    du: &Tensor<S>,
) -> Tensor<S> {
    let mut dx = Tensor::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let norm = x.row(i).iter().map(|&v| v * v).sum::<S>().sqrt();
        let dot: S = du.row(i).iter().zip(unit.row(i)).map(|(&g, &u)| g * u).sum();
        let inv = S::one() / norm;
        for j in 0..x.cols() {
            dx.set(i, j, (du.get(i, j) - dot * unit.get(i, j)) * inv);
        }
    }
    dx
}
