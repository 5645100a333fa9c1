//! Reverse-mode automatic differentiation on an arena tape.
//!
//! A [`Tape`] records every operation as a node in a flat `Vec`. Node inputs
//! always have smaller ids than the node itself, so one reverse sweep over
//! the arena propagates adjoints from a scalar loss to every leaf. Gradients
//! accumulate: calling [`Tape::backward`] twice without
//! [`Tape::zero_grads`] adds a second full gradient on top of the first.
//!
//! Design points worth knowing:
//!
//! * each backward call propagates adjoints in a private scratch buffer and
//!   only adds the finished per-node totals into the stored grads, which is
//!   what makes repeated calls accumulate exactly;
//! * `dropout` in eval mode (or with rate 0) returns its input id unchanged,
//!   so an inference graph is bit-identical to one built without dropout;
//! * `grl` is the gradient reversal layer: identity forward, `-lambda` times
//!   the adjoint backward, which lets one loss push parameters *away* from a
//!   sub-objective while everything downstream is trained normally.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    /// Position in the arena (stable for the life of the tape).
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation recorded by a node, together with the op-specific context the
/// backward pass needs (input ids, scalar factors, sampled masks).
#[derive(Clone, Debug)]
enum Op<S> {
    Leaf { param: bool },
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    AddRow { x: NodeId, bias: NodeId },
    Scale { x: NodeId, factor: S },
    AddScalar { x: NodeId },
    Tanh { x: NodeId },
    Relu { x: NodeId },
    Exp { x: NodeId },
    Log { x: NodeId },
    Dropout { x: NodeId, mask: Tensor<S> },
    L2NormalizeRows { x: NodeId },
    SoftmaxRows { x: NodeId },
    LogSoftmaxRows { x: NodeId },
    Grl { x: NodeId, lambda: S },
    SumAll { x: NodeId },
    SliceCols { x: NodeId, start: usize },
}

struct Node<S> {
    op: Op<S>,
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
}

/// Arena tape: forward values and accumulated gradients for one graph.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<S>, value: Tensor<S>) -> NodeId {
        self.nodes.push(Node { op, value, grad: None });
        NodeId(self.nodes.len() - 1)
    }

    /// Record a constant leaf (gradients are tracked but unused by callers).
    pub fn input(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf { param: false }, value)
    }

    /// Record a trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> NodeId {
        self.push(Op::Leaf { param: true }, value)
    }

    /// Whether the node was recorded with [`Tape::param`].
    pub fn is_param(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Leaf { param: true })
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient, if any backward pass reached this node.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Accumulated gradient, densified to the node's shape.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor<S> {
        let node = &self.nodes[id.0];
        node.grad.clone().unwrap_or_else(|| Tensor::zeros(node.value.rows(), node.value.cols()))
    }

    /// Clear all accumulated gradients.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    // ── primitive operations ────────────────────────────────────────────

    /// `a (m x k) * b (k x n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul { a, b }, value))
    }

    /// Elementwise `a + b` (same shape).
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    /// Elementwise `a - b` (same shape).
    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push(Op::Sub { a, b }, value))
    }

    /// Elementwise (Hadamard) `a * b` (same shape).
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).mul(self.value(b))?;
        Ok(self.push(Op::Mul { a, b }, value))
    }

    /// Broadcast-add a `1 x n` bias row onto every row of `x` (`m x n`).
    pub fn add_row(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let bv = self.value(bias);
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                detail: format!("x {:?} + bias {:?}", xv.shape(), bv.shape()),
            });
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            for (o, &b) in value.row_mut(r).iter_mut().zip(bv.row(0)) {
                *o = *o + b;
            }
        }
        Ok(self.push(Op::AddRow { x, bias }, value))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: NodeId, factor: S) -> NodeId {
        let value = self.value(x).map(|v| v * factor);
        self.push(Op::Scale { x, factor }, value)
    }

    /// Add a constant to every element.
    pub fn add_scalar(&mut self, x: NodeId, constant: S) -> NodeId {
        let value = self.value(x).map(|v| v + constant);
        self.push(Op::AddScalar { x }, value)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.tanh());
        self.push(Op::Tanh { x }, value)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.push(Op::Relu { x }, value)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(|v| v.exp());
        self.push(Op::Exp { x }, value)
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.data().iter().any(|&v| v <= S::zero()) {
            return Err(Error::Domain { op: "log", detail: "non-positive element".into() });
        }
        let value = xv.map(|v| v.ln());
        Ok(self.push(Op::Log { x }, value))
    }

    /// Inverted dropout with drop rate `p in [0, 1)`.
    ///
    /// In training mode each element is zeroed with probability `p` and the
    /// survivors are scaled by `1 / (1 - p)` so the expectation is unchanged.
    /// With `training == false` or `p == 0` this is a no-op and the input id
    /// is returned as-is (no node is recorded, no randomness is consumed).
    pub fn dropout(&mut self, x: NodeId, p: f64, training: bool, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep_scale = S::of_f64(1.0 / (1.0 - p));
        let xv = self.value(x);
        let mut mask = Tensor::zeros(xv.rows(), xv.cols());
        for m in mask.data_mut() {
            if rng.random::<f64>() >= p {
                *m = keep_scale;
            }
        }
        let value = xv.mul(&mask)?;
        Ok(self.push(Op::Dropout { x, mask }, value))
    }

    /// Normalize each row to unit L2 norm; all-zero rows pass through as
    /// zeros (interaction vectors of cold users must stay valid inputs).
    pub fn l2_normalize_rows(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.all_finite() {
            return Err(Error::Domain { op: "l2_normalize_rows", detail: "non-finite element".into() });
        }
        let mut value = xv.clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            if norm > S::zero() {
                for v in row.iter_mut() {
                    *v = *v / norm;
                }
            }
        }
        Ok(self.push(Op::L2NormalizeRows { x }, value))
    }

    /// Row-wise softmax (max-shifted for stability).
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            softmax_in_place(row);
        }
        self.push(Op::SoftmaxRows { x }, value)
    }

    /// Row-wise log-softmax, computed as `x - max - ln(sum(exp(x - max)))`
    /// in one fused op so no intermediate probability underflows to zero.
    pub fn log_softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut value = self.value(x).clone();
        for r in 0..value.rows() {
            let row = value.row_mut(r);
            let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln();
            for v in row.iter_mut() {
                *v = *v - max - lse;
            }
        }
        self.push(Op::LogSoftmaxRows { x }, value)
    }

    /// Gradient reversal: identity forward, `-lambda * adjoint` backward.
    /// `lambda` must be non-negative.
    pub fn grl(&mut self, x: NodeId, lambda: S) -> Result<NodeId> {
        if lambda < S::zero() {
            return Err(Error::Contract(format!("grl scale {lambda} must be >= 0")));
        }
        let value = self.value(x).clone();
        Ok(self.push(Op::Grl { x, lambda }, value))
    }

    /// Sum of all elements, as a `1 x 1` tensor.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().cloned().sum();
        self.push(Op::SumAll { x }, Tensor::full(1, 1, total))
    }

    /// Columns `start..end` of `x`, as a new node.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if start >= end || end > xv.cols() {
            return Err(Error::Dimension {
                op: "slice_cols",
                detail: format!("{start}..{end} of {} columns", xv.cols()),
            });
        }
        let mut value = Tensor::zeros(xv.rows(), end - start);
        for r in 0..xv.rows() {
            value.row_mut(r).copy_from_slice(&xv.row(r)[start..end]);
        }
        Ok(self.push(Op::SliceCols { x, start }, value))
    }

    /// Reparameterized Gaussian sample `z = mu + exp(0.5 * log_var) * eps`
    /// with `eps ~ N(0, I)` drawn from `rng` and recorded as a constant, so
    /// gradients flow to `mu` and `log_var` but not through the noise.
    pub fn gaussian_sample(&mut self, mu: NodeId, log_var: NodeId, rng: &mut ChaCha8Rng) -> Result<NodeId> {
        let (rows, cols) = self.value(mu).shape();
        if self.value(log_var).shape() != (rows, cols) {
            return Err(Error::Dimension {
                op: "gaussian_sample",
                detail: format!("mu {:?} vs log_var {:?}", (rows, cols), self.value(log_var).shape()),
            });
        }
        let mut eps = Tensor::zeros(rows, cols);
        for e in eps.data_mut() {
            // Sample in f64 so f32 and f64 models consume identical draws.
            *e = S::of_f64(rng.sample::<f64, _>(StandardNormal));
        }
        let eps = self.input(eps);
        let half = self.scale(log_var, S::of_f64(0.5));
        let sigma = self.exp(half);
        let noise = self.mul(sigma, eps)?;
        self.add(mu, noise)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Propagate `d loss / d node` from a scalar (`1 x 1`) loss node into the
    /// stored gradients of every node that feeds it. Gradients accumulate
    /// across calls until [`Tape::zero_grads`].
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        // Per-call adjoints live in scratch; stored grads only receive the
        // finished totals, so every backward call adds exactly one gradient.
        let mut scratch: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        scratch[loss.0] = Some(Tensor::full(1, 1, S::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = scratch[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf { .. } => {}
                Op::MatMul { a, b } => {
                    let da = matmul_nt(&g, self.value(*b))?;
                    let db = matmul_tn(self.value(*a), &g)?;
                    add_into(&mut scratch[a.0], da);
                    add_into(&mut scratch[b.0], db);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    add_into(&mut scratch[a.0], g.clone());
                    add_into(&mut scratch[b.0], g.clone());
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    add_into(&mut scratch[a.0], g.clone());
                    add_into(&mut scratch[b.0], g.map(|v| -v));
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    let da = g.mul(self.value(b))?;
                    let db = g.mul(self.value(a))?;
                    add_into(&mut scratch[a.0], da);
                    add_into(&mut scratch[b.0], db);
                }
                Op::AddRow { x, bias } => {
                    let (x, bias) = (*x, *bias);
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &gv) in db.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o = *o + gv;
                        }
                    }
                    add_into(&mut scratch[x.0], g.clone());
                    add_into(&mut scratch[bias.0], db);
                }
                Op::Scale { x, factor } => {
                    let (x, factor) = (*x, *factor);
                    add_into(&mut scratch[x.0], g.map(|v| v * factor));
                }
                Op::AddScalar { x } => {
                    add_into(&mut scratch[x.0], g.clone());
                }
                Op::Tanh { x } => {
                    let x = *x;
                    let dx = g.mul(&self.nodes[i].value.map(|y| S::one() - y * y))?;
                    add_into(&mut scratch[x.0], dx);
                }
                Op::Relu { x } => {
                    let x = *x;
                    // Subgradient 0 at the kink.
                    let gate = self.value(x).map(|v| if v > S::zero() { S::one() } else { S::zero() });
                    add_into(&mut scratch[x.0], g.mul(&gate)?);
                }
                Op::Exp { x } => {
                    let x = *x;
                    let dx = g.mul(&self.nodes[i].value)?;
                    add_into(&mut scratch[x.0], dx);
                }
                Op::Log { x } => {
                    let x = *x;
                    let inv = self.value(x).map(|v| S::one() / v);
                    add_into(&mut scratch[x.0], g.mul(&inv)?);
                }
                Op::Dropout { x, mask } => {
                    let x = *x;
                    let dx = g.mul(mask)?;
                    add_into(&mut scratch[x.0], dx);
                }
                Op::L2NormalizeRows { x } => {
                    let x = *x;
                    let xv = self.value(x);
                    let out = &self.nodes[i].value;
                    let mut dx = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let norm = xv.row(r).iter().map(|&v| v * v).sum::<S>().sqrt();
                        if norm > S::zero() {
                            let u = out.row(r);
                            let gu: S = g.row(r).iter().zip(u).map(|(&gv, &uv)| gv * uv).sum();
                            for ((o, &gv), &uv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(u) {
                                *o = (gv - uv * gu) / norm;
                            }
                        }
                    }
                    add_into(&mut scratch[x.0], dx);
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    let out = &self.nodes[i].value;
                    let mut dx = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let y = out.row(r);
                        let dot: S = g.row(r).iter().zip(y).map(|(&gv, &yv)| gv * yv).sum();
                        for ((o, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(y) {
                            *o = yv * (gv - dot);
                        }
                    }
                    add_into(&mut scratch[x.0], dx);
                }
                Op::LogSoftmaxRows { x } => {
                    let x = *x;
                    let out = &self.nodes[i].value;
                    let mut dx = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let gsum: S = g.row(r).iter().cloned().sum();
                        for ((o, &gv), &yv) in dx.row_mut(r).iter_mut().zip(g.row(r)).zip(out.row(r)) {
                            *o = gv - yv.exp() * gsum;
                        }
                    }
                    add_into(&mut scratch[x.0], dx);
                }
                Op::Grl { x, lambda } => {
                    let (x, lambda) = (*x, *lambda);
                    add_into(&mut scratch[x.0], g.map(|v| -lambda * v));
                }
                Op::SumAll { x } => {
                    let x = *x;
                    let g0 = g.at(0, 0);
                    let (rows, cols) = self.value(x).shape();
                    add_into(&mut scratch[x.0], Tensor::full(rows, cols, g0));
                }
                Op::SliceCols { x, start } => {
                    let (x, start) = (*x, *start);
                    let (rows, cols) = self.value(x).shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        dx.row_mut(r)[start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    add_into(&mut scratch[x.0], dx);
                }
            }
            add_into(&mut self.nodes[i].grad, g);
        }
        Ok(())
    }
}

fn add_into<S: Scalar>(slot: &mut Option<Tensor<S>>, contribution: Tensor<S>) {
    match slot {
        None => *slot = Some(contribution),
        Some(acc) => {
            acc.axpy(S::one(), &contribution).expect("adjoint shapes match by construction");
        }
    }
}

/// Max-shifted softmax of one row, in place.
fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().cloned().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}
