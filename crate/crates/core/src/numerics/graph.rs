use crate::error::{Error, Result};
use crate::numerics::matrix::{gram, Matrix};
use crate::numerics::{RunningStats, BN_EPSILON};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

/// Batch statistics produced by a train-mode batch norm, for running-stat
/// updates by the caller. Variance is the biased (divide by N) estimate.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        factor: f64,
    },
    /// Broadcast-add a 1xM row to every row of an NxM matrix.
    AddRow {
        a: NodeId,
        row: NodeId,
    },
    LeakyRelu {
        a: NodeId,
        slope: f64,
    },
    /// Inference-mode batch norm: pure affine map with frozen statistics.
    BnInfer {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Train-mode batch norm over the rows of x; normalized values and
    /// inverse stddev are cached for the backward pass.
    BnTrain {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        x_hat: Matrix,
        inv_std: Vec<f64>,
    },
    /// Per-segment column maxima. Segments partition the rows of `a` in
    /// order; `argmax` holds the winning global row index per (segment,
    /// column). A single segment spanning all rows is the plain
    /// column-wise max.
    SegMax {
        a: NodeId,
        segments: Vec<usize>,
        argmax: Vec<usize>,
    },
    /// [F | broadcast g]: concatenate row b of the BxM matrix `g` onto
    /// every row of segment b of the NxM matrix `f`.
    ConcatBroadcast {
        f: NodeId,
        g: NodeId,
        segments: Vec<usize>,
    },
    ConcatCols {
        a: NodeId,
        b: NodeId,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    Gram {
        f: NodeId,
        per_point: bool,
    },
    /// Sum of squared entries, as a 1x1 scalar.
    SqFrobenius {
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    /// Elementwise product with a constant matrix (dropout masks).
    MulMask {
        a: NodeId,
        mask: Matrix,
    },
    /// Mean cross-entropy of row-wise softmax against integer targets.
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        softmax: Matrix,
    },
}

fn check_segments(segments: &[usize], rows: usize) -> Result<()> {
    if segments.is_empty() || segments.iter().any(|&s| s == 0) {
        return Err(Error::Empty {
            context: "segment sizes",
        });
    }
    let total: usize = segments.iter().sum();
    if total != rows {
        return Err(Error::InvalidArgument(format!(
            "segment sizes sum to {total} but the matrix has {rows} rows"
        )));
    }
    Ok(())
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Recorded forward computation supporting reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the list is already a
/// topological order: the backward pass is a single reverse sweep that
/// visits each node exactly once. Leaves marked trainable receive
/// gradients; constants are skipped.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients for every node of a tape, indexed by [`NodeId`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient of the backward root with respect to `id`; zero for
    /// leaves the output does not depend on.
    pub fn get(&self, id: NodeId) -> Matrix {
        match &self.grads[id.0] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[id.0];
                Matrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.scalar()
    }

    /// Leaf the backward pass will produce a gradient for.
    pub fn trainable(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_derived(&mut self, value: Matrix, op: Op, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.push(value, op, requires_grad)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push_derived(value, Op::MatMul { a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push_derived(value, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.push_derived(value, Op::Sub { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).scale(factor);
        self.push_derived(value, Op::Scale { a, factor }, &[a])
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        let (x, r) = (self.value(a), self.value(row));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::ShapeMismatch {
                context: "add_row",
                left: x.shape(),
                right: r.shape(),
            });
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (v, b) in value.row_mut(i).iter_mut().zip(r.row(0)) {
                *v += b;
            }
        }
        Ok(self.push_derived(value, Op::AddRow { a, row }, &[a, row]))
    }

    /// Elementwise x if x >= 0 else slope * x. The derivative at exactly 0
    /// is defined as 1 (positive branch) for reproducibility.
    pub fn leaky_relu(&mut self, a: NodeId, slope: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&slope) || slope <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "leaky_relu slope must lie in (0, 1), got {slope}"
            )));
        }
        let value = self.value(a).map(|v| if v >= 0.0 { v } else { slope * v });
        Ok(self.push_derived(value, Op::LeakyRelu { a, slope }, &[a]))
    }

    /// Inference-mode batch norm with frozen running statistics.
    /// gamma and beta are 1xM nodes (trainable during classifier training,
    /// constants during transfer).
    pub fn batch_norm_infer(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &RunningStats,
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let m = xv.cols();
        if !stats.ready {
            return Err(Error::StatsNotReady);
        }
        if stats.mean.len() != m {
            return Err(Error::ShapeMismatch {
                context: "batch_norm_infer",
                left: xv.shape(),
                right: (1, stats.mean.len()),
            });
        }
        self.check_bn_affine(x, gamma, beta)?;
        let inv_std: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let xv = self.value(x);
        let mut value = Matrix::zeros(xv.rows(), m);
        for i in 0..xv.rows() {
            let src = xv.row(i);
            let dst = value.row_mut(i);
            for j in 0..m {
                dst[j] = g[j] * (src[j] - stats.mean[j]) * inv_std[j] + b[j];
            }
        }
        Ok(self.push_derived(
            value,
            Op::BnInfer {
                x,
                gamma,
                beta,
                mean: stats.mean.clone(),
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Train-mode batch norm over the rows of x (N >= 2). Returns the batch
    /// statistics so the caller can update running averages; the op itself
    /// never mutates persistent state.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    ) -> Result<(NodeId, BatchStats)> {
        let xv = self.value(x);
        let (n, m) = xv.shape();
        if n < 2 {
            return Err(Error::BatchTooSmall { rows: n });
        }
        self.check_bn_affine(x, gamma, beta)?;
        let mean = xv.col_means();
        let mut var = vec![0.0; m];
        for i in 0..n {
            for (j, &v) in xv.row(i).iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
        for v in &mut var {
            *v /= n as f64;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPSILON).sqrt()).collect();
        let mut x_hat = Matrix::zeros(n, m);
        for i in 0..n {
            let src = xv.row(i);
            let dst = x_hat.row_mut(i);
            for j in 0..m {
                dst[j] = (src[j] - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut value = Matrix::zeros(n, m);
        for i in 0..n {
            let src = x_hat.row(i);
            let dst = value.row_mut(i);
            for j in 0..m {
                dst[j] = g[j] * src[j] + b[j];
            }
        }
        let stats = BatchStats { mean, var };
        let id = self.push_derived(
            value,
            Op::BnTrain {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((id, stats))
    }

    fn check_bn_affine(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<()> {
        let m = self.value(x).cols();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let v = self.value(id);
            if v.rows() != 1 || v.cols() != m {
                return Err(Error::InvalidArgument(format!(
                    "batch_norm {name} must be 1x{m}, got {}x{}",
                    v.rows(),
                    v.cols()
                )));
            }
        }
        Ok(())
    }

    /// Column-wise maximum (1xM). The gradient routes to the argmax row of
    /// each column; ties go to the lowest row index.
    pub fn rowwise_max(&mut self, a: NodeId) -> Result<NodeId> {
        let n = self.value(a).rows();
        self.segmented_max(a, &[n])
    }

    /// Per-segment column maxima (BxM for B segments). Segment sizes must
    /// be positive and sum to the row count of `a`.
    pub fn segmented_max(&mut self, a: NodeId, segments: &[usize]) -> Result<NodeId> {
        let av = self.value(a);
        check_segments(segments, av.rows())?;
        let m = av.cols();
        let mut value = Matrix::zeros(segments.len(), m);
        let mut argmax = vec![0usize; segments.len() * m];
        let mut start = 0;
        for (b, &len) in segments.iter().enumerate() {
            let out = value.row_mut(b);
            out.copy_from_slice(av.row(start));
            for slot in &mut argmax[b * m..(b + 1) * m] {
                *slot = start;
            }
            for i in start + 1..start + len {
                for (j, &v) in av.row(i).iter().enumerate() {
                    if v > out[j] {
                        out[j] = v;
                        argmax[b * m + j] = i;
                    }
                }
            }
            start += len;
        }
        Ok(self.push_derived(
            value,
            Op::SegMax {
                a,
                segments: segments.to_vec(),
                argmax,
            },
            &[a],
        ))
    }

    /// [F | g] per row, where g is a 1xM row broadcast over the N rows of F.
    pub fn concat_broadcast(&mut self, f: NodeId, g: NodeId) -> Result<NodeId> {
        let n = self.value(f).rows();
        self.concat_segment_broadcast(f, g, &[n])
    }

    /// Per-segment broadcast concatenation: every row of segment b becomes
    /// [F_row | g_b], where g is BxM for B segments.
    pub fn concat_segment_broadcast(
        &mut self,
        f: NodeId,
        g: NodeId,
        segments: &[usize],
    ) -> Result<NodeId> {
        let (fv, gv) = (self.value(f), self.value(g));
        check_segments(segments, fv.rows())?;
        if gv.rows() != segments.len() || gv.cols() != fv.cols() {
            return Err(Error::ShapeMismatch {
                context: "concat_broadcast",
                left: fv.shape(),
                right: gv.shape(),
            });
        }
        let m = fv.cols();
        let mut data = Vec::with_capacity(fv.rows() * 2 * m);
        let mut start = 0;
        for (b, &len) in segments.iter().enumerate() {
            for i in start..start + len {
                data.extend_from_slice(fv.row(i));
                data.extend_from_slice(gv.row(b));
            }
            start += len;
        }
        let value = Matrix::from_raw(fv.rows(), 2 * m, data);
        Ok(self.push_derived(
            value,
            Op::ConcatBroadcast {
                f,
                g,
                segments: segments.to_vec(),
            },
            &[f, g],
        ))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).hstack(self.value(b))?;
        Ok(self.push_derived(value, Op::ConcatCols { a, b }, &[a, b]))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let values: Vec<&Matrix> = parts.iter().map(|id| self.value(*id)).collect();
        let value = Matrix::vstack(&values)?;
        Ok(self.push_derived(value, Op::ConcatRows { parts: parts.to_vec() }, parts))
    }

    /// Gram matrix of feature columns (see [`crate::numerics::matrix::gram`]).
    pub fn gram(&mut self, f: NodeId, per_point: bool) -> Result<NodeId> {
        let value = gram(self.value(f), per_point)?;
        Ok(self.push_derived(value, Op::Gram { f, per_point }, &[f]))
    }

    /// Sum of squared entries as a 1x1 scalar.
    pub fn sq_frobenius(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::from_raw(1, 1, vec![self.value(a).frobenius_sq()]);
        self.push_derived(value, Op::SqFrobenius { a }, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Matrix::from_raw(1, 1, vec![self.value(a).sum()]);
        self.push_derived(value, Op::Sum { a }, &[a])
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_mask(&mut self, a: NodeId, mask: Matrix) -> Result<NodeId> {
        let value = self.value(a).hadamard(&mask)?;
        Ok(self.push_derived(value, Op::MulMask { a, mask }, &[a]))
    }

    /// Mean softmax cross-entropy of RxC logits against R integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: &[usize]) -> Result<NodeId> {
        let lv = self.value(logits);
        let (n, c) = lv.shape();
        if targets.len() != n {
            return Err(Error::InvalidArgument(format!(
                "cross-entropy targets length {} does not match {} logit rows",
                targets.len(),
                n
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::InvalidArgument(format!(
                "cross-entropy target {t} out of range for {c} classes"
            )));
        }
        let mut softmax = Matrix::zeros(n, c);
        let mut loss = 0.0;
        for i in 0..n {
            let row = lv.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exp: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
            let z: f64 = exp.iter().sum();
            for (j, e) in exp.iter().enumerate() {
                softmax[(i, j)] = e / z;
            }
            loss += z.ln() + max - row[targets[i]];
        }
        loss /= n as f64;
        let value = Matrix::from_raw(1, 1, vec![loss]);
        Ok(self.push_derived(
            value,
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                softmax,
            },
            &[logits],
        ))
    }

    /// Recomputes every derived node value from the current leaf values.
    /// With unchanged leaves this reproduces the recorded values bit for bit.
    pub fn replay(&mut self) -> Result<()> {
        for idx in 0..self.nodes.len() {
            let op = self.nodes[idx].op.clone();
            let value = match &op {
                Op::Leaf => continue,
                Op::MatMul { a, b } => self.value(*a).matmul(self.value(*b))?,
                Op::Add { a, b } => self.value(*a).add(self.value(*b))?,
                Op::Sub { a, b } => self.value(*a).sub(self.value(*b))?,
                Op::Scale { a, factor } => self.value(*a).scale(*factor),
                Op::AddRow { a, row } => {
                    let mut v = self.value(*a).clone();
                    let r = self.value(*row).row(0).to_vec();
                    for i in 0..v.rows() {
                        for (x, b) in v.row_mut(i).iter_mut().zip(&r) {
                            *x += b;
                        }
                    }
                    v
                }
                Op::LeakyRelu { a, slope } => {
                    let s = *slope;
                    self.value(*a).map(|v| if v >= 0.0 { v } else { s * v })
                }
                Op::BnInfer {
                    x,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let xv = self.value(*x);
                    let g = self.value(*gamma).row(0).to_vec();
                    let b = self.value(*beta).row(0).to_vec();
                    let mut v = Matrix::zeros(xv.rows(), xv.cols());
                    for i in 0..xv.rows() {
                        let src = xv.row(i);
                        let dst = v.row_mut(i);
                        for j in 0..src.len() {
                            dst[j] = g[j] * (src[j] - mean[j]) * inv_std[j] + b[j];
                        }
                    }
                    v
                }
                Op::BnTrain { x_hat, gamma, beta, .. } => {
                    let g = self.value(*gamma).row(0).to_vec();
                    let b = self.value(*beta).row(0).to_vec();
                    let mut v = Matrix::zeros(x_hat.rows(), x_hat.cols());
                    for i in 0..v.rows() {
                        for j in 0..v.cols() {
                            v[(i, j)] = g[j] * x_hat[(i, j)] + b[j];
                        }
                    }
                    v
                }
                Op::SegMax { a, segments, .. } => {
                    let av = self.value(*a);
                    let m = av.cols();
                    let mut v = Matrix::zeros(segments.len(), m);
                    let mut start = 0;
                    for (b, &len) in segments.iter().enumerate() {
                        let out = v.row_mut(b);
                        out.copy_from_slice(av.row(start));
                        for i in start + 1..start + len {
                            for (j, &x) in av.row(i).iter().enumerate() {
                                if x > out[j] {
                                    out[j] = x;
                                }
                            }
                        }
                        start += len;
                    }
                    v
                }
                Op::ConcatBroadcast { f, g, segments } => {
                    let (fv, gv) = (self.value(*f), self.value(*g));
                    let mut data = Vec::with_capacity(fv.rows() * 2 * fv.cols());
                    let mut start = 0;
                    for (b, &len) in segments.iter().enumerate() {
                        for i in start..start + len {
                            data.extend_from_slice(fv.row(i));
                            data.extend_from_slice(gv.row(b));
                        }
                        start += len;
                    }
                    Matrix::from_raw(fv.rows(), 2 * fv.cols(), data)
                }
                Op::ConcatCols { a, b } => self.value(*a).hstack(self.value(*b))?,
                Op::ConcatRows { parts } => {
                    let values: Vec<&Matrix> = parts.iter().map(|id| self.value(*id)).collect();
                    Matrix::vstack(&values)?
                }
                Op::Gram { f, per_point } => gram(self.value(*f), *per_point)?,
                Op::SqFrobenius { a } => Matrix::from_raw(1, 1, vec![self.value(*a).frobenius_sq()]),
                Op::Sum { a } => Matrix::from_raw(1, 1, vec![self.value(*a).sum()]),
                Op::MulMask { a, mask } => self.value(*a).hadamard(mask)?,
                Op::SoftmaxCrossEntropy { logits, targets, .. } => {
                    let lv = self.value(*logits);
                    let mut loss = 0.0;
                    for i in 0..lv.rows() {
                        let row = lv.row(i);
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        loss += z.ln() + max - row[targets[i]];
                    }
                    Matrix::from_raw(1, 1, vec![loss / lv.rows() as f64])
                }
            };
            self.nodes[idx].value = value;
        }
        Ok(())
    }

    /// Reverse-mode gradients of a scalar output with respect to every
    /// trainable leaf. Errors when the output is not 1x1.
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = self.value(output);
        if !out.is_scalar() {
            return Err(Error::NonScalarOutput {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Matrix::from_raw(1, 1, vec![1.0]));

        // Nodes only reference earlier nodes, so one reverse sweep visits
        // every node exactly once in reverse topological order. Interior
        // gradients are dead once propagated; dropping them keeps backward
        // memory bounded by the live frontier rather than the whole graph.
        for idx in (0..=output.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &grad, &mut grads);
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(grad);
            }
        }

        Ok(Gradients {
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads,
        })
    }

    fn add_grad(&self, grads: &mut [Option<Matrix>], id: NodeId, delta: Matrix) {
        if !self.nodes[id.0].requires_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn accumulate(&self, idx: usize, grad: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                if self.nodes[a.0].requires_grad {
                    let bt = self.value(*b).transpose();
                    self.add_grad(grads, *a, grad.matmul(&bt).expect("matmul grad shape"));
                }
                if self.nodes[b.0].requires_grad {
                    let at = self.value(*a).transpose();
                    self.add_grad(grads, *b, at.matmul(grad).expect("matmul grad shape"));
                }
            }
            Op::Add { a, b } => {
                self.add_grad(grads, *a, grad.clone());
                self.add_grad(grads, *b, grad.clone());
            }
            Op::Sub { a, b } => {
                self.add_grad(grads, *a, grad.clone());
                self.add_grad(grads, *b, grad.scale(-1.0));
            }
            Op::Scale { a, factor } => {
                self.add_grad(grads, *a, grad.scale(*factor));
            }
            Op::AddRow { a, row } => {
                self.add_grad(grads, *a, grad.clone());
                let sums = grad.col_sums();
                self.add_grad(grads, *row, Matrix::from_raw(1, sums.len(), sums));
            }
            Op::LeakyRelu { a, slope } => {
                let x = self.value(*a);
                let mut d = grad.clone();
                for (g, &v) in d.data_mut().iter_mut().zip(x.data()) {
                    if v < 0.0 {
                        *g *= slope;
                    }
                }
                self.add_grad(grads, *a, d);
            }
            Op::BnInfer {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let xv = self.value(*x);
                let g = self.value(*gamma).row(0).to_vec();
                let m = xv.cols();
                if self.nodes[x.0].requires_grad {
                    let mut dx = grad.clone();
                    for i in 0..dx.rows() {
                        let row = dx.row_mut(i);
                        for j in 0..m {
                            row[j] *= g[j] * inv_std[j];
                        }
                    }
                    self.add_grad(grads, *x, dx);
                }
                if self.nodes[gamma.0].requires_grad || self.nodes[beta.0].requires_grad {
                    let mut dgamma = vec![0.0; m];
                    let mut dbeta = vec![0.0; m];
                    for i in 0..xv.rows() {
                        let xr = xv.row(i);
                        let gr = grad.row(i);
                        for j in 0..m {
                            dgamma[j] += gr[j] * (xr[j] - mean[j]) * inv_std[j];
                            dbeta[j] += gr[j];
                        }
                    }
                    self.add_grad(grads, *gamma, Matrix::from_raw(1, m, dgamma));
                    self.add_grad(grads, *beta, Matrix::from_raw(1, m, dbeta));
                }
            }
            Op::BnTrain {
                x,
                gamma,
                beta,
                x_hat,
                inv_std,
            } => {
                let (n, m) = x_hat.shape();
                let g = self.value(*gamma).row(0).to_vec();
                let mut dgamma = vec![0.0; m];
                let mut dbeta = vec![0.0; m];
                // dL/dx_hat summaries needed by the batch-stat terms.
                let mut sum_dxhat = vec![0.0; m];
                let mut sum_dxhat_xhat = vec![0.0; m];
                for i in 0..n {
                    let gr = grad.row(i);
                    let xh = x_hat.row(i);
                    for j in 0..m {
                        let dxh = gr[j] * g[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                        sum_dxhat[j] += dxh;
                        sum_dxhat_xhat[j] += dxh * xh[j];
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let nf = n as f64;
                    let mut dx = Matrix::zeros(n, m);
                    for i in 0..n {
                        let gr = grad.row(i);
                        let xh = x_hat.row(i);
                        let dst = dx.row_mut(i);
                        for j in 0..m {
                            let dxh = gr[j] * g[j];
                            dst[j] = inv_std[j] / nf
                                * (nf * dxh - sum_dxhat[j] - xh[j] * sum_dxhat_xhat[j]);
                        }
                    }
                    self.add_grad(grads, *x, dx);
                }
                self.add_grad(grads, *gamma, Matrix::from_raw(1, m, dgamma));
                self.add_grad(grads, *beta, Matrix::from_raw(1, m, dbeta));
            }
            Op::SegMax { a, argmax, .. } => {
                let src = self.value(*a);
                let m = src.cols();
                let mut dx = Matrix::zeros(src.rows(), src.cols());
                for (k, &i) in argmax.iter().enumerate() {
                    let (b, j) = (k / m, k % m);
                    dx[(i, j)] += grad[(b, j)];
                }
                self.add_grad(grads, *a, dx);
            }
            Op::ConcatBroadcast { f, g, segments } => {
                let m = self.value(*f).cols();
                self.add_grad(grads, *f, grad.slice_cols(0, m));
                let mut dg = Matrix::zeros(segments.len(), m);
                let mut start = 0;
                for (b, &len) in segments.iter().enumerate() {
                    let out = dg.row_mut(b);
                    for i in start..start + len {
                        let row = grad.row(i);
                        for (j, slot) in out.iter_mut().enumerate() {
                            *slot += row[m + j];
                        }
                    }
                    start += len;
                }
                self.add_grad(grads, *g, dg);
            }
            Op::ConcatCols { a, b } => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                self.add_grad(grads, *a, grad.slice_cols(0, ca));
                self.add_grad(grads, *b, grad.slice_cols(ca, cb));
            }
            Op::ConcatRows { parts } => {
                let mut start = 0;
                for p in parts {
                    let r = self.value(*p).rows();
                    self.add_grad(grads, *p, grad.slice_rows(start, r));
                    start += r;
                }
            }
            Op::Gram { f, per_point } => {
                // dL/dF = F (dG + dG^T) / norm
                let fv = self.value(*f);
                let sym = grad.add(&grad.transpose()).expect("gram grad shape");
                let mut df = fv.matmul(&sym).expect("gram grad shape");
                if *per_point {
                    df = df.scale(1.0 / fv.rows() as f64);
                }
                self.add_grad(grads, *f, df);
            }
            Op::SqFrobenius { a } => {
                let s = 2.0 * grad.scalar();
                self.add_grad(grads, *a, self.value(*a).scale(s));
            }
            Op::Sum { a } => {
                let (r, c) = self.value(*a).shape();
                self.add_grad(grads, *a, Matrix::filled(r, c, grad.scalar()));
            }
            Op::MulMask { a, mask } => {
                self.add_grad(grads, *a, grad.hadamard(mask).expect("mask grad shape"));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                softmax,
            } => {
                let n = softmax.rows();
                let scale = grad.scalar() / n as f64;
                let mut dl = softmax.scale(scale);
                for (i, &t) in targets.iter().enumerate() {
                    dl[(i, t)] -= scale;
                }
                self.add_grad(grads, *logits, dl);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_gradient() {
        let mut tape = Tape::new();
        let x = tape.trainable(Matrix::from_raw(1, 1, vec![3.0]));
        let y = tape.sum(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(x).scalar(), 1.0);
    }

    #[test]
    fn product_rule_via_gram() {
        // f(x, y) = x * y as a 1x1 "matmul": gradients are (y, x).
        let mut tape = Tape::new();
        let x = tape.trainable(Matrix::from_raw(1, 1, vec![2.0]));
        let y = tape.trainable(Matrix::from_raw(1, 1, vec![3.0]));
        let p = tape.matmul(x, y).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(x).scalar(), 3.0);
        assert_eq!(grads.get(y).scalar(), 2.0);
    }

    #[test]
    fn untouched_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.trainable(Matrix::from_raw(1, 2, vec![1.0, 2.0]));
        let unused = tape.trainable(Matrix::from_raw(1, 3, vec![0.5, 0.5, 0.5]));
        let y = tape.sum(x);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.get(unused), Matrix::zeros(1, 3));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.trainable(Matrix::zeros(2, 2));
        let y = tape.scale(x, 2.0);
        assert!(matches!(
            tape.backward(y),
            Err(Error::NonScalarOutput { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        // z = sum(x + x) => dz/dx = 2 everywhere.
        let mut tape = Tape::new();
        let x = tape.trainable(Matrix::from_raw(2, 1, vec![1.0, -1.0]));
        let s = tape.add(x, x).unwrap();
        let z = tape.sum(s);
        let grads = tape.backward(z).unwrap();
        assert_eq!(grads.get(x), Matrix::filled(2, 1, 2.0));
    }

    #[test]
    fn replay_is_bit_exact() {
        let mut tape = Tape::new();
        let x = tape.trainable(Matrix::from_raw(3, 2, vec![0.3, -1.2, 2.0, 0.7, -0.4, 1.1]));
        let w = tape.constant(Matrix::from_raw(2, 2, vec![0.5, -0.25, 1.5, 0.75]));
        let h = tape.matmul(x, w).unwrap();
        let a = tape.leaky_relu(h, 0.2).unwrap();
        let g = tape.gram(a, true).unwrap();
        let loss = tape.sq_frobenius(g);
        let before = tape.value(loss).clone();
        let a_before = tape.value(a).clone();
        tape.replay().unwrap();
        assert_eq!(tape.value(loss), &before);
        assert_eq!(tape.value(a), &a_before);
    }

    #[test]
    fn leaky_relu_values_and_zero() {
        let mut tape = Tape::new();
        let x = tape.trainable(Matrix::from_raw(1, 3, vec![1.0, -1.0, 0.0]));
        let y = tape.leaky_relu(x, 0.2).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, -0.2, 0.0]);
        let s = tape.sum(y);
        let grads = tape.backward(s).unwrap();
        // Derivative at exactly 0 takes the positive branch.
        assert_eq!(grads.get(x).data(), &[1.0, 0.2, 1.0]);
    }

    #[test]
    fn leaky_relu_rejects_bad_slope() {
        let mut tape = Tape::new();
        let x = tape.trainable(Matrix::zeros(1, 1));
        assert!(tape.leaky_relu(x, 0.0).is_err());
        assert!(tape.leaky_relu(x, 1.0).is_err());
    }

    #[test]
    fn concat_broadcast_hand_checked() {
        let mut tape = Tape::new();
        let f = tape.trainable(Matrix::from_raw(2, 1, vec![1.0, 2.0]));
        let g = tape.trainable(Matrix::from_raw(1, 1, vec![9.0]));
        let a = tape.concat_broadcast(f, g).unwrap();
        assert_eq!(tape.value(a).data(), &[1.0, 9.0, 2.0, 9.0]);
        // Gradient of g is the sum over rows of the broadcast half.
        let s = tape.sum(a);
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.get(g).scalar(), 2.0);
        assert_eq!(grads.get(f), Matrix::filled(2, 1, 1.0));
    }

    #[test]
    fn batch_norm_train_two_point_column() {
        let mut tape = Tape::new();
        let x = tape.trainable(Matrix::from_raw(2, 1, vec![1.0, 3.0]));
        let gamma = tape.constant(Matrix::from_raw(1, 1, vec![1.0]));
        let beta = tape.constant(Matrix::from_raw(1, 1, vec![0.0]));
        let (y, stats) = tape.batch_norm_train(x, gamma, beta).unwrap();
        let out = tape.value(y);
        // Column [1, 3] normalizes to [-1, 1] up to the epsilon adjustment.
        assert!((out[(0, 0)] + 1.0).abs() < 1e-4);
        assert!((out[(1, 0)] - 1.0).abs() < 1e-4);
        assert_eq!(stats.mean, vec![2.0]);
        assert_eq!(stats.var, vec![1.0]);
    }

    #[test]
    fn batch_norm_train_rejects_single_row() {
        let mut tape = Tape::new();
        let x = tape.trainable(Matrix::zeros(1, 2));
        let gamma = tape.constant(Matrix::filled(1, 2, 1.0));
        let beta = tape.constant(Matrix::zeros(1, 2));
        assert!(matches!(
            tape.batch_norm_train(x, gamma, beta),
            Err(Error::BatchTooSmall { rows: 1 })
        ));
    }

    #[test]
    fn batch_norm_infer_identity_configuration() {
        let mut tape = Tape::new();
        let x = tape.trainable(Matrix::from_raw(2, 2, vec![0.5, -1.0, 2.0, 0.25]));
        let gamma = tape.constant(Matrix::filled(1, 2, 1.0));
        let beta = tape.constant(Matrix::zeros(1, 2));
        let stats = RunningStats::frozen(vec![0.0, 0.0], vec![1.0, 1.0]);
        let y = tape.batch_norm_infer(x, gamma, beta, &stats).unwrap();
        // mean 0 / var 1 / gamma 1 / beta 0 is the identity up to eps scaling.
        let diff = tape.value(y).max_abs_diff(tape.value(x));
        assert!(diff < 1e-4, "diff {diff}");
    }

    #[test]
    fn batch_norm_infer_requires_ready_stats() {
        let mut tape = Tape::new();
        let x = tape.trainable(Matrix::zeros(2, 2));
        let gamma = tape.constant(Matrix::filled(1, 2, 1.0));
        let beta = tape.constant(Matrix::zeros(1, 2));
        let stats = RunningStats::new(2);
        assert!(matches!(
            tape.batch_norm_infer(x, gamma, beta, &stats),
            Err(Error::StatsNotReady)
        ));
    }

    #[test]
    fn softmax_cross_entropy_matches_closed_form() {
        let mut tape = Tape::new();
        let logits = tape.trainable(Matrix::from_raw(1, 2, vec![0.0, 0.0]));
        let loss = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((tape.scalar_value(loss) - (2.0f64).ln()).abs() < 1e-12);
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(logits);
        assert!((g[(0, 0)] + 0.5).abs() < 1e-12);
        assert!((g[(0, 1)] - 0.5).abs() < 1e-12);
    }
}
