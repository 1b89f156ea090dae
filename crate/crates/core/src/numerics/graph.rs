//! Eager-tape reverse-mode autodiff.
//!
//! Operations compute their value immediately when inserted and record what
//! backward needs. Node ids index the tape in insertion order, so inputs
//! always precede outputs and backward is a single reverse sweep, no
//! topological sort required.
//!
//! Memory policy: backward keeps gradients only for leaf nodes (parameters);
//! interior gradients are dropped as soon as they have been propagated.

use super::kernels;
use super::tensor::{validate_finite, Tensor};
use super::NumericsError;

/// Epsilon added to the variance before the inverse square root in batch
/// normalization.
pub const BN_EPS: f64 = 1e-5;
/// Fraction of the batch statistic blended into the running statistic per
/// training-mode call.
pub const BN_MOMENTUM: f64 = 0.1;
/// Probabilities entering the cross-entropy log are clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-7;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Whether batch normalization uses batch statistics (and updates running
/// ones) or frozen running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running per-feature statistics owned by a batch-normalization layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNormStats {
    /// Fresh statistics: mean 0, variance 1.
    pub fn new(features: usize) -> Self {
        Self { mean: vec![0.0; features], var: vec![1.0; features] }
    }
}

enum Op {
    Leaf,
    /// y = x · w
    Matmul { x: NodeId, w: NodeId },
    /// y = x · w + b (b broadcast over rows)
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu { x: NodeId },
    Sigmoid { x: NodeId },
    Add { a: NodeId, b: NodeId },
    ElemMul { a: NodeId, b: NodeId },
    ScaleConst { x: NodeId, c: f64 },
    SumAll { x: NodeId },
    /// Feature-wise batch normalization over rows. `xhat` and `invstd` are
    /// saved from the forward pass; `train` selects the backward rule.
    BatchNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Vec<f64>, invstd: Vec<f64>, train: bool },
    /// y[t, f] = x[t, f] * e[t / rows_per_block, f]
    BlockRowScale { x: NodeId, e: NodeId, rows_per_block: usize },
    /// y[t, f] = x[t, f] + e[t / rows_per_block, f]
    BlockRowAdd { x: NodeId, e: NodeId, rows_per_block: usize },
    /// Mean binary cross-entropy of probabilities `p` against `targets`.
    Bce { p: NodeId, targets: Vec<f64> },
    /// One row of an embedding table as a [1, dim] matrix.
    EmbedRow { table: NodeId, row: usize },
    /// Stack rank-2 inputs with equal column counts along the row axis.
    ConcatRows { parts: Vec<NodeId> },
    /// 3x3 convolution, stride 2, zero padding 1. x: [Cin,H,W],
    /// w: [Cout,Cin,3,3], b: [Cout].
    Conv2dS2 { x: NodeId, w: NodeId, b: NodeId },
    /// [C,H,W] -> [1,C] channel means.
    GlobalAvgPool { x: NodeId },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// The eager tape. See the module docs.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a constant input. Gradients do not flow into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    /// Insert a trainable parameter by copying the tensor's current value.
    /// After [`Graph::backward`] the accumulated gradient is available via
    /// [`Graph::grad`] / [`Graph::take_grad`].
    pub fn param(&mut self, value: &Tensor) -> NodeId {
        self.push(value.clone(), true, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Move a node's gradient out of the graph.
    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.nodes[id.0].grad.take()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn data(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    fn require_rank2(&self, id: NodeId, op: &'static str) -> Result<(usize, usize), NumericsError> {
        match *self.shape(id) {
            [r, c] => Ok((r, c)),
            ref s => Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("expected a rank-2 operand, got shape {s:?}"),
            }),
        }
    }

    /// y = x · w for rank-2 operands.
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> Result<NodeId, NumericsError> {
        let (m, kx) = self.require_rank2(x, "matmul")?;
        let (kw, n) = self.require_rank2(w, "matmul")?;
        if kx != kw {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                detail: format!("inner dimensions disagree: [{m},{kx}] * [{kw},{n}]"),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.data(x), self.data(w), &mut out, m, kx, n);
        let needs = self.needs(x) || self.needs(w);
        Ok(self.push(tensor2(m, n, out), needs, Op::Matmul { x, w }))
    }

    /// y = x · w + b, the affine layer.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let (m, kx) = self.require_rank2(x, "linear")?;
        let (kw, n) = self.require_rank2(w, "linear")?;
        let bs = self.shape(b).to_vec();
        if kx != kw || bs != [n] {
            return Err(NumericsError::ShapeMismatch {
                op: "linear",
                detail: format!("x [{m},{kx}], w [{kw},{n}], b {bs:?}"),
            });
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.data(x), self.data(w), &mut out, m, kx, n);
        kernels::add_bias(&mut out, self.data(b), m, n);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(tensor2(m, n, out), needs, Op::Linear { x, w, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data: out, grad: None, requires_grad: false };
        let needs = self.needs(x);
        self.push(t, needs, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.data(x).iter().map(|&v| kernels::sigmoid(v)).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data: out, grad: None, requires_grad: false };
        let needs = self.needs(x);
        self.push(t, needs, Op::Sigmoid { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op: "add",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data: out, grad: None, requires_grad: false };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::Add { a, b }))
    }

    pub fn elem_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op: "elem_mul",
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        let out: Vec<f64> =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let t = Tensor { shape: self.shape(a).to_vec(), data: out, grad: None, requires_grad: false };
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, needs, Op::ElemMul { a, b }))
    }

    /// y = c * x for a finite constant c.
    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        assert!(c.is_finite(), "scale: constant must be finite");
        let out: Vec<f64> = self.data(x).iter().map(|&v| c * v).collect();
        let t = Tensor { shape: self.shape(x).to_vec(), data: out, grad: None, requires_grad: false };
        let needs = self.needs(x);
        self.push(t, needs, Op::ScaleConst { x, c })
    }

    /// Scalar sum of every element.
    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.data(x).iter().sum();
        let needs = self.needs(x);
        self.push(tensor2(1, 1, vec![s]), needs, Op::SumAll { x })
    }

    /// Feature-wise batch normalization of a [rows, features] activation.
    ///
    /// Train mode normalizes with the batch mean and biased batch variance
    /// (requires at least 2 rows) and folds them into `stats` with momentum
    /// [`BN_MOMENTUM`]; eval mode normalizes with `stats` unchanged. Both
    /// apply the learned per-feature affine (gamma, beta).
    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        stats: &mut BatchNormStats,
        mode: Mode,
    ) -> Result<NodeId, NumericsError> {
        let (rows, f) = self.require_rank2(x, "batch_norm")?;
        let gs = self.shape(gamma).to_vec();
        let bs = self.shape(beta).to_vec();
        if gs != [f] || bs != [f] || stats.mean.len() != f || stats.var.len() != f {
            return Err(NumericsError::ShapeMismatch {
                op: "batch_norm",
                detail: format!(
                    "x [{rows},{f}], gamma {gs:?}, beta {bs:?}, stats {}",
                    stats.mean.len()
                ),
            });
        }
        let train = mode == Mode::Train;
        if train && rows < 2 {
            return Err(NumericsError::BatchTooSmall { rows });
        }

        let (mean, var) = if train {
            let mut mean = vec![0.0; f];
            let mut var = vec![0.0; f];
            let xd = self.data(x);
            for row in xd.chunks(f) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            for m in mean.iter_mut() {
                *m /= rows as f64;
            }
            for row in xd.chunks(f) {
                for ((vv, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    let d = v - m;
                    *vv += d * d;
                }
            }
            for v in var.iter_mut() {
                *v /= rows as f64; // biased variance
            }
            for (r, &b) in stats.mean.iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, &b) in stats.var.iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            (mean, var)
        } else {
            (stats.mean.clone(), stats.var.clone())
        };

        let invstd: Vec<f64> = var.iter().map(|&v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let xd = self.data(x);
        let mut xhat = vec![0.0; rows * f];
        for (xr, hr) in xd.chunks(f).zip(xhat.chunks_mut(f)) {
            for j in 0..f {
                hr[j] = (xr[j] - mean[j]) * invstd[j];
            }
        }
        let g = self.data(gamma);
        let be = self.data(beta);
        let mut out = vec![0.0; rows * f];
        for (hr, or) in xhat.chunks(f).zip(out.chunks_mut(f)) {
            for j in 0..f {
                or[j] = hr[j] * g[j] + be[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            tensor2(rows, f, out),
            needs,
            Op::BatchNorm { x, gamma, beta, xhat, invstd, train },
        ))
    }

    fn block_rows(
        &self,
        x: NodeId,
        e: NodeId,
        op: &'static str,
    ) -> Result<(usize, usize, usize), NumericsError> {
        let (t, f) = self.require_rank2(x, op)?;
        let (b, fe) = self.require_rank2(e, op)?;
        if fe != f || b == 0 || t % b != 0 {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("x [{t},{f}] not divisible into [{b},{fe}] blocks"),
            });
        }
        Ok((t, f, t / b))
    }

    /// y[t, f] = x[t, f] * e[t / P, f] where P = x rows / e rows.
    ///
    /// Broadcasts one excitation row over each contiguous block of activation
    /// rows (block = the points of one shape in a batch).
    pub fn block_row_scale(&mut self, x: NodeId, e: NodeId) -> Result<NodeId, NumericsError> {
        let (t, f, p) = self.block_rows(x, e, "block_row_scale")?;
        let xd = self.data(x);
        let ed = self.data(e);
        let mut out = vec![0.0; t * f];
        for (ti, (xr, or)) in xd.chunks(f).zip(out.chunks_mut(f)).enumerate() {
            let er = &ed[(ti / p) * f..(ti / p + 1) * f];
            for j in 0..f {
                or[j] = xr[j] * er[j];
            }
        }
        let needs = self.needs(x) || self.needs(e);
        Ok(self.push(tensor2(t, f, out), needs, Op::BlockRowScale { x, e, rows_per_block: p }))
    }

    /// y[t, f] = x[t, f] + e[t / P, f] where P = x rows / e rows.
    pub fn block_row_add(&mut self, x: NodeId, e: NodeId) -> Result<NodeId, NumericsError> {
        let (t, f, p) = self.block_rows(x, e, "block_row_add")?;
        let xd = self.data(x);
        let ed = self.data(e);
        let mut out = vec![0.0; t * f];
        for (ti, (xr, or)) in xd.chunks(f).zip(out.chunks_mut(f)).enumerate() {
            let er = &ed[(ti / p) * f..(ti / p + 1) * f];
            for j in 0..f {
                or[j] = xr[j] + er[j];
            }
        }
        let needs = self.needs(x) || self.needs(e);
        Ok(self.push(tensor2(t, f, out), needs, Op::BlockRowAdd { x, e, rows_per_block: p }))
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    ///
    /// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the
    /// log; gradients are zero where the clamp is active. Targets must be
    /// exactly 0.0 or 1.0.
    pub fn bce_loss(&mut self, p: NodeId, targets: &[f64]) -> Result<NodeId, NumericsError> {
        let pd = self.data(p);
        if pd.len() != targets.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "bce_loss",
                detail: format!("{} probabilities vs {} targets", pd.len(), targets.len()),
            });
        }
        if let Some(index) = targets.iter().position(|&y| y != 0.0 && y != 1.0) {
            return Err(NumericsError::InvalidLabel { index, value: targets[index] });
        }
        validate_finite(pd, "bce_loss probabilities")?;
        let lo = BCE_CLAMP;
        let hi = 1.0 - BCE_CLAMP;
        let mut acc = 0.0;
        for (&pv, &y) in pd.iter().zip(targets) {
            let pc = pv.clamp(lo, hi);
            acc += -(y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        let loss = acc / targets.len() as f64;
        let needs = self.needs(p);
        Ok(self.push(tensor2(1, 1, vec![loss]), needs, Op::Bce { p, targets: targets.to_vec() }))
    }

    /// Row `row` of a [rows, dim] table as a [1, dim] node. The backward
    /// pass touches only that row of the table gradient.
    pub fn embed_row(&mut self, table: NodeId, row: usize) -> Result<NodeId, NumericsError> {
        let (rows, dim) = self.require_rank2(table, "embed_row")?;
        if row >= rows {
            return Err(NumericsError::RowOutOfRange { row, rows });
        }
        let out = self.data(table)[row * dim..(row + 1) * dim].to_vec();
        let needs = self.needs(table);
        Ok(self.push(tensor2(1, dim, out), needs, Op::EmbedRow { table, row }))
    }

    /// Stack rank-2 nodes with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        if parts.is_empty() {
            return Err(NumericsError::ShapeMismatch {
                op: "concat_rows",
                detail: "no inputs".into(),
            });
        }
        let (_, cols) = self.require_rank2(parts[0], "concat_rows")?;
        let mut total_rows = 0;
        for &p in parts {
            let (r, c) = self.require_rank2(p, "concat_rows")?;
            if c != cols {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_rows",
                    detail: format!("column counts differ: {cols} vs {c}"),
                });
            }
            total_rows += r;
        }
        let mut out = Vec::with_capacity(total_rows * cols);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(tensor2(total_rows, cols, out), needs, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// 3x3 convolution with stride 2 and zero padding 1 over a [Cin, H, W]
    /// input, producing [Cout, (H-1)/2+1, (W-1)/2+1].
    pub fn conv2d_s2(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let (cin, h, wid) = match xs[..] {
            [c, h, wd] => (c, h, wd),
            _ => {
                return Err(NumericsError::ShapeMismatch {
                    op: "conv2d_s2",
                    detail: format!("input must be [C,H,W], got {xs:?}"),
                })
            }
        };
        let cout = match ws[..] {
            [co, ci, 3, 3] if ci == cin => co,
            _ => {
                return Err(NumericsError::ShapeMismatch {
                    op: "conv2d_s2",
                    detail: format!("kernel must be [Cout,{cin},3,3], got {ws:?}"),
                })
            }
        };
        if bs != [cout] {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d_s2",
                detail: format!("bias must be [{cout}], got {bs:?}"),
            });
        }
        let ho = (h - 1) / 2 + 1;
        let wo = (wid - 1) / 2 + 1;
        let xd = self.data(x);
        let wd = self.data(w);
        let bd = self.data(b);
        let mut out = vec![0.0; cout * ho * wo];
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = bd[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix >= wid as isize {
                                    continue;
                                }
                                s += xd[(ci * h + iy as usize) * wid + ix as usize]
                                    * wd[((co * cin + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = s;
                }
            }
        }
        let t = Tensor { shape: vec![cout, ho, wo], data: out, grad: None, requires_grad: false };
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(t, needs, Op::Conv2dS2 { x, w, b }))
    }

    /// Per-channel spatial mean: [C, H, W] -> [1, C].
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, NumericsError> {
        let xs = self.shape(x).to_vec();
        let (c, h, w) = match xs[..] {
            [c, h, wd] => (c, h, wd),
            _ => {
                return Err(NumericsError::ShapeMismatch {
                    op: "global_avg_pool",
                    detail: format!("input must be [C,H,W], got {xs:?}"),
                })
            }
        };
        let xd = self.data(x);
        let area = (h * w) as f64;
        let out: Vec<f64> =
            (0..c).map(|ci| xd[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() / area).collect();
        let needs = self.needs(x);
        Ok(self.push(tensor2(1, c, out), needs, Op::GlobalAvgPool { x }))
    }

    /// Reverse sweep from a scalar loss node, accumulating gradients into
    /// every leaf that requires them. Interior gradients are freed as soon
    /// as they have been propagated.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(NumericsError::NonScalarOutput { shape: loss_shape });
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.needs(loss) {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = self.nodes[id].grad.take() else { continue };
            // Move the op out so its saved buffers can be read while
            // gradients are accumulated into earlier nodes; restored below.
            let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
            match &op {
                Op::Leaf => {
                    // Parameter: keep the accumulated gradient readable.
                    self.nodes[id].grad = Some(g);
                    continue;
                }
                Op::Matmul { x, w } => {
                    let (x, w) = (*x, *w);
                    let (m, k) = (self.shape(x)[0], self.shape(x)[1]);
                    let n = self.shape(w)[1];
                    if self.needs(x) {
                        let wt = kernels::transpose(self.data(w), k, n);
                        let mut dx = vec![0.0; m * k];
                        kernels::matmul(&g, &wt, &mut dx, m, n, k);
                        self.accumulate(x, dx);
                    }
                    if self.needs(w) {
                        let mut dw = vec![0.0; k * n];
                        kernels::matmul_tn(self.data(x), &g, &mut dw, m, k, n);
                        self.accumulate(w, dw);
                    }
                }
                Op::Linear { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let (m, k) = (self.shape(x)[0], self.shape(x)[1]);
                    let n = self.shape(w)[1];
                    if self.needs(x) {
                        let wt = kernels::transpose(self.data(w), k, n);
                        let mut dx = vec![0.0; m * k];
                        kernels::matmul(&g, &wt, &mut dx, m, n, k);
                        self.accumulate(x, dx);
                    }
                    if self.needs(w) {
                        let mut dw = vec![0.0; k * n];
                        kernels::matmul_tn(self.data(x), &g, &mut dw, m, k, n);
                        self.accumulate(w, dw);
                    }
                    if self.needs(b) {
                        self.accumulate(b, kernels::sum_rows(&g, m, n));
                    }
                }
                Op::Relu { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let dx: Vec<f64> = self
                            .data(x)
                            .iter()
                            .zip(&g)
                            .map(|(&v, &gg)| if v > 0.0 { gg } else { 0.0 })
                            .collect();
                        self.accumulate(x, dx);
                    }
                }
                Op::Sigmoid { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let y = &self.nodes[id].value;
                        let dx: Vec<f64> =
                            y.data().iter().zip(&g).map(|(&yv, &gg)| gg * yv * (1.0 - yv)).collect();
                        self.accumulate(x, dx);
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        self.accumulate(a, g.clone());
                    }
                    if self.needs(b) {
                        self.accumulate(b, g.clone());
                    }
                }
                Op::ElemMul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        let da: Vec<f64> =
                            self.data(b).iter().zip(&g).map(|(&bv, &gg)| bv * gg).collect();
                        self.accumulate(a, da);
                    }
                    if self.needs(b) {
                        let db: Vec<f64> =
                            self.data(a).iter().zip(&g).map(|(&av, &gg)| av * gg).collect();
                        self.accumulate(b, db);
                    }
                }
                Op::ScaleConst { x, c } => {
                    let (x, c) = (*x, *c);
                    if self.needs(x) {
                        self.accumulate(x, g.iter().map(|&gg| c * gg).collect());
                    }
                }
                Op::SumAll { x } => {
                    let x = *x;
                    if self.needs(x) {
                        self.accumulate(x, vec![g[0]; self.nodes[x.0].value.numel()]);
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, invstd, train } => {
                    let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                    let (rows, f) = (self.shape(x)[0], self.shape(x)[1]);
                    // d gamma and d beta are plain reductions over rows.
                    if self.needs(gamma) {
                        let mut dg = vec![0.0; f];
                        for (hr, gr) in xhat.chunks(f).zip(g.chunks(f)) {
                            for j in 0..f {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                        self.accumulate(gamma, dg);
                    }
                    if self.needs(beta) {
                        self.accumulate(beta, kernels::sum_rows(&g, rows, f));
                    }
                    if self.needs(x) {
                        let gd = self.data(gamma);
                        let dx = if train {
                            // Batch statistics couple every row of a feature:
                            // dx = invstd/N * (N*dxhat - sum(dxhat)
                            //                  - xhat * sum(dxhat*xhat))
                            let mut sum_dh = vec![0.0; f];
                            let mut sum_dh_h = vec![0.0; f];
                            for (hr, gr) in xhat.chunks(f).zip(g.chunks(f)) {
                                for j in 0..f {
                                    let dh = gr[j] * gd[j];
                                    sum_dh[j] += dh;
                                    sum_dh_h[j] += dh * hr[j];
                                }
                            }
                            let nrows = rows as f64;
                            let mut dx = vec![0.0; rows * f];
                            for ((hr, gr), dr) in
                                xhat.chunks(f).zip(g.chunks(f)).zip(dx.chunks_mut(f))
                            {
                                for j in 0..f {
                                    let dh = gr[j] * gd[j];
                                    dr[j] = invstd[j] / nrows
                                        * (nrows * dh - sum_dh[j] - hr[j] * sum_dh_h[j]);
                                }
                            }
                            dx
                        } else {
                            // Frozen statistics: rows are independent.
                            let mut dx = vec![0.0; rows * f];
                            for (gr, dr) in g.chunks(f).zip(dx.chunks_mut(f)) {
                                for j in 0..f {
                                    dr[j] = gr[j] * gd[j] * invstd[j];
                                }
                            }
                            dx
                        };
                        self.accumulate(x, dx);
                    }
                }
                Op::BlockRowScale { x, e, rows_per_block } => {
                    let (x, e, p) = (*x, *e, *rows_per_block);
                    let f = self.shape(x)[1];
                    if self.needs(x) {
                        let ed = self.data(e);
                        let mut dx = vec![0.0; g.len()];
                        for (ti, (gr, dr)) in g.chunks(f).zip(dx.chunks_mut(f)).enumerate() {
                            let er = &ed[(ti / p) * f..(ti / p + 1) * f];
                            for j in 0..f {
                                dr[j] = gr[j] * er[j];
                            }
                        }
                        self.accumulate(x, dx);
                    }
                    if self.needs(e) {
                        let xd = self.data(x);
                        let blocks = self.shape(e)[0];
                        let mut de = vec![0.0; blocks * f];
                        for (ti, (gr, xr)) in g.chunks(f).zip(xd.chunks(f)).enumerate() {
                            let der = &mut de[(ti / p) * f..(ti / p + 1) * f];
                            for j in 0..f {
                                der[j] += gr[j] * xr[j];
                            }
                        }
                        self.accumulate(e, de);
                    }
                }
                Op::BlockRowAdd { x, e, rows_per_block } => {
                    let (x, e, p) = (*x, *e, *rows_per_block);
                    let f = self.shape(x)[1];
                    if self.needs(x) {
                        self.accumulate(x, g.clone());
                    }
                    if self.needs(e) {
                        let blocks = self.shape(e)[0];
                        let mut de = vec![0.0; blocks * f];
                        for (ti, gr) in g.chunks(f).enumerate() {
                            let der = &mut de[(ti / p) * f..(ti / p + 1) * f];
                            for j in 0..f {
                                der[j] += gr[j];
                            }
                        }
                        self.accumulate(e, de);
                    }
                }
                Op::Bce { p, targets } => {
                    let p = *p;
                    if self.needs(p) {
                        let pd = self.data(p);
                        let n = targets.len() as f64;
                        let lo = BCE_CLAMP;
                        let hi = 1.0 - BCE_CLAMP;
                        let dp: Vec<f64> = pd
                            .iter()
                            .zip(targets)
                            .map(|(&pv, &y)| {
                                if pv < lo || pv > hi {
                                    0.0 // clamp active: flat region
                                } else {
                                    g[0] * (pv - y) / (pv * (1.0 - pv) * n)
                                }
                            })
                            .collect();
                        self.accumulate(p, dp);
                    }
                }
                Op::EmbedRow { table, row } => {
                    let (table, row) = (*table, *row);
                    if self.needs(table) {
                        let (rows, dim) = (self.shape(table)[0], self.shape(table)[1]);
                        let mut dt = vec![0.0; rows * dim];
                        dt[row * dim..(row + 1) * dim].copy_from_slice(&g);
                        self.accumulate(table, dt);
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p.0].value.numel();
                        if self.needs(p) {
                            self.accumulate(p, g[offset..offset + n].to_vec());
                        }
                        offset += n;
                    }
                }
                Op::Conv2dS2 { x, w, b } => {
                    let (x, w, b) = (*x, *w, *b);
                    let xs = self.shape(x).to_vec();
                    let ws = self.shape(w).to_vec();
                    let (cin, h, wid) = (xs[0], xs[1], xs[2]);
                    let cout = ws[0];
                    let ho = (h - 1) / 2 + 1;
                    let wo = (wid - 1) / 2 + 1;
                    if self.needs(b) {
                        let db: Vec<f64> =
                            (0..cout).map(|co| g[co * ho * wo..(co + 1) * ho * wo].iter().sum()).collect();
                        self.accumulate(b, db);
                    }
                    if self.needs(w) {
                        let xd = self.data(x);
                        let mut dw = vec![0.0; cout * cin * 9];
                        for co in 0..cout {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let gg = g[(co * ho + oy) * wo + ox];
                                    for ci in 0..cin {
                                        for ky in 0..3 {
                                            let iy = (2 * oy + ky) as isize - 1;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..3 {
                                                let ix = (2 * ox + kx) as isize - 1;
                                                if ix < 0 || ix >= wid as isize {
                                                    continue;
                                                }
                                                dw[((co * cin + ci) * 3 + ky) * 3 + kx] += gg
                                                    * xd[(ci * h + iy as usize) * wid + ix as usize];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        self.accumulate(w, dw);
                    }
                    if self.needs(x) {
                        let wd = self.data(w);
                        let mut dx = vec![0.0; cin * h * wid];
                        for co in 0..cout {
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    let gg = g[(co * ho + oy) * wo + ox];
                                    for ci in 0..cin {
                                        for ky in 0..3 {
                                            let iy = (2 * oy + ky) as isize - 1;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..3 {
                                                let ix = (2 * ox + kx) as isize - 1;
                                                if ix < 0 || ix >= wid as isize {
                                                    continue;
                                                }
                                                dx[(ci * h + iy as usize) * wid + ix as usize] +=
                                                    gg * wd[((co * cin + ci) * 3 + ky) * 3 + kx];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                        self.accumulate(x, dx);
                    }
                }
                Op::GlobalAvgPool { x } => {
                    let x = *x;
                    if self.needs(x) {
                        let xs = self.shape(x).to_vec();
                        let (c, h, w) = (xs[0], xs[1], xs[2]);
                        let area = (h * w) as f64;
                        let mut dx = vec![0.0; c * h * w];
                        for ci in 0..c {
                            let gg = g[ci] / area;
                            for v in dx[ci * h * w..(ci + 1) * h * w].iter_mut() {
                                *v = gg;
                            }
                        }
                        self.accumulate(x, dx);
                    }
                }
            }
            // Interior gradient propagated and freed; put the op back.
            self.nodes[id].op = op;
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Vec<f64>) {
        debug_assert_eq!(contribution.len(), self.nodes[id.0].value.numel());
        if !self.needs(id) {
            return;
        }
        match &mut self.nodes[id.0].grad {
            None => self.nodes[id.0].grad = Some(contribution),
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contribution) {
                    *a += b;
                }
            }
        }
    }
}

fn tensor2(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor { shape: vec![rows, cols], data, grad: None, requires_grad: false }
}
