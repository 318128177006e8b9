//! Wengert-list tape: ops append records in execution order, `backward`
//! replays them in reverse. One tape per logical forward pass; tensors are
//! tied to the tape they were recorded on and cannot cross tapes.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::backward::node_backward;
use super::kernels::{self, ConvDims};
use super::{strides_of, NodeRef, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryKind {
    Gelu,
    Relu,
    Exp,
    Log,
    Sqrt,
    Negate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

/// Which statistics batch normalization normalizes with.
pub enum BnStats<'a, T> {
    /// Statistics of the current batch (training mode).
    Batch,
    /// Fixed running statistics (inference mode).
    Running { mean: &'a [T], var: &'a [T] },
}

/// Per-feature moments of one batch, as used for normalization
/// (variance is the biased, population estimate).
#[derive(Debug, Clone)]
pub struct BnMoments<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Saved input: value buffer plus the producing node, when the input is
/// itself recorded. Values are shared, not copied.
pub(super) struct Src<T> {
    pub shape: Vec<usize>,
    pub data: Arc<Vec<T>>,
    pub node: Option<usize>,
}

pub(super) enum Op<T: Scalar> {
    Leaf,
    Binary { kind: BinaryKind, a: Src<T>, b: Src<T> },
    Unary { kind: UnaryKind, x: Src<T>, out: Arc<Vec<T>> },
    Matmul { a: Src<T>, b: Src<T> },
    Conv2d { x: Src<T>, w: Src<T>, bias: Option<Src<T>>, dims: ConvDims },
    Reduce { kind: ReduceKind, x: Src<T>, axes: Vec<usize> },
    BatchNorm { x: Src<T>, gamma: Src<T>, beta: Src<T>, xhat: Arc<Vec<T>>, inv_std: Vec<T>, train: bool },
    GatherRows { x: Src<T>, idx: Arc<Vec<usize>> },
    Concat { parts: Vec<Src<T>>, axis: usize },
    Narrow { x: Src<T>, axis: usize, start: usize },
    Reshape { x: Src<T> },
    Permute { x: Src<T>, axes: Vec<usize> },
    CapsPredict { u: Src<T>, w: Src<T> },
}

pub(super) struct Node<T: Scalar> {
    pub op: Op<T>,
    pub shape: Vec<usize>,
}

/// Gradients produced by one backward pass, keyed by tape node.
pub struct GradStore<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> GradStore<T> {
    /// Gradient of the backward root with respect to `t`. None when `t`
    /// is not a recorded tensor of this tape or no gradient reached it.
    pub fn get(&self, t: &Tensor<T>) -> Option<Tensor<T>> {
        let node = t.node?;
        if node.tape != self.tape {
            return None;
        }
        let g = self.grads.get(node.id)?.as_ref()?;
        Some(Tensor::from_vec(self.shapes[node.id].clone(), g.clone()).expect("stored gradient shape"))
    }

    /// Like `get` but moves the buffer out, avoiding a copy.
    pub fn take(&mut self, t: &Tensor<T>) -> Option<Vec<T>> {
        let node = t.node?;
        if node.tape != self.tape {
            return None;
        }
        self.grads.get_mut(node.id)?.take()
    }
}

pub struct Tape<T: Scalar> {
    uid: u64,
    pub(super) nodes: Vec<Node<T>>,
    recording: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { uid: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed), nodes: Vec::new(), recording: true }
    }

    /// A tape that records nothing. Ops still compute; `var` hands back
    /// detached tensors. Used for inference and finite-difference passes.
    pub fn disabled() -> Self {
        let mut t = Self::new();
        t.recording = false;
        t
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers `t` as a differentiable leaf and returns the tracked handle.
    pub fn var(&mut self, t: &Tensor<T>) -> Tensor<T> {
        if !self.recording {
            return t.detached();
        }
        let id = self.push(Op::Leaf, t.shape().to_vec());
        Tensor { shape: t.shape().to_vec(), data: Arc::clone(t.buffer()), node: Some(NodeRef { tape: self.uid, id }) }
    }

    fn push(&mut self, op: Op<T>, shape: Vec<usize>) -> usize {
        self.nodes.push(Node { op, shape });
        self.nodes.len() - 1
    }

    /// Validates tape ownership and captures the input.
    fn src(&self, t: &Tensor<T>, op: &'static str) -> Result<Src<T>> {
        let node = match t.node {
            Some(n) if n.tape != self.uid => {
                return Err(Error::contract(op, "input tensor belongs to a different tape"));
            }
            Some(n) => Some(n.id),
            None => None,
        };
        Ok(Src { shape: t.shape().to_vec(), data: Arc::clone(t.buffer()), node })
    }

    /// Finalizes an op: verification-mode finiteness check, optional
    /// recording, output tensor construction.
    fn finish(
        &mut self,
        opname: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        tracked: bool,
        build: impl FnOnce(Arc<Vec<T>>) -> Op<T>,
    ) -> Result<Tensor<T>> {
        if T::CHECKED && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: opname });
        }
        let data = Arc::new(data);
        let node = if self.recording && tracked {
            let id = self.push(build(Arc::clone(&data)), shape.clone());
            Some(NodeRef { tape: self.uid, id })
        } else {
            None
        };
        Ok(Tensor { shape, data, node })
    }

    // ---- elementwise ----

    /// Elementwise add / sub / mul / div. Shapes must be equal, or `b` must
    /// broadcast to `a` by the trailing-axis rule: align shapes at the last
    /// axis; every aligned extent must match or be 1 in `b` (stretched).
    /// The result always has the shape of `a`.
    pub fn apply_binary(&mut self, kind: BinaryKind, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        let opname = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let bs = kernels::broadcast_strides(a.shape(), b.shape()).ok_or_else(|| {
            Error::shape(opname, format!("{:?} does not broadcast to {:?}", b.shape(), a.shape()))
        })?;
        let av = a.data();
        let bv = b.data();
        let mut out = vec![T::ZERO; a.numel()];
        kernels::walk_broadcast(a.shape(), &bs, |flat, boff| {
            out[flat] = match kind {
                BinaryKind::Add => av[flat] + bv[boff],
                BinaryKind::Sub => av[flat] - bv[boff],
                BinaryKind::Mul => av[flat] * bv[boff],
                BinaryKind::Div => av[flat] / bv[boff],
            };
        });
        let (sa, sb) = (self.src(a, opname)?, self.src(b, opname)?);
        let tracked = sa.node.is_some() || sb.node.is_some();
        self.finish(opname, a.shape().to_vec(), out, tracked, |_| Op::Binary { kind, a: sa, b: sb })
    }

    pub fn add(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_binary(BinaryKind::Add, a, b)
    }
    pub fn sub(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_binary(BinaryKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_binary(BinaryKind::Mul, a, b)
    }
    pub fn div(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_binary(BinaryKind::Div, a, b)
    }

    /// Elementwise unary map. GELU is the exact form x * Phi(x) with Phi
    /// the standard normal CDF via erf. In 64-bit verification mode, log
    /// requires strictly positive and sqrt non-negative inputs.
    pub fn apply_unary(&mut self, kind: UnaryKind, x: &Tensor<T>) -> Result<Tensor<T>> {
        let opname = match kind {
            UnaryKind::Gelu => "gelu",
            UnaryKind::Relu => "relu",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Sqrt => "sqrt",
            UnaryKind::Negate => "negate",
        };
        if T::CHECKED {
            match kind {
                UnaryKind::Log => {
                    if !x.data().iter().all(|&v| v > T::ZERO) {
                        return Err(Error::domain(opname, "log requires strictly positive inputs"));
                    }
                }
                UnaryKind::Sqrt => {
                    if !x.data().iter().all(|&v| v >= T::ZERO) {
                        return Err(Error::domain(opname, "sqrt requires non-negative inputs"));
                    }
                }
                _ => {}
            }
        }
        let out: Vec<T> = x
            .data()
            .iter()
            .map(|&v| match kind {
                UnaryKind::Gelu => kernels::gelu_val(v),
                UnaryKind::Relu => {
                    if v > T::ZERO {
                        v
                    } else {
                        T::ZERO
                    }
                }
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Negate => -v,
            })
            .collect();
        let sx = self.src(x, opname)?;
        let tracked = sx.node.is_some();
        self.finish(opname, x.shape().to_vec(), out, tracked, |out| Op::Unary { kind, x: sx, out })
    }

    pub fn gelu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_unary(UnaryKind::Gelu, x)
    }
    pub fn relu(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_unary(UnaryKind::Relu, x)
    }
    pub fn exp(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_unary(UnaryKind::Log, x)
    }
    pub fn sqrt(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_unary(UnaryKind::Sqrt, x)
    }
    pub fn negate(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.apply_unary(UnaryKind::Negate, x)
    }

    // ---- linear algebra ----

    /// Matrix product of a (m,k) and b (k,n). Backward: dA = G.B^T,
    /// dB = A^T.G.
    pub fn matmul(&mut self, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        if a.rank() != 2 || b.rank() != 2 {
            return Err(Error::shape("matmul", format!("expected rank-2 operands, got {:?} and {:?}", a.shape(), b.shape())));
        }
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let (k2, n) = (b.shape()[0], b.shape()[1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner extents differ: {:?} vs {:?}", a.shape(), b.shape())));
        }
        let mut out = vec![T::ZERO; m * n];
        kernels::mm_nn(a.data(), b.data(), &mut out, m, k, n);
        let (sa, sb) = (self.src(a, "matmul")?, self.src(b, "matmul")?);
        let tracked = sa.node.is_some() || sb.node.is_some();
        self.finish("matmul", vec![m, n], out, tracked, |_| Op::Matmul { a: sa, b: sb })
    }

    /// 2D cross-correlation with zero padding. x is (B,C,H,W), w is
    /// (O,C,KH,KW), optional bias has length O. Output extent per spatial
    /// axis: floor((ext + 2*padding - kext) / stride) + 1.
    pub fn conv2d(
        &mut self,
        x: &Tensor<T>,
        w: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        if x.rank() != 4 || w.rank() != 4 {
            return Err(Error::shape("conv2d", format!("expected rank-4 input and kernel, got {:?} and {:?}", x.shape(), w.shape())));
        }
        let (batch, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (c_out, cw, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if cw != c_in {
            return Err(Error::shape("conv2d", format!("kernel expects {} input channels, input has {}", cw, c_in)));
        }
        if stride == 0 {
            return Err(Error::contract("conv2d", "stride must be at least 1"));
        }
        if kh == 0 || kw == 0 || kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(Error::contract(
                "conv2d",
                format!("kernel {}x{} incompatible with padded input {}x{}", kh, kw, h + 2 * padding, wd + 2 * padding),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(Error::shape("conv2d", format!("bias shape {:?}, expected [{}]", b.shape(), c_out)));
            }
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let dims = ConvDims { batch, c_in, h, w: wd, c_out, kh, kw, stride, padding, oh, ow };
        let mut out = vec![T::ZERO; batch * c_out * oh * ow];
        kernels::conv2d_forward(x.data(), w.data(), bias.map(|b| b.data()), &mut out, &dims);
        let sx = self.src(x, "conv2d")?;
        let sw = self.src(w, "conv2d")?;
        let sb = bias.map(|b| self.src(b, "conv2d")).transpose()?;
        let tracked = sx.node.is_some() || sw.node.is_some() || sb.as_ref().is_some_and(|s| s.node.is_some());
        self.finish("conv2d", vec![batch, c_out, oh, ow], out, tracked, |_| Op::Conv2d { x: sx, w: sw, bias: sb, dims })
    }

    // ---- reductions ----

    /// Reduces over `axes` (non-empty, strictly ascending, in range),
    /// dropping the reduced axes from the shape. Max routes its gradient
    /// to the first (lowest flat index) maximal element of each group.
    pub fn reduce(&mut self, kind: ReduceKind, x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
        let opname = match kind {
            ReduceKind::Sum => "reduce_sum",
            ReduceKind::Mean => "reduce_mean",
            ReduceKind::Max => "reduce_max",
        };
        if axes.is_empty() {
            return Err(Error::contract(opname, "axis list is empty"));
        }
        for w in axes.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::contract(opname, format!("axes must be strictly ascending, got {:?}", axes)));
            }
        }
        if *axes.last().unwrap() >= x.rank() {
            return Err(Error::contract(opname, format!("axis {} out of range for shape {:?}", axes.last().unwrap(), x.shape())));
        }
        let out_shape: Vec<usize> =
            x.shape().iter().enumerate().filter(|(d, _)| !axes.contains(d)).map(|(_, &e)| e).collect();
        let out_numel: usize = out_shape.iter().product();
        let count: usize = axes.iter().map(|&d| x.shape()[d]).product();
        // Strides of the output aligned over the input's index space,
        // zero on reduced axes.
        let out_strides_full = reduce_strides(x.shape(), &out_shape, axes);
        let xv = x.data();
        let mut out = match kind {
            ReduceKind::Max => vec![T::from_f64(f64::NEG_INFINITY); out_numel],
            _ => vec![T::ZERO; out_numel],
        };
        kernels::walk_broadcast(x.shape(), &out_strides_full, |flat, ooff| match kind {
            ReduceKind::Sum | ReduceKind::Mean => out[ooff] += xv[flat],
            ReduceKind::Max => {
                if xv[flat] > out[ooff] {
                    out[ooff] = xv[flat];
                }
            }
        });
        if matches!(kind, ReduceKind::Mean) {
            let inv = T::ONE / T::from_f64(count as f64);
            for v in &mut out {
                *v *= inv;
            }
        }
        let sx = self.src(x, opname)?;
        let tracked = sx.node.is_some();
        self.finish(opname, out_shape, out, tracked, |_| Op::Reduce { kind, x: sx, axes: axes.to_vec() })
    }

    pub fn sum(&mut self, x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce(ReduceKind::Sum, x, axes)
    }
    pub fn mean(&mut self, x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce(ReduceKind::Mean, x, axes)
    }
    pub fn reduce_max(&mut self, x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
        self.reduce(ReduceKind::Max, x, axes)
    }

    /// Sum over all axes, yielding a one-element tensor. Convenience for
    /// building scalar roots. Rank-0 input is already scalar and is
    /// returned as is.
    pub fn sum_all(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.rank() == 0 {
            return Ok(x.clone());
        }
        let axes: Vec<usize> = (0..x.rank()).collect();
        self.reduce(ReduceKind::Sum, x, &axes)
    }

    // ---- batch normalization ----

    /// Normalizes each column of x (rows, C) to zero mean and unit
    /// variance, then applies the affine pair gamma, beta (each length C).
    /// With `BnStats::Batch` the moments come from x itself (requires at
    /// least 2 rows) and are returned so the caller can fold them into
    /// running statistics; with `BnStats::Running` the provided fixed
    /// moments are used and nothing is returned. Fully differentiable with
    /// respect to x, gamma, and beta in both modes; variance is the biased
    /// estimate.
    pub fn batch_norm_rows(
        &mut self,
        x: &Tensor<T>,
        gamma: &Tensor<T>,
        beta: &Tensor<T>,
        stats: BnStats<'_, T>,
        eps: f64,
    ) -> Result<(Tensor<T>, Option<BnMoments<T>>)> {
        if x.rank() != 2 {
            return Err(Error::shape("batch_norm", format!("expected rank-2 input, got {:?}", x.shape())));
        }
        let (rows, cols) = (x.shape()[0], x.shape()[1]);
        if gamma.shape() != [cols] || beta.shape() != [cols] {
            return Err(Error::shape(
                "batch_norm",
                format!("gamma {:?} and beta {:?} must both be [{}]", gamma.shape(), beta.shape(), cols),
            ));
        }
        let xv = x.data();
        let eps_t = T::from_f64(eps);
        let (mean, var, train, moments) = match stats {
            BnStats::Batch => {
                if rows < 2 {
                    return Err(Error::DegenerateBatch(format!(
                        "batch normalization in training mode needs at least 2 rows, got {}",
                        rows
                    )));
                }
                let inv_r = T::ONE / T::from_f64(rows as f64);
                let mut mean = vec![T::ZERO; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        mean[c] += xv[r * cols + c];
                    }
                }
                for m in &mut mean {
                    *m *= inv_r;
                }
                let mut var = vec![T::ZERO; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let d = xv[r * cols + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                for v in &mut var {
                    *v *= inv_r;
                }
                let moments = BnMoments { mean: mean.clone(), var: var.clone() };
                (mean, var, true, Some(moments))
            }
            BnStats::Running { mean, var } => {
                if mean.len() != cols || var.len() != cols {
                    return Err(Error::shape(
                        "batch_norm",
                        format!("running statistics have length {}/{}, expected {}", mean.len(), var.len(), cols),
                    ));
                }
                (mean.to_vec(), var.to_vec(), false, None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::ZERO; rows * cols];
        let mut out = vec![T::ZERO; rows * cols];
        let gv = gamma.data();
        let bv = beta.data();
        for r in 0..rows {
            for c in 0..cols {
                let h = (xv[r * cols + c] - mean[c]) * inv_std[c];
                xhat[r * cols + c] = h;
                out[r * cols + c] = gv[c] * h + bv[c];
            }
        }
        let sx = self.src(x, "batch_norm")?;
        let sg = self.src(gamma, "batch_norm")?;
        let sb = self.src(beta, "batch_norm")?;
        let tracked = sx.node.is_some() || sg.node.is_some() || sb.node.is_some();
        let xhat = Arc::new(xhat);
        let y = self.finish("batch_norm", vec![rows, cols], out, tracked, |_| Op::BatchNorm {
            x: sx,
            gamma: sg,
            beta: sb,
            xhat,
            inv_std,
            train,
        })?;
        Ok((y, moments))
    }

    // ---- structural ops ----

    /// Selects rows of x (axis 0); trailing axes are carried along.
    /// Differentiable with respect to x (scatter-add on backward); the
    /// index list is opaque to gradients.
    pub fn gather_rows(&mut self, x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
        if x.rank() == 0 {
            return Err(Error::shape("gather_rows", "input must have at least one axis".to_string()));
        }
        if idx.is_empty() {
            return Err(Error::contract("gather_rows", "index list is empty"));
        }
        let rows = x.shape()[0];
        let cols: usize = x.shape()[1..].iter().product();
        for &i in idx {
            if i >= rows {
                return Err(Error::contract("gather_rows", format!("row index {} out of range ({} rows)", i, rows)));
            }
        }
        let xv = x.data();
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(&xv[i * cols..(i + 1) * cols]);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&x.shape()[1..]);
        let sx = self.src(x, "gather_rows")?;
        let tracked = sx.node.is_some();
        let idx = Arc::new(idx.to_vec());
        self.finish("gather_rows", shape, out, tracked, |_| Op::GatherRows { x: sx, idx })
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::contract("concat", "no tensors to concatenate"));
        }
        let rank = parts[0].rank();
        if axis >= rank {
            return Err(Error::contract("concat", format!("axis {} out of range for rank {}", axis, rank)));
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank {
                return Err(Error::shape("concat", format!("rank mismatch: {:?} vs {:?}", parts[0].shape(), p.shape())));
            }
            for d in 0..rank {
                if d != axis && p.shape()[d] != parts[0].shape()[d] {
                    return Err(Error::shape("concat", format!("extent mismatch at axis {}: {:?} vs {:?}", d, parts[0].shape(), p.shape())));
                }
            }
            axis_total += p.shape()[axis];
        }
        let mut shape = parts[0].shape().to_vec();
        shape[axis] = axis_total;
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![T::ZERO; outer * axis_total * inner];
        let mut offset = 0;
        for p in parts {
            let e = p.shape()[axis];
            let pv = p.data();
            for o in 0..outer {
                let src = &pv[o * e * inner..(o + 1) * e * inner];
                let dst = &mut out[(o * axis_total + offset) * inner..(o * axis_total + offset + e) * inner];
                dst.copy_from_slice(src);
            }
            offset += e;
        }
        let srcs: Vec<Src<T>> = parts.iter().map(|p| self.src(p, "concat")).collect::<Result<_>>()?;
        let tracked = srcs.iter().any(|s| s.node.is_some());
        self.finish("concat", shape, out, tracked, |_| Op::Concat { parts: srcs, axis })
    }

    /// Contiguous slice [start, start+len) along `axis`.
    pub fn narrow(&mut self, x: &Tensor<T>, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        if axis >= x.rank() {
            return Err(Error::contract("narrow", format!("axis {} out of range for shape {:?}", axis, x.shape())));
        }
        if len == 0 || start + len > x.shape()[axis] {
            return Err(Error::contract(
                "narrow",
                format!("range [{}, {}) invalid for extent {}", start, start + len, x.shape()[axis]),
            ));
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let full = x.shape()[axis];
        let xv = x.data();
        let mut out = vec![T::ZERO; outer * len * inner];
        for o in 0..outer {
            let src = &xv[(o * full + start) * inner..(o * full + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        let sx = self.src(x, "narrow")?;
        let tracked = sx.node.is_some();
        self.finish("narrow", shape, out, tracked, |_| Op::Narrow { x: sx, axis, start })
    }

    /// Reinterprets the buffer under a new shape with the same element
    /// count. No data movement.
    pub fn reshape(&mut self, x: &Tensor<T>, shape: Vec<usize>) -> Result<Tensor<T>> {
        let numel: usize = shape.iter().product();
        if numel != x.numel() {
            return Err(Error::shape("reshape", format!("{:?} has {} elements, requested {:?}", x.shape(), x.numel(), shape)));
        }
        let sx = self.src(x, "reshape")?;
        let tracked = sx.node.is_some();
        let data = Arc::clone(x.buffer());
        if T::CHECKED && !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "reshape" });
        }
        let node = if self.recording && tracked {
            let id = self.push(Op::Reshape { x: sx }, shape.clone());
            Some(NodeRef { tape: self.uid, id })
        } else {
            None
        };
        Ok(Tensor { shape, data, node })
    }

    /// Reorders axes: output axis d is input axis axes[d].
    pub fn permute(&mut self, x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
        let rank = x.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::contract("permute", format!("{:?} is not a permutation of 0..{}", axes, rank)));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape()[a]).collect();
        let out = permute_copy(x.data(), x.shape(), axes, &out_shape);
        let sx = self.src(x, "permute")?;
        let tracked = sx.node.is_some();
        self.finish("permute", out_shape, out, tracked, |_| Op::Permute { x: sx, axes: axes.to_vec() })
    }

    /// Per-capsule linear predictions: u is (B,M,P), w is (S,Cl,P,D) with
    /// M a multiple of S; capsule i uses slot i mod S. Output (B,M,Cl,D)
    /// where out[b,i,j] = u[b,i] . w[i mod S, j].
    pub fn caps_predict(&mut self, u: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
        if u.rank() != 3 || w.rank() != 4 {
            return Err(Error::shape("caps_predict", format!("expected (B,M,P) and (S,Cl,P,D), got {:?} and {:?}", u.shape(), w.shape())));
        }
        let (batch, m, p) = (u.shape()[0], u.shape()[1], u.shape()[2]);
        let (s, c, pw, d) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if pw != p {
            return Err(Error::shape("caps_predict", format!("capsule width {} vs weight width {}", p, pw)));
        }
        if s == 0 || m % s != 0 {
            return Err(Error::contract("caps_predict", format!("{} capsules not a multiple of {} weight slots", m, s)));
        }
        let mut out = vec![T::ZERO; batch * m * c * d];
        kernels::caps_predict_forward(u.data(), w.data(), &mut out, (batch, m, p), (s, c, d));
        let su = self.src(u, "caps_predict")?;
        let sw = self.src(w, "caps_predict")?;
        let tracked = su.node.is_some() || sw.node.is_some();
        self.finish("caps_predict", vec![batch, m, c, d], out, tracked, |_| Op::CapsPredict { u: su, w: sw })
    }

    // ---- backward ----

    /// Reverse sweep from `root`, which must be a one-element tensor
    /// recorded on this tape. Gradients of all recorded ancestors are
    /// accumulated by summation over paths, visiting nodes in strictly
    /// reverse recording order.
    pub fn backward(&self, root: &Tensor<T>) -> Result<GradStore<T>> {
        let node = root
            .node
            .filter(|n| n.tape == self.uid)
            .ok_or_else(|| Error::contract("backward", "root is not recorded on this tape"))?;
        if root.numel() != 1 {
            return Err(Error::contract("backward", format!("root must be scalar, got shape {:?}", root.shape())));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[node.id] = Some(vec![T::ONE]);
        for id in (0..=node.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            let n = &self.nodes[id];
            if matches!(n.op, Op::Leaf) {
                continue;
            }
            let g = grads[id].as_ref().unwrap().clone();
            for (src_id, contribution) in node_backward(n, &g) {
                debug_assert!(src_id < id, "tape order is topological");
                let slot = grads[src_id].get_or_insert_with(|| vec![T::ZERO; contribution.len()]);
                for (dst, v) in slot.iter_mut().zip(contribution) {
                    *dst += v;
                }
            }
        }
        Ok(GradStore { tape: self.uid, grads, shapes: self.nodes.iter().map(|n| n.shape.clone()).collect() })
    }
}

/// Strides of the reduced output aligned over the input's axes, zero on
/// reduced axes.
fn reduce_strides(in_shape: &[usize], out_shape: &[usize], axes: &[usize]) -> Vec<usize> {
    let out_strides = strides_of(out_shape);
    let mut full = vec![0; in_shape.len()];
    let mut kept = 0;
    for d in 0..in_shape.len() {
        if !axes.contains(&d) {
            full[d] = out_strides[kept];
            kept += 1;
        }
    }
    full
}

pub(super) fn permute_copy<T: Scalar>(xv: &[T], in_shape: &[usize], axes: &[usize], out_shape: &[usize]) -> Vec<T> {
    let out_strides = strides_of(out_shape);
    // For each input axis, the stride it contributes to the output offset.
    let mut contrib = vec![0; in_shape.len()];
    for (out_d, &in_d) in axes.iter().enumerate() {
        contrib[in_d] = out_strides[out_d];
    }
    let mut out = vec![T::ZERO; xv.len()];
    kernels::walk_broadcast(in_shape, &contrib, |flat, ooff| {
        out[ooff] = xv[flat];
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn add_broadcasts_trailing_axis() {
        let mut tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2], &[10.0, 20.0]);
        let y = tape.add(&a, &b).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn incompatible_broadcast_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![3, 2]);
        assert!(matches!(tape.add(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn scalar_broadcasts_everywhere() {
        let mut tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let s = Tensor::scalar(1.0);
        let y = tape.add(&a, &s).unwrap();
        assert_eq!(y.data(), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_2x2() {
        let mut tape = Tape::new();
        let a = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let y = tape.matmul(&a, &b).unwrap();
        assert_eq!(y.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_backward_matches_closed_form() {
        let mut tape = Tape::new();
        let a0 = t(&[2, 3], &[1.0, -2.0, 0.5, 3.0, 1.0, -1.0]);
        let b0 = t(&[3, 2], &[2.0, 0.0, 1.0, -1.0, 0.5, 4.0]);
        let a = tape.var(&a0);
        let b = tape.var(&b0);
        let y = tape.matmul(&a, &b).unwrap();
        let root = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&root).unwrap();
        // dA = G.B^T with G all ones: row i of dA is the column sums of B^T,
        // that is the row sums of B per column index.
        let da = grads.get(&a).unwrap();
        assert_eq!(da.data(), &[2.0, 0.0, 4.5, 2.0, 0.0, 4.5]);
        let db = grads.get(&b).unwrap();
        // dB = A^T.G: row l of dB is the sum of column l of A, replicated.
        assert_eq!(db.data(), &[4.0, 4.0, -1.0, -1.0, -0.5, -0.5]);
    }

    #[test]
    fn gelu_matches_erf_form() {
        let mut tape = Tape::new();
        let x = t(&[3], &[1.0, 0.0, -2.0]);
        let y = tape.gelu(&x).unwrap();
        assert!((y.data()[0] - 0.8413447460685429).abs() < 1e-12);
        assert_eq!(y.data()[1], 0.0);
        // gelu(-2) = -2 * Phi(-2), small negative.
        assert!((y.data()[2] - (-0.04550026389635842)).abs() < 1e-12);
    }

    #[test]
    fn relu_clamps_and_routes_gradient() {
        let mut tape = Tape::new();
        let x0 = t(&[3], &[-2.0, 3.0, -0.5]);
        let x = tape.var(&x0);
        let y = tape.relu(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0, 0.0]);
        let root = tape.sum_all(&y).unwrap();
        let g = tape.backward(&root).unwrap().get(&x).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn log_domain_is_enforced_in_f64() {
        let mut tape = Tape::new();
        let x = t(&[2], &[1.0, -1.0]);
        assert!(matches!(tape.log(&x), Err(Error::Domain { .. })));
        let x = t(&[1], &[0.0]);
        assert!(matches!(tape.log(&x), Err(Error::Domain { .. })));
    }

    #[test]
    fn sqrt_domain_is_enforced_in_f64() {
        let mut tape = Tape::new();
        let x = t(&[1], &[-4.0]);
        assert!(matches!(tape.sqrt(&x), Err(Error::Domain { .. })));
    }

    #[test]
    fn overflow_is_an_error_in_f64() {
        let mut tape = Tape::new();
        let x = t(&[1], &[800.0]);
        let err = tape.exp(&x).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "exp" }));
    }

    #[test]
    fn f32_mode_does_not_enforce_checks() {
        let mut tape = Tape::<f32>::new();
        let x = Tensor::from_vec(vec![1], vec![-1.0f32]).unwrap();
        let y = tape.log(&x).unwrap();
        assert!(y.data()[0].is_nan());
    }

    #[test]
    fn conv2d_all_ones() {
        let mut tape = Tape::new();
        let x = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let w = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let y = tape.conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv2d_zero_padding_contributes_zeros() {
        let mut tape = Tape::new();
        let x = Tensor::full(vec![1, 1, 2, 2], 1.0);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let y = tape.conv2d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[4.0, 4.0, 4.0, 4.0]);
    }

    #[test]
    fn conv2d_output_extent_formula() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::zeros(vec![1, 1, 7, 5]);
        let w = Tensor::zeros(vec![2, 1, 3, 3]);
        let y = tape.conv2d(&x, &w, None, 2, 1).unwrap();
        // floor((7 + 2 - 3) / 2) + 1 = 4, floor((5 + 2 - 3) / 2) + 1 = 3.
        assert_eq!(y.shape(), &[1, 2, 4, 3]);
    }

    #[test]
    fn conv2d_rejects_oversized_kernel() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::zeros(vec![1, 1, 2, 2]);
        let w = Tensor::zeros(vec![1, 1, 3, 3]);
        assert!(tape.conv2d(&x, &w, None, 1, 0).is_err());
    }

    #[test]
    fn reduce_sum_and_mean() {
        let mut tape = Tape::new();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = tape.sum(&x, &[1]).unwrap();
        assert_eq!(s.shape(), &[2]);
        assert_eq!(s.data(), &[6.0, 15.0]);
        let m = tape.mean(&x, &[0]).unwrap();
        assert_eq!(m.data(), &[2.5, 3.5, 4.5]);
        let all = tape.sum(&x, &[0, 1]).unwrap();
        assert_eq!(all.shape(), &[] as &[usize]);
        assert_eq!(all.data(), &[21.0]);
    }

    #[test]
    fn reduce_max_ties_route_to_first() {
        let mut tape = Tape::new();
        let x0 = t(&[3], &[2.0, 2.0, 2.0]);
        let x = tape.var(&x0);
        let y = tape.reduce_max(&x, &[0]).unwrap();
        assert_eq!(y.data(), &[2.0]);
        let g = tape.backward(&y).unwrap().get(&x).unwrap();
        assert_eq!(g.data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_backward_distributes_evenly() {
        let mut tape = Tape::new();
        let x0 = t(&[4], &[1.0, 2.0, 3.0, 4.0]);
        let x = tape.var(&x0);
        let y = tape.mean(&x, &[0]).unwrap();
        let g = tape.backward(&y).unwrap().get(&x).unwrap();
        assert_eq!(g.data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn reduce_axis_validation() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::zeros(vec![2, 3]);
        assert!(tape.sum(&x, &[]).is_err());
        assert!(tape.sum(&x, &[1, 1]).is_err());
        assert!(tape.sum(&x, &[2]).is_err());
    }

    #[test]
    fn sum_over_paths_accumulates() {
        let mut tape = Tape::new();
        let x0 = t(&[2], &[3.0, -1.5]);
        let x = tape.var(&x0);
        let y = tape.mul(&x, &x).unwrap();
        let root = tape.sum_all(&y).unwrap();
        let g = tape.backward(&root).unwrap().get(&x).unwrap();
        assert_eq!(g.data(), &[6.0, -3.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x0 = t(&[2], &[1.0, 2.0]);
        let x = tape.var(&x0);
        let y = tape.add(&x, &x).unwrap();
        assert!(matches!(tape.backward(&y), Err(Error::Contract { .. })));
    }

    #[test]
    fn backward_rejects_foreign_root() {
        let mut tape_a = Tape::new();
        let tape_b = Tape::<f64>::new();
        let x0 = t(&[1], &[1.0]);
        let x = tape_a.var(&x0);
        assert!(tape_b.backward(&x).is_err());
    }

    #[test]
    fn cross_tape_inputs_are_rejected() {
        let mut tape_a = Tape::new();
        let mut tape_b = Tape::new();
        let x0 = t(&[1], &[1.0]);
        let xa = tape_a.var(&x0);
        assert!(matches!(tape_b.add(&xa, &x0), Err(Error::Contract { .. })));
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut tape = Tape::new();
        let x = t(&[1, 1], &[3.0]);
        let gamma = t(&[1], &[1.0]);
        let beta = t(&[1], &[0.0]);
        let (y, moments) = tape
            .batch_norm_rows(&x, &gamma, &beta, BnStats::Running { mean: &[2.0], var: &[1.0] }, 1e-5)
            .unwrap();
        assert!(moments.is_none());
        let expect = (3.0 - 2.0) / (1.0 + 1e-5f64).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_train_normalizes_columns() {
        let mut tape = Tape::new();
        let x = t(&[2, 2], &[1.0, 10.0, 3.0, 30.0]);
        let gamma = t(&[2], &[1.0, 1.0]);
        let beta = t(&[2], &[0.0, 0.0]);
        let (y, moments) = tape.batch_norm_rows(&x, &gamma, &beta, BnStats::Batch, 1e-5).unwrap();
        let m = moments.unwrap();
        assert_eq!(m.mean, vec![2.0, 20.0]);
        assert_eq!(m.var, vec![1.0, 100.0]);
        let e0 = 1.0 / (1.0 + 1e-5f64).sqrt();
        assert!((y.data()[0] + e0).abs() < 1e-12);
        assert!((y.data()[2] - e0).abs() < 1e-12);
    }

    #[test]
    fn batch_norm_train_rejects_single_row() {
        let mut tape = Tape::new();
        let x = t(&[1, 2], &[1.0, 2.0]);
        let gamma = t(&[2], &[1.0, 1.0]);
        let beta = t(&[2], &[0.0, 0.0]);
        let err = tape.batch_norm_rows(&x, &gamma, &beta, BnStats::Batch, 1e-5).unwrap_err();
        assert!(matches!(err, Error::DegenerateBatch(_)));
    }

    #[test]
    fn gather_rows_selects_and_scatters() {
        let mut tape = Tape::new();
        let x0 = t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = tape.var(&x0);
        let y = tape.gather_rows(&x, &[2, 0, 2]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let root = tape.sum_all(&y).unwrap();
        let g = tape.backward(&root).unwrap().get(&x).unwrap();
        // Row 2 was gathered twice, row 0 once, row 1 never.
        assert_eq!(g.data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_and_narrow_are_inverse() {
        let mut tape = Tape::new();
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]);
        let y = tape.concat(&[&a, &b], 1).unwrap();
        assert_eq!(y.shape(), &[2, 3]);
        assert_eq!(y.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let back = tape.narrow(&y, 1, 1, 2).unwrap();
        assert_eq!(back.data(), b.data());
    }

    #[test]
    fn permute_transposes() {
        let mut tape = Tape::new();
        let x = t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = tape.permute(&x, &[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn div_value_and_gradient() {
        let mut tape = Tape::new();
        let a0 = t(&[2], &[6.0, -8.0]);
        let b0 = t(&[2], &[2.0, 4.0]);
        let a = tape.var(&a0);
        let b = tape.var(&b0);
        let y = tape.div(&a, &b).unwrap();
        assert_eq!(y.data(), &[3.0, -2.0]);
        let root = tape.sum_all(&y).unwrap();
        let grads = tape.backward(&root).unwrap();
        assert_eq!(grads.get(&a).unwrap().data(), &[0.5, 0.25]);
        assert_eq!(grads.get(&b).unwrap().data(), &[-1.5, 0.5]);
    }

    #[test]
    fn untracked_ops_record_nothing() {
        let mut tape = Tape::new();
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        let y = tape.add(&a, &b).unwrap();
        assert!(y.node.is_none());
        assert_eq!(tape.len(), 0);
    }

    #[test]
    fn disabled_tape_is_transparent() {
        let mut tape = Tape::disabled();
        let x0 = t(&[2], &[1.0, 2.0]);
        let x = tape.var(&x0);
        let y = tape.mul(&x, &x).unwrap();
        assert_eq!(y.data(), &[1.0, 4.0]);
        assert!(y.node.is_none());
        assert_eq!(tape.len(), 0);
    }
}
