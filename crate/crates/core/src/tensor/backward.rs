//! Gradient rules, one per op kind. Each rule returns (source node id,
//! contribution) pairs; the driver in `Tape::backward` owns accumulation,
//! so a node feeding the same op twice simply contributes twice.

use super::kernels::{self, ConvDims};
use super::tape::{BinaryKind, Node, Op, ReduceKind, Src, UnaryKind};
use super::strides_of;
use crate::scalar::Scalar;

pub(super) fn node_backward<T: Scalar>(node: &Node<T>, g: &[T]) -> Vec<(usize, Vec<T>)> {
    let mut out = Vec::new();
    match &node.op {
        Op::Leaf => {}
        Op::Binary { kind, a, b } => binary_backward(*kind, a, b, &node.shape, g, &mut out),
        Op::Unary { kind, x, out: saved } => {
            if let Some(id) = x.node {
                let dx = unary_backward(*kind, &x.data, saved, g);
                out.push((id, dx));
            }
        }
        Op::Matmul { a, b } => {
            let (m, k) = (a.shape[0], a.shape[1]);
            let n = b.shape[1];
            if let Some(id) = a.node {
                let mut da = vec![T::ZERO; m * k];
                kernels::mm_nt(g, &b.data, &mut da, m, n, k);
                out.push((id, da));
            }
            if let Some(id) = b.node {
                let mut db = vec![T::ZERO; k * n];
                kernels::mm_tn(&a.data, g, &mut db, m, k, n);
                out.push((id, db));
            }
        }
        Op::Conv2d { x, w, bias, dims } => conv_backward(x, w, bias.as_ref(), dims, g, &mut out),
        Op::Reduce { kind, x, axes } => {
            if let Some(id) = x.node {
                out.push((id, reduce_backward(*kind, x, axes, &node.shape, g)));
            }
        }
        Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
            bn_backward(x, gamma, beta, xhat, inv_std, *train, g, &mut out);
        }
        Op::GatherRows { x, idx } => {
            if let Some(id) = x.node {
                let cols: usize = x.shape[1..].iter().product();
                let mut dx = vec![T::ZERO; x.data.len()];
                for (gi, &row) in idx.iter().enumerate() {
                    let src = &g[gi * cols..(gi + 1) * cols];
                    let dst = &mut dx[row * cols..(row + 1) * cols];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
                out.push((id, dx));
            }
        }
        Op::Concat { parts, axis } => {
            let axis_total: usize = node.shape[*axis];
            let outer: usize = node.shape[..*axis].iter().product();
            let inner: usize = node.shape[*axis + 1..].iter().product();
            let mut offset = 0;
            for p in parts {
                let e = p.shape[*axis];
                if let Some(id) = p.node {
                    let mut dp = vec![T::ZERO; p.data.len()];
                    for o in 0..outer {
                        let src = &g[(o * axis_total + offset) * inner..(o * axis_total + offset + e) * inner];
                        dp[o * e * inner..(o + 1) * e * inner].copy_from_slice(src);
                    }
                    out.push((id, dp));
                }
                offset += e;
            }
        }
        Op::Narrow { x, axis, start } => {
            if let Some(id) = x.node {
                let len = node.shape[*axis];
                let full = x.shape[*axis];
                let outer: usize = x.shape[..*axis].iter().product();
                let inner: usize = x.shape[*axis + 1..].iter().product();
                let mut dx = vec![T::ZERO; x.data.len()];
                for o in 0..outer {
                    let dst = &mut dx[(o * full + start) * inner..(o * full + start + len) * inner];
                    dst.copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                out.push((id, dx));
            }
        }
        Op::Reshape { x } => {
            if let Some(id) = x.node {
                out.push((id, g.to_vec()));
            }
        }
        Op::Permute { x, axes } => {
            if let Some(id) = x.node {
                // Forward wrote out[perm(i)] = x[i]; the gradient flows back
                // through the same index map.
                let out_strides = strides_of(&node.shape);
                let mut contrib = vec![0; x.shape.len()];
                for (out_d, &in_d) in axes.iter().enumerate() {
                    contrib[in_d] = out_strides[out_d];
                }
                let mut dx = vec![T::ZERO; x.data.len()];
                kernels::walk_broadcast(&x.shape, &contrib, |flat, ooff| {
                    dx[flat] = g[ooff];
                });
                out.push((id, dx));
            }
        }
        Op::CapsPredict { u, w } => {
            let (batch, m, p) = (u.shape[0], u.shape[1], u.shape[2]);
            let (s, c, d) = (w.shape[0], w.shape[1], w.shape[3]);
            let mut du = vec![T::ZERO; u.data.len()];
            let mut dw = vec![T::ZERO; w.data.len()];
            kernels::caps_predict_backward(g, &u.data, &w.data, &mut du, &mut dw, (batch, m, p), (s, c, d));
            if let Some(id) = u.node {
                out.push((id, du));
            }
            if let Some(id) = w.node {
                out.push((id, dw));
            }
        }
    }
    out
}

fn binary_backward<T: Scalar>(
    kind: BinaryKind,
    a: &Src<T>,
    b: &Src<T>,
    out_shape: &[usize],
    g: &[T],
    out: &mut Vec<(usize, Vec<T>)>,
) {
    let bs = kernels::broadcast_strides(out_shape, &b.shape).expect("recorded op had valid broadcast");
    if let Some(id) = a.node {
        let mut da = vec![T::ZERO; a.data.len()];
        match kind {
            BinaryKind::Add => da.copy_from_slice(g),
            BinaryKind::Sub => da.copy_from_slice(g),
            BinaryKind::Mul => {
                kernels::walk_broadcast(out_shape, &bs, |flat, boff| {
                    da[flat] = g[flat] * b.data[boff];
                });
            }
            BinaryKind::Div => {
                kernels::walk_broadcast(out_shape, &bs, |flat, boff| {
                    da[flat] = g[flat] / b.data[boff];
                });
            }
        }
        out.push((id, da));
    }
    if let Some(id) = b.node {
        let mut db = vec![T::ZERO; b.data.len()];
        match kind {
            BinaryKind::Add => {
                kernels::walk_broadcast(out_shape, &bs, |flat, boff| {
                    db[boff] += g[flat];
                });
            }
            BinaryKind::Sub => {
                kernels::walk_broadcast(out_shape, &bs, |flat, boff| {
                    db[boff] -= g[flat];
                });
            }
            BinaryKind::Mul => {
                kernels::walk_broadcast(out_shape, &bs, |flat, boff| {
                    db[boff] += g[flat] * a.data[flat];
                });
            }
            BinaryKind::Div => {
                kernels::walk_broadcast(out_shape, &bs, |flat, boff| {
                    let bv = b.data[boff];
                    db[boff] -= g[flat] * a.data[flat] / (bv * bv);
                });
            }
        }
        out.push((id, db));
    }
}

fn unary_backward<T: Scalar>(kind: UnaryKind, x: &[T], saved_out: &[T], g: &[T]) -> Vec<T> {
    let half = T::from_f64(0.5);
    g.iter()
        .enumerate()
        .map(|(i, &gv)| match kind {
            UnaryKind::Gelu => gv * kernels::gelu_grad(x[i]),
            // relu'(0) is taken as 0.
            UnaryKind::Relu => {
                if x[i] > T::ZERO {
                    gv
                } else {
                    T::ZERO
                }
            }
            UnaryKind::Exp => gv * saved_out[i],
            UnaryKind::Log => gv / x[i],
            UnaryKind::Sqrt => gv * half / saved_out[i],
            UnaryKind::Negate => -gv,
        })
        .collect()
}

fn conv_backward<T: Scalar>(
    x: &Src<T>,
    w: &Src<T>,
    bias: Option<&Src<T>>,
    dims: &ConvDims,
    g: &[T],
    out: &mut Vec<(usize, Vec<T>)>,
) {
    if let Some(id) = x.node {
        let mut dx = vec![T::ZERO; x.data.len()];
        kernels::conv2d_backward_x(g, &w.data, &mut dx, dims);
        out.push((id, dx));
    }
    if let Some(id) = w.node {
        let mut dw = vec![T::ZERO; w.data.len()];
        kernels::conv2d_backward_w(g, &x.data, &mut dw, dims);
        out.push((id, dw));
    }
    if let Some(b) = bias {
        if let Some(id) = b.node {
            let mut db = vec![T::ZERO; b.data.len()];
            kernels::conv2d_backward_bias(g, &mut db, dims);
            out.push((id, db));
        }
    }
}

fn reduce_backward<T: Scalar>(kind: ReduceKind, x: &Src<T>, axes: &[usize], out_shape: &[usize], g: &[T]) -> Vec<T> {
    let out_strides_full = {
        let out_strides = strides_of(out_shape);
        let mut full = vec![0; x.shape.len()];
        let mut kept = 0;
        for d in 0..x.shape.len() {
            if !axes.contains(&d) {
                full[d] = out_strides[kept];
                kept += 1;
            }
        }
        full
    };
    let mut dx = vec![T::ZERO; x.data.len()];
    match kind {
        ReduceKind::Sum => {
            kernels::walk_broadcast(&x.shape, &out_strides_full, |flat, ooff| {
                dx[flat] = g[ooff];
            });
        }
        ReduceKind::Mean => {
            let count: usize = axes.iter().map(|&d| x.shape[d]).product();
            let inv = T::ONE / T::from_f64(count as f64);
            kernels::walk_broadcast(&x.shape, &out_strides_full, |flat, ooff| {
                dx[flat] = g[ooff] * inv;
            });
        }
        ReduceKind::Max => {
            // Recompute the winning (first maximal) element per group; the
            // whole gradient routes there.
            let out_numel: usize = out_shape.iter().product();
            let mut best = vec![T::from_f64(f64::NEG_INFINITY); out_numel];
            let mut arg = vec![0usize; out_numel];
            kernels::walk_broadcast(&x.shape, &out_strides_full, |flat, ooff| {
                if x.data[flat] > best[ooff] {
                    best[ooff] = x.data[flat];
                    arg[ooff] = flat;
                }
            });
            for (ooff, &a) in arg.iter().enumerate() {
                dx[a] += g[ooff];
            }
        }
    }
    dx
}

#[allow(clippy::too_many_arguments)]
fn bn_backward<T: Scalar>(
    x: &Src<T>,
    gamma: &Src<T>,
    beta: &Src<T>,
    xhat: &[T],
    inv_std: &[T],
    train: bool,
    g: &[T],
    out: &mut Vec<(usize, Vec<T>)>,
) {
    let cols = gamma.data.len();
    let rows = x.data.len() / cols;
    // Column sums of g and g*xhat, shared by all three gradients.
    let mut sum_g = vec![T::ZERO; cols];
    let mut sum_gx = vec![T::ZERO; cols];
    for r in 0..rows {
        for c in 0..cols {
            let gv = g[r * cols + c];
            sum_g[c] += gv;
            sum_gx[c] += gv * xhat[r * cols + c];
        }
    }
    if let Some(id) = gamma.node {
        out.push((id, sum_gx.clone()));
    }
    if let Some(id) = beta.node {
        out.push((id, sum_g.clone()));
    }
    if let Some(id) = x.node {
        let mut dx = vec![T::ZERO; x.data.len()];
        if train {
            // Batch statistics depend on x, so the gradient carries the
            // centering and scaling correction terms.
            let inv_r = T::ONE / T::from_f64(rows as f64);
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    dx[i] = gamma.data[c]
                        * inv_std[c]
                        * (g[i] - sum_g[c] * inv_r - xhat[i] * sum_gx[c] * inv_r);
                }
            }
        } else {
            for r in 0..rows {
                for c in 0..cols {
                    let i = r * cols + c;
                    dx[i] = g[i] * gamma.data[c] * inv_std[c];
                }
            }
        }
        out.push((id, dx));
    }
}
