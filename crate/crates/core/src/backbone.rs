//! Graph-convolution backbone blocks: stem, grapher, FFN, downsample.
//!
//! A stage's feature map is held as a node matrix of shape (B*N) x D,
//! where N is the number of spatial positions of that stage and rows are
//! ordered image-major, then row-major over (y, x). Graphs are built per
//! image over that image's N rows; indices into the node matrix are
//! offset accordingly. Batch norm always normalizes over all rows (all
//! nodes of all images in the batch).
//!
//! Neighbor selection is not differentiated. During training the graph is
//! rebuilt from the projected features on every grapher invocation
//! (recorded into a `GraphPlan`); gradient checking replays a recorded
//! plan so that finite differencing and the analytic pass see the same
//! graph.

use crate::error::{Error, Result};
use crate::graph::{knn_dilated, NeighborTable};
use crate::params::{Bound, ParamId};
use crate::scalar::Scalar;
use crate::tensor::{BnStats, Tape, Tensor};

/// Normalization epsilon inside every batch-norm denominator.
pub const BN_EPS: f64 = 1e-5;
/// Running-statistic update rate: new = (1-m)*running + m*batch.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct BnParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Debug, Clone)]
pub struct StemParams {
    pub layers: [(ConvParams, BnParams); 3],
}

#[derive(Debug, Clone)]
pub struct GrapherParams {
    pub w_in: ParamId,
    pub bn_in: BnParams,
    pub heads: Vec<ParamId>,
    pub w_out: ParamId,
    pub bn_out: BnParams,
}

#[derive(Debug, Clone)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub bn1: BnParams,
    pub w2: ParamId,
    pub b2: ParamId,
    pub bn2: BnParams,
}

#[derive(Debug, Clone)]
pub struct DownsampleParams {
    pub conv: ConvParams,
    pub bn: BnParams,
}

/// Dilation for the 1-based global grapher layer index: ceil(l/4),
/// at least 1. Layers 1..4 use dilation 1, layers 5..8 use 2, and so on.
pub fn dilation_for_layer(layer: usize) -> usize {
    layer.div_ceil(4).max(1)
}

/// Graph tables for one forward pass. `Record` builds tables from the
/// current features and keeps them; `Replay` hands back previously
/// recorded tables in the same order, never touching the features.
pub enum GraphPlan {
    Record { tables: Vec<NeighborTable> },
    Replay { tables: Vec<NeighborTable>, cursor: usize },
}

impl GraphPlan {
    pub fn record() -> Self {
        GraphPlan::Record { tables: Vec::new() }
    }

    pub fn replay(tables: Vec<NeighborTable>) -> Self {
        GraphPlan::Replay { tables, cursor: 0 }
    }

    pub fn obtain(&mut self, build: impl FnOnce() -> Result<NeighborTable>) -> Result<NeighborTable> {
        match self {
            GraphPlan::Record { tables } => {
                let t = build()?;
                tables.push(t.clone());
                Ok(t)
            }
            GraphPlan::Replay { tables, cursor } => {
                let t = tables
                    .get(*cursor)
                    .cloned()
                    .ok_or_else(|| Error::contract("graph_plan", "replay ran past the recorded tables"))?;
                *cursor += 1;
                Ok(t)
            }
        }
    }

    pub fn tables(&self) -> &[NeighborTable] {
        match self {
            GraphPlan::Record { tables } | GraphPlan::Replay { tables, .. } => tables,
        }
    }

    pub fn into_tables(self) -> Vec<NeighborTable> {
        match self {
            GraphPlan::Record { tables } | GraphPlan::Replay { tables, .. } => tables,
        }
    }
}

/// Mutable per-forward context threaded through the blocks.
pub struct ForwardState<'a, T: Scalar> {
    pub bound: &'a Bound<T>,
    pub mode: Mode,
    pub plan: &'a mut GraphPlan,
    /// New running-statistic values produced by train-mode batch norms,
    /// to be written back into the parameter set by the caller.
    pub bn_updates: Vec<(ParamId, Vec<T>)>,
}

impl<'a, T: Scalar> ForwardState<'a, T> {
    pub fn new(bound: &'a Bound<T>, mode: Mode, plan: &'a mut GraphPlan) -> Self {
        ForwardState { bound, mode, plan, bn_updates: Vec::new() }
    }
}

/// Batch norm over a rows x C matrix. Train mode normalizes with batch
/// statistics and queues running-stat updates (running variance uses the
/// unbiased estimate); eval mode normalizes with the stored running
/// statistics.
pub fn bn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    st: &mut ForwardState<'_, T>,
    x: &Tensor<T>,
    bn: &BnParams,
) -> Result<Tensor<T>> {
    let gamma = st.bound.get(bn.gamma);
    let beta = st.bound.get(bn.beta);
    match st.mode {
        Mode::Train => {
            let (y, moments) = tape.batch_norm_rows(x, gamma, beta, BnStats::Batch, BN_EPS)?;
            let m = moments.expect("batch mode always yields moments");
            let rows = x.shape()[0];
            let unbias = T::from_f64(rows as f64 / (rows as f64 - 1.0));
            let keep = T::from_f64(1.0 - BN_MOMENTUM);
            let take = T::from_f64(BN_MOMENTUM);
            let new_mean: Vec<T> = st
                .bound
                .get(bn.running_mean)
                .data()
                .iter()
                .zip(&m.mean)
                .map(|(&o, &b)| keep * o + take * b)
                .collect();
            let new_var: Vec<T> = st
                .bound
                .get(bn.running_var)
                .data()
                .iter()
                .zip(&m.var)
                .map(|(&o, &b)| keep * o + take * (b * unbias))
                .collect();
            st.bn_updates.push((bn.running_mean, new_mean));
            st.bn_updates.push((bn.running_var, new_var));
            Ok(y)
        }
        Mode::Eval => {
            let mean = st.bound.get(bn.running_mean);
            let var = st.bound.get(bn.running_var);
            let (y, _) = tape.batch_norm_rows(
                x,
                gamma,
                beta,
                BnStats::Running { mean: mean.data(), var: var.data() },
                BN_EPS,
            )?;
            Ok(y)
        }
    }
}

/// B x C x H x W -> (B*H*W) x C, rows image-major then (y, x) row-major.
pub fn nchw_to_nodes<T: Scalar>(tape: &mut Tape<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape("nchw_to_nodes", format!("expected rank-4 input, got {:?}", x.shape())));
    }
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let p = tape.permute(x, &[0, 2, 3, 1])?;
    tape.reshape(&p, vec![b * h * w, c])
}

/// (B*H*W) x C -> B x C x H x W, inverse of `nchw_to_nodes`.
pub fn nodes_to_nchw<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    batch: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[0] != batch * h * w {
        return Err(Error::shape(
            "nodes_to_nchw",
            format!("expected ({}*{}*{}) x C node matrix, got {:?}", batch, h, w, x.shape()),
        ));
    }
    let c = x.shape()[1];
    let r = tape.reshape(x, vec![batch, h, w, c])?;
    tape.permute(&r, &[0, 3, 1, 2])
}

/// Batch norm for a B x C x H x W tensor, normalizing per channel over
/// (batch, height, width).
pub fn bn_nchw<T: Scalar>(
    tape: &mut Tape<T>,
    st: &mut ForwardState<'_, T>,
    x: &Tensor<T>,
    bn: &BnParams,
) -> Result<Tensor<T>> {
    let (b, _, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let rows = nchw_to_nodes(tape, x)?;
    let y = bn_forward(tape, st, &rows, bn)?;
    nodes_to_nchw(tape, &y, b, h, w)
}

fn conv_bn<T: Scalar>(
    tape: &mut Tape<T>,
    st: &mut ForwardState<'_, T>,
    x: &Tensor<T>,
    conv: &ConvParams,
    bn: &BnParams,
    gelu: bool,
) -> Result<Tensor<T>> {
    let y = tape.conv2d(x, st.bound.get(conv.w), Some(st.bound.get(conv.b)), conv.stride, conv.padding)?;
    let y = bn_nchw(tape, st, &y, bn)?;
    if gelu {
        tape.gelu(&y)
    } else {
        Ok(y)
    }
}

/// Three 3x3 convolutions with strides (2, 2, 1), each followed by batch
/// norm and GELU, reducing spatial extent by 4.
pub fn stem_forward<T: Scalar>(
    tape: &mut Tape<T>,
    st: &mut ForwardState<'_, T>,
    x: &Tensor<T>,
    p: &StemParams,
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::shape("stem", format!("expected rank-4 image batch, got {:?}", x.shape())));
    }
    let (h, w) = (x.shape()[2], x.shape()[3]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::shape("stem", format!("spatial extents {}x{} must be divisible by 4", h, w)));
    }
    let mut y = x.clone();
    for (conv, bn) in &p.layers {
        y = conv_bn(tape, st, &y, conv, bn, true)?;
    }
    Ok(y)
}

/// Shared implementation of the max-relative aggregate over one or more
/// per-image graphs covering consecutive row blocks of `x`.
fn max_relative_batched<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    tables: &[NeighborTable],
) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape("max_relative", format!("expected rank-2 node matrix, got {:?}", x.shape())));
    }
    let rows = x.shape()[0];
    let d = x.shape()[1];
    let covered: usize = tables.iter().map(|t| t.node_count()).sum();
    if covered != rows {
        return Err(Error::contract(
            "max_relative",
            format!("neighbor tables cover {} nodes, feature matrix has {}", covered, rows),
        ));
    }
    let k = tables[0].k();
    if tables.iter().any(|t| t.k() != k) {
        return Err(Error::contract("max_relative", "neighbor tables disagree on effective k"));
    }
    let mut idx = Vec::with_capacity(rows * k);
    let mut offset = 0;
    for t in tables {
        for i in 0..t.node_count() {
            for &j in t.neighbors(i) {
                idx.push(offset + j);
            }
        }
        offset += t.node_count();
    }
    let gathered = tape.gather_rows(x, &idx)?;
    let g3 = tape.reshape(&gathered, vec![rows, k, d])?;
    let c3 = tape.reshape(x, vec![rows, 1, d])?;
    let rel = tape.sub(&g3, &c3)?;
    let mx = tape.reduce_max(&rel, &[1])?;
    tape.concat(&[x, &mx], 1)
}

/// Row i of the result is [x_i, elementwise max over {x_j - x_i}] for the
/// node's selected neighbors.
pub fn max_relative_aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    nbrs: &NeighborTable,
) -> Result<Tensor<T>> {
    max_relative_batched(tape, x, std::slice::from_ref(nbrs))
}

/// Splits rows into `heads.len()` contiguous chunks, multiplies each by
/// its head matrix, and concatenates the results.
pub fn multi_head_update<T: Scalar>(
    tape: &mut Tape<T>,
    x: &Tensor<T>,
    heads: &[&Tensor<T>],
) -> Result<Tensor<T>> {
    if heads.is_empty() {
        return Err(Error::contract("multi_head", "need at least one head"));
    }
    if x.rank() != 2 {
        return Err(Error::shape("multi_head", format!("expected rank-2 input, got {:?}", x.shape())));
    }
    let cols = x.shape()[1];
    if cols % heads.len() != 0 {
        return Err(Error::shape(
            "multi_head",
            format!("width {} not divisible into {} heads", cols, heads.len()),
        ));
    }
    let chunk = cols / heads.len();
    let mut outs = Vec::with_capacity(heads.len());
    for (j, head) in heads.iter().enumerate() {
        let part = tape.narrow(x, 1, j * chunk, chunk)?;
        outs.push(tape.matmul(&part, head)?);
    }
    let refs: Vec<&Tensor<T>> = outs.iter().collect();
    tape.concat(&refs, 1)
}

/// One grapher block: project, rebuild the per-image KNN graph from the
/// projected features, max-relative aggregate, per-head update, GELU,
/// output projection, residual. Both projections are batch-normalized and
/// bias-free.
#[allow(clippy::too_many_arguments)]
pub fn grapher_forward<T: Scalar>(
    tape: &mut Tape<T>,
    st: &mut ForwardState<'_, T>,
    x: &Tensor<T>,
    p: &GrapherParams,
    batch: usize,
    n: usize,
    k: usize,
    dilation: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 2 || x.shape()[0] != batch * n {
        return Err(Error::shape(
            "grapher",
            format!("expected ({}*{}) x D node matrix, got {:?}", batch, n, x.shape()),
        ));
    }
    let d = x.shape()[1];
    let proj = tape.matmul(x, st.bound.get(p.w_in))?;
    let x_in = bn_forward(tape, st, &proj, &p.bn_in)?;
    let agg = if n == 1 {
        // A lone node per image has no candidate neighbors, so the
        // relative half of the aggregate is identically zero.
        let zeros = Tensor::zeros(vec![batch, d]);
        tape.concat(&[&x_in, &zeros], 1)?
    } else {
        let mut tables = Vec::with_capacity(batch);
        for b in 0..batch {
            let feats = Tensor::from_vec(vec![n, d], x_in.data()[b * n * d..(b + 1) * n * d].to_vec())?;
            let table = st.plan.obtain(|| knn_dilated(&feats, k, dilation))?;
            if table.node_count() != n || table.requested_k() != k || table.dilation() != dilation {
                return Err(Error::contract(
                    "grapher",
                    "replayed neighbor table does not match the current graph configuration",
                ));
            }
            tables.push(table);
        }
        max_relative_batched(tape, &x_in, &tables)?
    };
    let head_tensors: Vec<&Tensor<T>> = p.heads.iter().map(|id| st.bound.get(*id)).collect();
    let g = multi_head_update(tape, &agg, &head_tensors)?;
    let act = tape.gelu(&g)?;
    let out = tape.matmul(&act, st.bound.get(p.w_out))?;
    let out = bn_forward(tape, st, &out, &p.bn_out)?;
    tape.add(&out, x)
}

/// Two-layer feed-forward block with hidden width E*D: linear, batch
/// norm, GELU, linear, batch norm, residual.
pub fn ffn_forward<T: Scalar>(
    tape: &mut Tape<T>,
    st: &mut ForwardState<'_, T>,
    x: &Tensor<T>,
    p: &FfnParams,
) -> Result<Tensor<T>> {
    let h = tape.matmul(x, st.bound.get(p.w1))?;
    let h = tape.add(&h, st.bound.get(p.b1))?;
    let h = bn_forward(tape, st, &h, &p.bn1)?;
    let h = tape.gelu(&h)?;
    let o = tape.matmul(&h, st.bound.get(p.w2))?;
    let o = tape.add(&o, st.bound.get(p.b2))?;
    let o = bn_forward(tape, st, &o, &p.bn2)?;
    tape.add(&o, x)
}

/// Strided 3x3 convolution halving the spatial extent and changing the
/// channel count, followed by batch norm. Input and output are node
/// matrices; returns the new spatial extents.
pub fn downsample_forward<T: Scalar>(
    tape: &mut Tape<T>,
    st: &mut ForwardState<'_, T>,
    x: &Tensor<T>,
    batch: usize,
    h: usize,
    w: usize,
    p: &DownsampleParams,
) -> Result<(Tensor<T>, usize, usize)> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("downsample", format!("spatial extents {}x{} must be even", h, w)));
    }
    let img = nodes_to_nchw(tape, x, batch, h, w)?;
    let y = tape.conv2d(&img, st.bound.get(p.conv.w), Some(st.bound.get(p.conv.b)), p.conv.stride, p.conv.padding)?;
    let y = bn_nchw(tape, st, &y, &p.bn)?;
    let (h2, w2) = (y.shape()[2], y.shape()[3]);
    let nodes = nchw_to_nodes(tape, &y)?;
    Ok((nodes, h2, w2))
}
