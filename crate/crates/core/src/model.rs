//! Full model assembly: configuration, parameter construction, and the
//! end-to-end forward pass through stem, graph-convolution pyramid, and
//! classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    dilation_for_layer, downsample_forward, ffn_forward, grapher_forward, nchw_to_nodes,
    nodes_to_nchw, stem_forward, BnParams, ConvParams, DownsampleParams, FfnParams, ForwardState,
    GrapherParams, GraphPlan, Mode, StemParams,
};
use crate::capsule::{class_norms, dynamic_routing, primary_capsules, RoutingTrace};
use crate::error::{Error, Result};
use crate::params::{glorot_uniform, Bound, ParamId, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::{ReduceKind, Tape, Tensor};

/// Classification head variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Capsule,
    Pooling,
}

/// One pyramid stage: node feature width and number of grapher+FFN blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub dim: usize,
    pub depth: usize,
}

/// Architecture hyperparameters. `image` is the training-time square
/// input extent; with the positional embedding enabled the forward pass
/// requires exactly that extent, otherwise any extent divisible by
/// 4 * 2^(stages-1) works.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image: usize,
    pub in_channels: usize,
    pub stages: Vec<StageConfig>,
    pub ffn_ratio: usize,
    pub k: usize,
    pub heads: usize,
    pub classes: usize,
    pub head: HeadKind,
    pub pos_embed: bool,
    pub primary_caps_dim: usize,
    pub capsule_dim: usize,
    pub routing_iters: usize,
    pub pooling_hidden: usize,
}

impl ModelConfig {
    /// The full-size configuration: 256x256 inputs, stage dims
    /// 48/96/240/384 with two blocks each, K=9, 4 heads, 7 classes,
    /// capsule head with 16-dim class capsules.
    pub fn tiny() -> Self {
        ModelConfig {
            image: 256,
            in_channels: 3,
            stages: vec![
                StageConfig { dim: 48, depth: 2 },
                StageConfig { dim: 96, depth: 2 },
                StageConfig { dim: 240, depth: 2 },
                StageConfig { dim: 384, depth: 2 },
            ],
            ffn_ratio: 4,
            k: 9,
            heads: 4,
            classes: 7,
            head: HeadKind::Capsule,
            pos_embed: true,
            primary_caps_dim: 8,
            capsule_dim: 16,
            routing_iters: 3,
            pooling_hidden: 1024,
        }
    }

    /// A minutes-scale configuration for tests: 32x32 inputs, stage dims
    /// 8/16/24/32, K=3, 2 heads, 3 classes, 8-dim class capsules.
    pub fn micro() -> Self {
        ModelConfig {
            image: 32,
            in_channels: 3,
            stages: vec![
                StageConfig { dim: 8, depth: 2 },
                StageConfig { dim: 16, depth: 2 },
                StageConfig { dim: 24, depth: 2 },
                StageConfig { dim: 32, depth: 2 },
            ],
            ffn_ratio: 4,
            k: 3,
            heads: 2,
            classes: 3,
            head: HeadKind::Capsule,
            pos_embed: true,
            primary_caps_dim: 8,
            capsule_dim: 8,
            routing_iters: 3,
            pooling_hidden: 1024,
        }
    }

    /// Minimum divisor of the input extents: the stem reduces by 4 and
    /// each inter-stage downsample halves.
    pub fn spatial_divisor(&self) -> usize {
        4 << (self.stages.len().saturating_sub(1))
    }

    /// Node-grid side length at stage `s` (0-based) for the configured
    /// image extent.
    pub fn stage_spatial(&self, s: usize) -> usize {
        (self.image / 4) >> s
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.stages.is_empty() {
            return fail("at least one stage is required".to_string());
        }
        if self.in_channels == 0 {
            return fail("input channel count must be positive".to_string());
        }
        let div = self.spatial_divisor();
        if self.image == 0 || self.image % div != 0 {
            return fail(format!(
                "image extent {} must be a positive multiple of {} for {} stages",
                self.image,
                div,
                self.stages.len()
            ));
        }
        if self.stages[0].dim % 2 != 0 {
            return fail(format!("first stage dim {} must be even for the stem", self.stages[0].dim));
        }
        if self.heads == 0 {
            return fail("head count must be at least 1".to_string());
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.dim == 0 || st.depth == 0 {
                return fail(format!("stage {} needs positive dim and depth", i + 1));
            }
            if st.dim % self.heads != 0 {
                return fail(format!("stage {} dim {} is not divisible by {} heads", i + 1, st.dim, self.heads));
            }
        }
        if self.k == 0 {
            return fail("k must be at least 1".to_string());
        }
        if self.ffn_ratio == 0 {
            return fail("ffn ratio must be at least 1".to_string());
        }
        if self.classes < 2 {
            return fail(format!("need at least 2 classes, got {}", self.classes));
        }
        match self.head {
            HeadKind::Capsule => {
                let last = self.stages.last().expect("non-empty").dim;
                if self.primary_caps_dim == 0 || last % self.primary_caps_dim != 0 {
                    return fail(format!(
                        "final stage dim {} is not divisible by the primary capsule dim {}",
                        last, self.primary_caps_dim
                    ));
                }
                if self.capsule_dim == 0 {
                    return fail("class capsule dim must be positive".to_string());
                }
                if self.routing_iters == 0 {
                    return fail("routing iterations must be at least 1".to_string());
                }
            }
            HeadKind::Pooling => {
                if self.pooling_hidden == 0 {
                    return fail("pooling hidden width must be positive".to_string());
                }
            }
        }
        Ok(())
    }
}

/// One grapher + FFN block.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub grapher: GrapherParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone)]
pub enum HeadParams {
    Capsule { w: ParamId },
    Pooling { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
}

/// Head output. `scores` is the (B, classes) matrix predictions are read
/// from: capsule norms or logits.
pub enum HeadOut<T: Scalar> {
    Capsule { capsules: Tensor<T>, norms: Tensor<T>, trace: RoutingTrace<T> },
    Pooling { logits: Tensor<T> },
}

impl<T: Scalar> HeadOut<T> {
    pub fn scores(&self) -> &Tensor<T> {
        match self {
            HeadOut::Capsule { norms, .. } => norms,
            HeadOut::Pooling { logits } => logits,
        }
    }
}

pub struct ModelOutput<T: Scalar> {
    pub head: HeadOut<T>,
    /// Running-statistic writes queued by train-mode batch norms; apply
    /// to the parameter set after the step.
    pub bn_updates: Vec<(ParamId, Vec<T>)>,
}

pub struct Model<T: Scalar> {
    config: ModelConfig,
    params: ParamSet<T>,
    stem: StemParams,
    pos_embed: Option<ParamId>,
    stages: Vec<Vec<BlockParams>>,
    downs: Vec<DownsampleParams>,
    head: HeadParams,
}

struct Builder<'r, T: Scalar> {
    params: ParamSet<T>,
    rng: &'r mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn glorot(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Result<ParamId> {
        let t = glorot_uniform(shape, fan_in, fan_out, self.rng);
        self.params.add(name, t, true)
    }

    fn zeros(&mut self, name: &str, shape: Vec<usize>, trainable: bool) -> Result<ParamId> {
        self.params.add(name, Tensor::zeros(shape), trainable)
    }

    fn ones(&mut self, name: &str, shape: Vec<usize>, trainable: bool) -> Result<ParamId> {
        self.params.add(name, Tensor::full(shape, T::ONE), trainable)
    }

    fn bn(&mut self, prefix: &str, dim: usize) -> Result<BnParams> {
        Ok(BnParams {
            gamma: self.ones(&format!("{prefix}.gamma"), vec![dim], true)?,
            beta: self.zeros(&format!("{prefix}.beta"), vec![dim], true)?,
            running_mean: self.zeros(&format!("{prefix}.running_mean"), vec![dim], false)?,
            running_var: self.ones(&format!("{prefix}.running_var"), vec![dim], false)?,
        })
    }

    fn conv(&mut self, prefix: &str, c_in: usize, c_out: usize, stride: usize) -> Result<ConvParams> {
        let w = self.glorot(&format!("{prefix}.w"), vec![c_out, c_in, 3, 3], c_in * 9, c_out * 9)?;
        let b = self.zeros(&format!("{prefix}.b"), vec![c_out], true)?;
        Ok(ConvParams { w, b, stride, padding: 1 })
    }

    fn linear(&mut self, prefix: &str, rows: usize, cols: usize) -> Result<(ParamId, ParamId)> {
        let w = self.glorot(&format!("{prefix}.w"), vec![rows, cols], rows, cols)?;
        let b = self.zeros(&format!("{prefix}.b"), vec![cols], true)?;
        Ok((w, b))
    }
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model. Weights are Glorot-uniform
    /// draws from a ChaCha stream seeded by `seed`, in a fixed parameter
    /// order, so equal seeds give bitwise-equal models.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { params: ParamSet::new(), rng: &mut rng };

        let d1 = config.stages[0].dim;
        let stem_mid = d1 / 2;
        let chans = [(config.in_channels, stem_mid, 2usize), (stem_mid, d1, 2), (d1, d1, 1)];
        let mut stem_layers = Vec::with_capacity(3);
        for (i, &(ci, co, stride)) in chans.iter().enumerate() {
            let conv = b.conv(&format!("stem.conv{}", i + 1), ci, co, stride)?;
            let bn = b.bn(&format!("stem.bn{}", i + 1), co)?;
            stem_layers.push((conv, bn));
        }
        let stem = StemParams { layers: [stem_layers[0], stem_layers[1], stem_layers[2]] };

        let n1 = config.stage_spatial(0) * config.stage_spatial(0);
        let pos_embed = if config.pos_embed {
            Some(b.zeros("pos_embed", vec![n1, d1], true)?)
        } else {
            None
        };

        let mut stages = Vec::with_capacity(config.stages.len());
        let mut downs = Vec::new();
        for (s, st) in config.stages.iter().enumerate() {
            let d = st.dim;
            let mut blocks = Vec::with_capacity(st.depth);
            for i in 0..st.depth {
                let p = format!("stage{}.block{}", s + 1, i + 1);
                let w_in = b.glorot(&format!("{p}.grapher.w_in"), vec![d, d], d, d)?;
                let bn_in = b.bn(&format!("{p}.grapher.bn_in"), d)?;
                let (hin, hout) = (2 * d / config.heads, d / config.heads);
                let mut heads = Vec::with_capacity(config.heads);
                for j in 0..config.heads {
                    heads.push(b.glorot(&format!("{p}.grapher.head{}.w", j + 1), vec![hin, hout], hin, hout)?);
                }
                let w_out = b.glorot(&format!("{p}.grapher.w_out"), vec![d, d], d, d)?;
                let bn_out = b.bn(&format!("{p}.grapher.bn_out"), d)?;
                let grapher = GrapherParams { w_in, bn_in, heads, w_out, bn_out };

                let e = config.ffn_ratio * d;
                let (w1, b1) = b.linear(&format!("{p}.ffn.lin1"), d, e)?;
                let bn1 = b.bn(&format!("{p}.ffn.bn1"), e)?;
                let (w2, b2) = b.linear(&format!("{p}.ffn.lin2"), e, d)?;
                let bn2 = b.bn(&format!("{p}.ffn.bn2"), d)?;
                let ffn = FfnParams { w1, b1, bn1, w2, b2, bn2 };
                blocks.push(BlockParams { grapher, ffn });
            }
            stages.push(blocks);
            if s + 1 < config.stages.len() {
                let next = config.stages[s + 1].dim;
                let conv = b.conv(&format!("down{}.conv", s + 1), d, next, 2)?;
                let bn = b.bn(&format!("down{}.bn", s + 1), next)?;
                downs.push(DownsampleParams { conv, bn });
            }
        }

        let last = config.stages.last().expect("non-empty").dim;
        let head = match config.head {
            HeadKind::Capsule => {
                let types = last / config.primary_caps_dim;
                let w = b.glorot(
                    "head.caps.w",
                    vec![types, config.classes, config.primary_caps_dim, config.capsule_dim],
                    config.primary_caps_dim,
                    config.capsule_dim,
                )?;
                HeadParams::Capsule { w }
            }
            HeadKind::Pooling => {
                let (w1, b1) = b.linear("head.pool.lin1", last, config.pooling_hidden)?;
                let (w2, b2) = b.linear("head.pool.lin2", config.pooling_hidden, config.classes)?;
                HeadParams::Pooling { w1, b1, w2, b2 }
            }
        };

        Ok(Model { config, params: b.params, stem, pos_embed, stages, downs, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn head_params(&self) -> &HeadParams {
        &self.head
    }

    fn check_input(&self, images: &Tensor<T>) -> Result<(usize, usize, usize)> {
        if images.rank() != 4 {
            return Err(Error::shape("model", format!("expected rank-4 image batch, got {:?}", images.shape())));
        }
        let (b, c, h, w) = (images.shape()[0], images.shape()[1], images.shape()[2], images.shape()[3]);
        if c != self.config.in_channels {
            return Err(Error::shape(
                "model",
                format!("expected {} input channels, got {}", self.config.in_channels, c),
            ));
        }
        if b == 0 {
            return Err(Error::shape("model", "empty batch".to_string()));
        }
        let div = self.config.spatial_divisor();
        if h % div != 0 || w % div != 0 || h == 0 || w == 0 {
            return Err(Error::shape(
                "model",
                format!("spatial extents {}x{} must be positive multiples of {}", h, w, div),
            ));
        }
        if self.pos_embed.is_some() && (h != self.config.image || w != self.config.image) {
            return Err(Error::shape(
                "model",
                format!(
                    "positional embedding is sized for {0}x{0} inputs, got {1}x{2}",
                    self.config.image, h, w
                ),
            ));
        }
        Ok((b, h, w))
    }

    /// Backbone forward pass to the final node matrix; returns the nodes
    /// (B*H_s*W_s) x D_last and the final grid extents.
    fn backbone_nodes(
        &self,
        tape: &mut Tape<T>,
        st: &mut ForwardState<'_, T>,
        images: &Tensor<T>,
    ) -> Result<(Tensor<T>, usize, usize)> {
        let (batch, hin, win) = self.check_input(images)?;
        let f = stem_forward(tape, st, images, &self.stem)?;
        let (mut h, mut w) = (hin / 4, win / 4);
        let mut x = nchw_to_nodes(tape, &f)?;
        if let Some(pe) = self.pos_embed {
            let d1 = self.config.stages[0].dim;
            let grid = tape.reshape(&x, vec![batch, h * w, d1])?;
            let shifted = tape.add(&grid, st.bound.get(pe))?;
            x = tape.reshape(&shifted, vec![batch * h * w, d1])?;
        }
        let mut layer = 0usize;
        for (s, blocks) in self.stages.iter().enumerate() {
            for blk in blocks {
                layer += 1;
                let dilation = dilation_for_layer(layer);
                x = grapher_forward(tape, st, &x, &blk.grapher, batch, h * w, self.config.k, dilation)?;
                x = ffn_forward(tape, st, &x, &blk.ffn)?;
            }
            if s < self.downs.len() {
                let (y, nh, nw) = downsample_forward(tape, st, &x, batch, h, w, &self.downs[s])?;
                x = y;
                h = nh;
                w = nw;
            }
        }
        Ok((x, h, w))
    }

    /// Backbone features as B x D_last x H_s x W_s.
    pub fn backbone_features(
        &self,
        tape: &mut Tape<T>,
        st: &mut ForwardState<'_, T>,
        images: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let batch = images.shape().first().copied().unwrap_or(0);
        let (x, h, w) = self.backbone_nodes(tape, st, images)?;
        nodes_to_nchw(tape, &x, batch, h, w)
    }

    /// Full forward pass. Train mode uses batch statistics in the norms
    /// and reports running-stat updates in the output; eval mode uses the
    /// stored running statistics and reports none.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound<T>,
        images: &Tensor<T>,
        mode: Mode,
        plan: &mut GraphPlan,
    ) -> Result<ModelOutput<T>> {
        let mut st = ForwardState::new(bound, mode, plan);
        let feats = self.backbone_features(tape, &mut st, images)?;
        let head = match &self.head {
            HeadParams::Capsule { w } => {
                let u = primary_capsules(tape, &feats, self.config.primary_caps_dim)?;
                let u_hat = tape.caps_predict(&u, st.bound.get(*w))?;
                let (capsules, trace) = dynamic_routing(tape, &u_hat, self.config.routing_iters)?;
                let norms = class_norms(tape, &capsules)?;
                HeadOut::Capsule { capsules, norms, trace }
            }
            HeadParams::Pooling { w1, b1, w2, b2 } => {
                let (b, d) = (feats.shape()[0], feats.shape()[1]);
                let (h, w) = (feats.shape()[2], feats.shape()[3]);
                let nodes = nchw_to_nodes(tape, &feats)?;
                let grid = tape.reshape(&nodes, vec![b, h * w, d])?;
                let pooled = tape.reduce(ReduceKind::Mean, &grid, &[1])?;
                let z = tape.matmul(&pooled, st.bound.get(*w1))?;
                let z = tape.add(&z, st.bound.get(*b1))?;
                let z = tape.gelu(&z)?;
                let logits = tape.matmul(&z, st.bound.get(*w2))?;
                let logits = tape.add(&logits, st.bound.get(*b2))?;
                HeadOut::Pooling { logits }
            }
        };
        Ok(ModelOutput { head, bn_updates: std::mem::take(&mut st.bn_updates) })
    }
}
