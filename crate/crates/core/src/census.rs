//! Parameter and FLOP accounting for a model configuration.
//!
//! Parameters count trainable scalars only (batch-norm running statistics
//! are state, not parameters). FLOPs are 2 x multiply-accumulates for one
//! image at the configured extent, and include the per-forward KNN
//! distance computation. Additions that are not part of a
//! multiply-accumulate (biases, residuals, positional embedding),
//! normalization, activations, pooling, softmax, and gather/max
//! selections are excluded from the count; distance-sort comparisons are
//! likewise not FLOPs.

use crate::error::Result;
use crate::model::{HeadKind, ModelConfig};

#[derive(Debug, Clone)]
pub struct CensusRow {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone)]
pub struct Census {
    pub rows: Vec<CensusRow>,
    pub params_total: usize,
    pub flops_total: u64,
}

impl Census {
    pub fn row(&self, name: &str) -> Option<&CensusRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

fn conv3x3(c_in: usize, c_out: usize, out_spatial: usize) -> (usize, u64) {
    let params = c_out * c_in * 9 + c_out;
    let macs = (c_in * 9 * c_out * out_spatial) as u64;
    (params, 2 * macs)
}

fn bn_params(c: usize) -> usize {
    2 * c
}

pub fn count_params_flops(config: &ModelConfig) -> Result<Census> {
    config.validate()?;
    let mut rows = Vec::new();
    let mut push = |name: String, params: usize, flops: u64| rows.push(CensusRow { name, params, flops });

    let d1 = config.stages[0].dim;
    let mid = d1 / 2;
    let img = config.image;
    // Stem convs produce H/2, H/4, H/4 grids.
    let (p1, f1) = conv3x3(config.in_channels, mid, (img / 2) * (img / 2));
    let (p2, f2) = conv3x3(mid, d1, (img / 4) * (img / 4));
    let (p3, f3) = conv3x3(d1, d1, (img / 4) * (img / 4));
    let stem_params = p1 + p2 + p3 + bn_params(mid) + 2 * bn_params(d1);
    push("stem".to_string(), stem_params, f1 + f2 + f3);

    if config.pos_embed {
        let n1 = config.stage_spatial(0) * config.stage_spatial(0);
        push("pos_embed".to_string(), n1 * d1, 0);
    }

    let h = config.heads;
    for (s, st) in config.stages.iter().enumerate() {
        let d = st.dim;
        let n = config.stage_spatial(s) * config.stage_spatial(s);
        let e = config.ffn_ratio * d;
        // Grapher: in/out projections, per-head updates on the doubled
        // features, two norms.
        let grapher_params = 2 * d * d + (2 * d / h) * (d / h) * h + 2 * bn_params(d);
        let proj_macs = (n * d * d) as u64;
        let knn_macs = (n * n * d) as u64;
        let head_macs = (n * 2 * d * d / h) as u64;
        let grapher_flops = 2 * (2 * proj_macs + knn_macs + head_macs);
        // FFN: two biased linears and two norms.
        let ffn_params = d * e + e + e * d + d + bn_params(e) + bn_params(d);
        let ffn_flops = 2 * (2 * n * d * e) as u64;
        let block_params = grapher_params + ffn_params;
        let block_flops = grapher_flops + ffn_flops;
        push(
            format!("stage{}", s + 1),
            st.depth * block_params,
            st.depth as u64 * block_flops,
        );
        if s + 1 < config.stages.len() {
            let next = config.stages[s + 1].dim;
            let n_next = config.stage_spatial(s + 1) * config.stage_spatial(s + 1);
            let (cp, cf) = conv3x3(d, next, n_next);
            push(format!("down{}", s + 1), cp + bn_params(next), cf);
        }
    }

    let last = config.stages.last().expect("non-empty").dim;
    match config.head {
        HeadKind::Capsule => {
            let pcd = config.primary_caps_dim;
            let types = last / pcd;
            let n_last = config.stage_spatial(config.stages.len() - 1);
            let m = types * n_last * n_last;
            let (c, cd) = (config.classes, config.capsule_dim);
            let params = types * c * pcd * cd;
            let pred_macs = (m * c * pcd * cd) as u64;
            // Per routing iteration: coupling-weighted vote sum and the
            // agreement dot products.
            let routing_macs = (config.routing_iters * 2 * m * c * cd) as u64;
            push("head".to_string(), params, 2 * (pred_macs + routing_macs));
        }
        HeadKind::Pooling => {
            let hid = config.pooling_hidden;
            let params = last * hid + hid + hid * config.classes + config.classes;
            let macs = (last * hid + hid * config.classes) as u64;
            push("head".to_string(), params, 2 * macs);
        }
    }

    let params_total = rows.iter().map(|r| r.params).sum();
    let flops_total = rows.iter().map(|r| r.flops).sum();
    Ok(Census { rows, params_total, flops_total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Model, StageConfig};

    fn check_against_built_model(cfg: &ModelConfig) {
        let census = count_params_flops(cfg).unwrap();
        let model = Model::<f64>::new(cfg.clone(), 0).unwrap();
        assert_eq!(
            census.params_total as u64,
            model.params().count_scalars(true),
            "census disagrees with the built parameter set for {cfg:?}"
        );
    }

    #[test]
    fn params_match_built_models() {
        check_against_built_model(&ModelConfig::micro());
        check_against_built_model(&ModelConfig::tiny());
        let mut pool = ModelConfig::micro();
        pool.head = HeadKind::Pooling;
        check_against_built_model(&pool);
        let mut pool = ModelConfig::tiny();
        pool.head = HeadKind::Pooling;
        check_against_built_model(&pool);
    }

    #[test]
    fn hand_computed_single_stage_census() {
        // One stage, dim 8, depth 1, 2 heads, 32x32 input, no positional
        // embedding, pooling head with hidden 4 and 2 classes. All values
        // below are pencil-and-paper.
        let cfg = ModelConfig {
            image: 32,
            in_channels: 3,
            stages: vec![StageConfig { dim: 8, depth: 1 }],
            ffn_ratio: 4,
            k: 3,
            heads: 2,
            classes: 2,
            head: HeadKind::Pooling,
            pos_embed: false,
            primary_caps_dim: 8,
            capsule_dim: 8,
            routing_iters: 3,
            pooling_hidden: 4,
        };
        let census = count_params_flops(&cfg).unwrap();
        // Stem: (4*3*9+4) + (8*4*9+8) + (8*8*9+8) convs plus norms 8+16+16.
        assert_eq!(census.row("stem").unwrap().params, 112 + 296 + 584 + 40);
        // Stem flops: 2*(27*4*256 + 36*8*64 + 72*8*64).
        assert_eq!(census.row("stem").unwrap().flops, 55_296 + 36_864 + 73_728);
        // Block: grapher 64+16+64+64+16 = 224, ffn 256+32+64+256+8+16 = 632.
        assert_eq!(census.row("stage1").unwrap().params, 856);
        // Grapher flops at N=64: 2*(2*4096 + 32768 + 4096) = 90112;
        // FFN: 2*2*64*8*32 = 65536.
        assert_eq!(census.row("stage1").unwrap().flops, 90_112 + 65_536);
        assert_eq!(census.row("head").unwrap().params, 46);
        assert_eq!(census.row("head").unwrap().flops, 80);
        assert_eq!(census.params_total, 1032 + 856 + 46);
        assert_eq!(census.flops_total, 165_888 + 155_648 + 80);
        check_against_built_model(&cfg);
    }

    #[test]
    fn full_width_config_direction_checks() {
        let caps = count_params_flops(&ModelConfig::tiny()).unwrap();
        let mut pool_cfg = ModelConfig::tiny();
        pool_cfg.head = HeadKind::Pooling;
        let pool = count_params_flops(&pool_cfg).unwrap();
        assert!(caps.params_total < pool.params_total);
        assert!(caps.flops_total > pool.flops_total);
    }

    #[test]
    fn capsule_head_flops_include_routing() {
        let three = count_params_flops(&ModelConfig::tiny()).unwrap();
        let mut more = ModelConfig::tiny();
        more.routing_iters = 5;
        let five = count_params_flops(&more).unwrap();
        assert!(five.flops_total > three.flops_total);
        assert_eq!(five.params_total, three.params_total);
    }

    #[test]
    fn depth_scales_stage_rows() {
        let base = count_params_flops(&ModelConfig::micro()).unwrap();
        let mut deeper = ModelConfig::micro();
        deeper.stages[1].depth = 4;
        let big = count_params_flops(&deeper).unwrap();
        assert_eq!(big.row("stage2").unwrap().params, 2 * base.row("stage2").unwrap().params);
        assert_eq!(big.row("stage2").unwrap().flops, 2 * base.row("stage2").unwrap().flops);
        check_against_built_model(&deeper);
    }
}
