//! Analytic multiply-accumulate counts for the video side of the model.
//!
//! Per transformer layer over `S` tokens of width `d`: attention costs
//! `2*S^2*d + 4*S*d^2` and the MLP `2*r*S*d^2` (`8*S*d^2` at ratio 4).
//! A pooler with `q` queries over `S` tokens costs `2*q*S*d` for scores and
//! mixing plus `2*q*d^2 + 2*S*d^2` for its projections.

use super::config::{AdaptorMode, ModelConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FlopBreakdown {
    pub patch_embed: u64,
    pub encoder: u64,
    pub gen_pooler: u64,
    pub con_pooler: u64,
    pub temporal: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.encoder + self.gen_pooler + self.con_pooler + self.temporal
    }

    pub fn adaptor(&self) -> u64 {
        self.gen_pooler + self.con_pooler + self.temporal
    }
}

pub fn attention_layer(s: u64, d: u64) -> u64 {
    2 * s * s * d + 4 * s * d * d
}

pub fn mlp_layer(s: u64, d: u64, ratio: u64) -> u64 {
    2 * ratio * s * d * d
}

pub fn transformer_layer(s: u64, d: u64, ratio: u64) -> u64 {
    attention_layer(s, d) + mlp_layer(s, d, ratio)
}

pub fn pooler(queries: u64, s: u64, d: u64) -> u64 {
    2 * queries * s * d + 2 * queries * d * d + 2 * s * d * d
}

/// Cost of encoding and pooling one clip of `frames` frames.
pub fn estimate_flops(c: &ModelConfig, frames: usize) -> FlopBreakdown {
    let t = frames as u64;
    let n = c.num_patches() as u64;
    let d = c.width as u64;
    let r = c.mlp_ratio as u64;
    let l = c.encoder_depth as u64;
    let nq = c.n_query_gen as u64;
    let nc = c.n_query_con as u64;
    let patch_embed = t * n * c.patch_dim() as u64 * d;
    let per_frame_encoder = t * l * transformer_layer(n, d, r);
    match c.adaptor {
        AdaptorMode::AttentionalPooler => FlopBreakdown {
            patch_embed,
            encoder: per_frame_encoder,
            gen_pooler: pooler(nq, t * n, d),
            con_pooler: pooler(nc, t * n, d),
            temporal: 0,
        },
        AdaptorMode::MeanPooling => FlopBreakdown {
            patch_embed,
            encoder: per_frame_encoder,
            gen_pooler: t * pooler(nq, n, d),
            con_pooler: t * pooler(nc, n, d),
            temporal: 0,
        },
        AdaptorMode::FactorizedEncoder => FlopBreakdown {
            patch_embed,
            encoder: per_frame_encoder,
            gen_pooler: 0,
            con_pooler: t * pooler(nc, n, d),
            temporal: c.temporal_depth as u64 * transformer_layer(t, d, r),
        },
        AdaptorMode::JointSpaceTime => FlopBreakdown {
            patch_embed,
            encoder: l * transformer_layer(t * n, d, r),
            gen_pooler: pooler(nq, t * n, d),
            con_pooler: pooler(nc, t * n, d),
            temporal: 0,
        },
    }
}
