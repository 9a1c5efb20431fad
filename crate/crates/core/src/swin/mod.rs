//! Transformer branch: a SwinV2 encoder feeding a UNET-style SCSE decoder.
//!
//! Token grids are kept as `[B, H, W, C]` inside the encoder; skips leave the
//! encoder as NCHW feature maps for the convolutional decoder.

mod attention;
mod decoder;

pub use attention::{
    attention_specs, block_specs, cosine_window_attention, merge_specs, mlp_hidden, patch_merge,
    relative_position_index, scaled_cosine_probs, shifted_window_mask, swinv2_block, window_partition,
    window_reverse, BlockGeom, MASK_VALUE,
};
pub use decoder::{decoder_block, decoder_block_specs, scse, scse_specs};

use serde::{Deserialize, Serialize};

use crate::error::{NnError, NnResult};
use crate::params::{Binder, Init, ParamSpec};
use crate::tensor::conv::conv2d;
use crate::tensor::ops::permute;
use crate::tensor::{Scalar, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwinConfig {
    pub img_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub num_heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: f64,
    pub tau_min: f64,
    /// Output widths of the decoder blocks, deepest first.
    pub decoder_channels: Vec<usize>,
    pub scse_reduction: usize,
    pub norm_groups: usize,
}

impl SwinConfig {
    /// SwinV2-Base shaped encoder at 384² input.
    pub fn base() -> Self {
        Self {
            img_size: 384,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 128,
            depths: vec![2, 2, 18, 2],
            num_heads: vec![4, 8, 16, 32],
            window_size: 12,
            mlp_ratio: 4.0,
            tau_min: 0.01,
            decoder_channels: vec![512, 256, 64],
            scse_reduction: 16,
            norm_groups: 32,
        }
    }

    /// Two-stage, 8-channel encoder at 64² input.
    pub fn toy() -> Self {
        Self {
            img_size: 64,
            patch_size: 4,
            in_channels: 3,
            embed_dim: 8,
            depths: vec![1, 1],
            num_heads: vec![1, 2],
            window_size: 4,
            mlp_ratio: 4.0,
            tau_min: 0.01,
            decoder_channels: vec![8],
            scse_reduction: 2,
            norm_groups: 4,
        }
    }

    pub fn num_stages(&self) -> usize {
        self.depths.len()
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.embed_dim << stage
    }

    pub fn stage_grid(&self, stage: usize) -> usize {
        (self.img_size / self.patch_size) >> stage
    }

    /// Window side used in `stage`: the configured size, capped at the grid.
    pub fn stage_window(&self, stage: usize) -> usize {
        self.window_size.min(self.stage_grid(stage))
    }

    /// Odd blocks are shifted by half a window when the grid holds more than one window.
    pub fn block_geom(&self, stage: usize, block: usize) -> BlockGeom {
        let window = self.stage_window(stage);
        let shift = if block % 2 == 1 && self.stage_grid(stage) > window { window / 2 } else { 0 };
        BlockGeom { heads: self.num_heads[stage], window, shift }
    }

    /// Channels of the branch output.
    pub fn out_channels(&self) -> usize {
        *self.decoder_channels.last().unwrap_or(&self.stage_channels(0))
    }

    /// Spatial size of the branch output.
    pub fn out_size(&self) -> usize {
        self.stage_grid(0)
    }

    pub fn validate(&self) -> NnResult<()> {
        let bad = |m: String| Err(NnError::InvalidConfig(m));
        if self.patch_size == 0 || !self.img_size.is_multiple_of(self.patch_size) {
            return Err(NnError::IndivisibleInput {
                height: self.img_size,
                width: self.img_size,
                patch: self.patch_size,
            });
        }
        if self.depths.len() != self.num_heads.len() {
            return bad(format!("{} depths but {} head counts", self.depths.len(), self.num_heads.len()));
        }
        let stages = self.num_stages();
        if stages < 2 {
            return bad("at least two encoder stages are required".into());
        }
        if self.depths.contains(&0) || self.embed_dim == 0 || self.window_size == 0 {
            return bad("depths, embed_dim and window_size must be positive".into());
        }
        if self.decoder_channels.len() != stages - 1 {
            return bad(format!("{} stages need {} decoder widths", stages, stages - 1));
        }
        if !(self.mlp_ratio > 0.0) || !(self.tau_min > 0.0) {
            return bad("mlp_ratio and tau_min must be positive".into());
        }
        let grid0 = self.stage_grid(0);
        if !grid0.is_multiple_of(1 << (stages - 1)) {
            return Err(NnError::OddDimensions { height: grid0, width: grid0 });
        }
        for s in 0..stages {
            let (c, h) = (self.stage_channels(s), self.num_heads[s]);
            if h == 0 || c % h != 0 {
                return Err(NnError::HeadDivisibility { channels: c, heads: h });
            }
            let (g, w) = (self.stage_grid(s), self.stage_window(s));
            if g % w != 0 {
                return Err(NnError::IndivisibleFeatureMap { height: g, width: g, window: w });
            }
        }
        if self.scse_reduction == 0 {
            return bad("scse_reduction must be at least 1".into());
        }
        for &c in &self.decoder_channels {
            if c < self.scse_reduction {
                return Err(NnError::ChannelTooSmall { channels: c, reduction: self.scse_reduction });
            }
        }
        Ok(())
    }

    /// Every parameter of the branch under `prefix`.
    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let mut specs = patch_embed_specs(&format!("{prefix}.patch_embed"), self.in_channels, self.embed_dim, self.patch_size);
        for s in 0..self.num_stages() {
            let stage = format!("{prefix}.stages.{s}");
            if s > 0 {
                specs.extend(merge_specs(&format!("{stage}.merge"), self.stage_channels(s - 1)));
            }
            for b in 0..self.depths[s] {
                let g = self.block_geom(s, b);
                specs.extend(block_specs(&format!("{stage}.blocks.{b}"), self.stage_channels(s), g.heads, g.window, self.mlp_ratio));
            }
        }
        let stages = self.num_stages();
        let mut prev = self.stage_channels(stages - 1);
        for (k, &out) in self.decoder_channels.iter().enumerate() {
            let skip = self.stage_channels(stages - 2 - k);
            specs.extend(decoder_block_specs(&format!("{prefix}.decoder.{k}"), prev, skip, out, self.scse_reduction));
            prev = out;
        }
        specs
    }
}

pub fn patch_embed_specs(prefix: &str, in_channels: usize, dim: usize, patch: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.proj.weight"), &[dim, in_channels, patch, patch], Init::TruncNormal(0.02)),
        ParamSpec::new(format!("{prefix}.proj.bias"), &[dim], Init::Zeros),
    ]
}

/// Linear projection of non-overlapping `patch×patch` tiles of an NCHW image
/// into a `[B, H/patch, W/patch, C]` token grid.
pub fn patch_embed<T: Scalar>(params: &Binder<'_, T>, prefix: &str, image: &Var<T>, patch: usize) -> NnResult<Var<T>> {
    let &[_, c, h, w] = image.shape() else {
        return Err(NnError::InvalidConfig(format!("patch_embed expects NCHW, got {:?}", image.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(NnError::IndivisibleInput { height: h, width: w, patch });
    }
    let weight = params.param(&format!("{prefix}.proj.weight"))?;
    if weight.shape()[1] != c {
        return Err(NnError::ChannelMismatch { expected: weight.shape()[1], found: c });
    }
    let bias = params.param(&format!("{prefix}.proj.bias"))?;
    let y = conv2d(image, &weight, Some(&bias), patch, 0);
    Ok(permute(&y, &[0, 2, 3, 1]))
}

/// Per-stage encoder outputs (NCHW) and the deepest one.
pub struct EncoderOutput<T: Scalar> {
    pub skips: Vec<Var<T>>,
    pub bottleneck: Var<T>,
}

pub fn encoder_forward<T: Scalar>(
    params: &Binder<'_, T>,
    prefix: &str,
    cfg: &SwinConfig,
    image: &Var<T>,
) -> NnResult<EncoderOutput<T>> {
    let mut x = patch_embed(params, &format!("{prefix}.patch_embed"), image, cfg.patch_size)?;
    let mut skips = Vec::with_capacity(cfg.num_stages());
    for s in 0..cfg.num_stages() {
        let stage = format!("{prefix}.stages.{s}");
        if s > 0 {
            x = patch_merge(params, &format!("{stage}.merge"), &x)?;
        }
        for b in 0..cfg.depths[s] {
            x = swinv2_block(params, &format!("{stage}.blocks.{b}"), &x, cfg.block_geom(s, b), cfg.tau_min)?;
        }
        skips.push(permute(&x, &[0, 3, 1, 2]));
    }
    let bottleneck = skips.last().expect("at least one stage").clone();
    Ok(EncoderOutput { skips, bottleneck })
}

/// Full transformer branch: `[B, 3, S, S]` → `[B, C_tb, S/4, S/4]`.
pub fn tb_forward<T: Scalar>(params: &Binder<'_, T>, prefix: &str, cfg: &SwinConfig, image: &Var<T>) -> NnResult<Var<T>> {
    let enc = encoder_forward(params, prefix, cfg, image)?;
    let stages = enc.skips.len();
    let mut x = enc.bottleneck;
    for k in 0..cfg.decoder_channels.len() {
        let skip = &enc.skips[stages - 2 - k];
        x = decoder_block(params, &format!("{prefix}.decoder.{k}"), &x, skip, cfg.norm_groups, cfg.scse_reduction)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn presets_validate() {
        SwinConfig::base().validate().unwrap();
        SwinConfig::toy().validate().unwrap();
    }

    #[test]
    fn base_geometry() {
        let cfg = SwinConfig::base();
        let grids: Vec<_> = (0..4).map(|s| (cfg.stage_grid(s), cfg.stage_channels(s))).collect();
        assert_eq!(grids, vec![(96, 128), (48, 256), (24, 512), (12, 1024)]);
        assert_eq!(cfg.block_geom(3, 1).shift, 0);
        assert_eq!(cfg.block_geom(0, 1).shift, 6);
    }

    #[test]
    fn toy_shapes() {
        let cfg = SwinConfig::toy();
        let store = ParamStore::<f64>::init(&cfg.param_specs("swin"), 1).unwrap();
        let b = Binder::inference(&store);
        let img = Var::constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 64, 64]), |i| ((i[1] + i[2] * 3 + i[3]) % 7) as f64 * 0.1));
        let enc = encoder_forward(&b, "swin", &cfg, &img).unwrap();
        assert_eq!(enc.skips[0].shape(), &[2, 8, 16, 16]);
        assert_eq!(enc.skips[1].shape(), &[2, 16, 8, 8]);
        let y = tb_forward(&b, "swin", &cfg, &img).unwrap();
        assert_eq!(y.shape(), &[2, 8, 16, 16]);
    }

    #[test]
    fn indivisible_image_is_rejected() {
        let store = ParamStore::<f64>::init(&patch_embed_specs("p", 3, 4, 4), 0).unwrap();
        let img = Var::constant(ArrayD::zeros(IxDyn(&[1, 3, 10, 12])));
        assert!(matches!(
            patch_embed(&Binder::inference(&store), "p", &img, 4),
            Err(NnError::IndivisibleInput { height: 10, width: 12, patch: 4 })
        ));
    }
}
