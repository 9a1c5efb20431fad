//! Fully convolutional branch: a full-resolution encoder/decoder of residual
//! blocks that normalize after each convolution.

use serde::{Deserialize, Serialize};

use crate::error::{NnError, NnResult};
use crate::params::{Binder, Init, ParamSpec};
use crate::tensor::conv::conv2d;
use crate::tensor::interp::resize_bilinear;
use crate::tensor::norm::{group_count, group_norm};
use crate::tensor::ops::{add, concat, relu};
use crate::tensor::{Scalar, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FcbConfig {
    pub in_channels: usize,
    /// Channel width of each encoder stage, shallowest first.
    pub widths: Vec<usize>,
    pub blocks_per_stage: usize,
    /// Requested group-norm groups; reduced to a divisor of each width.
    pub groups: usize,
    pub out_channels: usize,
}

impl FcbConfig {
    pub fn base() -> Self {
        Self { in_channels: 3, widths: vec![64, 128, 256], blocks_per_stage: 2, groups: 32, out_channels: 64 }
    }

    pub fn toy() -> Self {
        Self { in_channels: 3, widths: vec![8, 16], blocks_per_stage: 1, groups: 4, out_channels: 8 }
    }

    pub fn num_stages(&self) -> usize {
        self.widths.len()
    }

    pub fn validate(&self) -> NnResult<()> {
        if self.widths.len() < 2 || self.blocks_per_stage == 0 {
            return Err(NnError::InvalidConfig("the FCB needs at least two stages with one block each".into()));
        }
        if self.widths.iter().chain([&self.out_channels, &self.in_channels]).any(|&w| w == 0) || self.groups == 0 {
            return Err(NnError::InvalidConfig("FCB widths and groups must be positive".into()));
        }
        Ok(())
    }

    /// Input sides must be divisible by this factor.
    pub fn size_multiple(&self) -> usize {
        1 << (self.num_stages() - 1)
    }

    fn decoder_out(&self, stage: usize) -> usize {
        if stage == 0 {
            self.out_channels
        } else {
            self.widths[stage]
        }
    }

    pub fn param_specs(&self, prefix: &str) -> Vec<ParamSpec> {
        let w = &self.widths;
        let mut specs = conv_specs(&format!("{prefix}.stem"), self.in_channels, w[0], 3);
        for s in 0..w.len() {
            if s > 0 {
                specs.extend(conv_specs(&format!("{prefix}.down.{s}"), w[s - 1], w[s], 3));
            }
            for b in 0..self.blocks_per_stage {
                specs.extend(residual_block_specs(&format!("{prefix}.enc.{s}.{b}"), w[s], w[s]));
            }
        }
        for s in (0..w.len() - 1).rev() {
            let out = self.decoder_out(s);
            for b in 0..self.blocks_per_stage {
                let cin = if b == 0 { w[s + 1] + w[s] } else { out };
                specs.extend(residual_block_specs(&format!("{prefix}.dec.{s}.{b}"), cin, out));
            }
        }
        specs
    }
}

fn conv_specs(prefix: &str, cin: usize, cout: usize, k: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.weight"), &[cout, cin, k, k], Init::TruncNormal(0.02)),
        ParamSpec::new(format!("{prefix}.bias"), &[cout], Init::Zeros),
    ]
}

/// Parameters of one residual block; the 1×1 projection exists only when the
/// channel count changes.
pub fn residual_block_specs(prefix: &str, in_channels: usize, out_channels: usize) -> Vec<ParamSpec> {
    let mut specs = conv_specs(&format!("{prefix}.conv1"), in_channels, out_channels, 3);
    specs.extend([
        ParamSpec::new(format!("{prefix}.norm1.weight"), &[out_channels], Init::Ones),
        ParamSpec::new(format!("{prefix}.norm1.bias"), &[out_channels], Init::Zeros),
    ]);
    specs.extend(conv_specs(&format!("{prefix}.conv2"), out_channels, out_channels, 3));
    specs.extend([
        ParamSpec::new(format!("{prefix}.norm2.weight"), &[out_channels], Init::Ones),
        ParamSpec::new(format!("{prefix}.norm2.bias"), &[out_channels], Init::Zeros),
    ]);
    if in_channels != out_channels {
        specs.extend(conv_specs(&format!("{prefix}.proj"), in_channels, out_channels, 1));
    }
    specs
}

/// `y = proj(x) + GN₂(conv₂(relu(GN₁(conv₁(relu(x))))))` with `proj` the
/// identity when channels are unchanged.
pub fn residual_block_postnorm<T: Scalar>(
    params: &Binder<'_, T>,
    prefix: &str,
    x: &Var<T>,
    groups: usize,
) -> NnResult<Var<T>> {
    let p = |n: &str| params.param(&format!("{prefix}.{n}"));
    let w1 = p("conv1.weight")?;
    let (out, cin) = (w1.shape()[0], w1.shape()[1]);
    if x.ndim() != 4 || x.shape()[1] != cin {
        return Err(NnError::ChannelMismatch { expected: cin, found: x.shape().get(1).copied().unwrap_or(0) });
    }
    let g = group_count(out, groups);
    let h = conv2d(&relu(x), &w1, Some(&p("conv1.bias")?), 1, 1);
    let h = relu(&group_norm(&h, g, &p("norm1.weight")?, &p("norm1.bias")?));
    let h = conv2d(&h, &p("conv2.weight")?, Some(&p("conv2.bias")?), 1, 1);
    let h = group_norm(&h, g, &p("norm2.weight")?, &p("norm2.bias")?);
    let shortcut = if cin != out { conv2d(x, &p("proj.weight")?, Some(&p("proj.bias")?), 1, 0) } else { x.clone() };
    Ok(add(&shortcut, &h))
}

/// `[B, 3, H, W]` → `[B, out_channels, H, W]`.
pub fn fcb_forward<T: Scalar>(params: &Binder<'_, T>, prefix: &str, cfg: &FcbConfig, image: &Var<T>) -> NnResult<Var<T>> {
    let &[_, c, h, w] = image.shape() else {
        return Err(NnError::InvalidConfig(format!("fcb_forward expects NCHW, got {:?}", image.shape())));
    };
    if c != cfg.in_channels {
        return Err(NnError::ChannelMismatch { expected: cfg.in_channels, found: c });
    }
    let m = cfg.size_multiple();
    if h % m != 0 || w % m != 0 {
        return Err(NnError::ConfigMismatch(format!("FCB input {h}x{w} is not divisible by {m}")));
    }
    let p = |n: &str| params.param(&format!("{prefix}.{n}"));
    let mut x = conv2d(image, &p("stem.weight")?, Some(&p("stem.bias")?), 1, 1);
    let mut skips = Vec::with_capacity(cfg.num_stages());
    for s in 0..cfg.num_stages() {
        if s > 0 {
            x = conv2d(&x, &p(&format!("down.{s}.weight"))?, Some(&p(&format!("down.{s}.bias"))?), 2, 1);
        }
        for b in 0..cfg.blocks_per_stage {
            x = residual_block_postnorm(params, &format!("{prefix}.enc.{s}.{b}"), &x, cfg.groups)?;
        }
        skips.push(x.clone());
    }
    for s in (0..cfg.num_stages() - 1).rev() {
        let skip = &skips[s];
        let up = resize_bilinear(&x, skip.shape()[2], skip.shape()[3]);
        x = concat(&[up, skip.clone()], 1);
        for b in 0..cfg.blocks_per_stage {
            x = residual_block_postnorm(params, &format!("{prefix}.dec.{s}.{b}"), &x, cfg.groups)?;
        }
    }
    Ok(x)
}
