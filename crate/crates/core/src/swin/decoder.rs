//! UNET-style decoder with concurrent spatial and channel squeeze-excitation.

use crate::error::{NnError, NnResult};
use crate::params::{Binder, Init, ParamSpec};
use crate::tensor::conv::conv2d;
use crate::tensor::interp::resize_bilinear;
use crate::tensor::norm::{group_count, group_norm};
use crate::tensor::ops::{add, concat, mean_axes_keep, mul, relu, sigmoid};
use crate::tensor::{Scalar, Var};

pub fn scse_specs(prefix: &str, channels: usize, reduction: usize) -> Vec<ParamSpec> {
    let hidden = (channels / reduction.max(1)).max(1);
    vec![
        ParamSpec::new(format!("{prefix}.cse.fc1.weight"), &[hidden, channels, 1, 1], Init::TruncNormal(0.02)),
        ParamSpec::new(format!("{prefix}.cse.fc1.bias"), &[hidden], Init::Zeros),
        ParamSpec::new(format!("{prefix}.cse.fc2.weight"), &[channels, hidden, 1, 1], Init::TruncNormal(0.02)),
        ParamSpec::new(format!("{prefix}.cse.fc2.bias"), &[channels], Init::Zeros),
        ParamSpec::new(format!("{prefix}.sse.weight"), &[1, channels, 1, 1], Init::TruncNormal(0.02)),
        ParamSpec::new(format!("{prefix}.sse.bias"), &[1], Init::Zeros),
    ]
}

/// `x ⊙ g_c + x ⊙ g_s` with a per-channel gate from globally pooled features
/// and a per-pixel gate from a 1×1 convolution. `x` is NCHW.
pub fn scse<T: Scalar>(params: &Binder<'_, T>, prefix: &str, x: &Var<T>, reduction: usize) -> NnResult<Var<T>> {
    let &[_, c, _, _] = x.shape() else {
        return Err(NnError::InvalidConfig(format!("scse expects NCHW, got {:?}", x.shape())));
    };
    if reduction == 0 {
        return Err(NnError::InvalidConfig("scse reduction must be at least 1".into()));
    }
    if c < reduction {
        return Err(NnError::ChannelTooSmall { channels: c, reduction });
    }
    let p = |n: &str| params.param(&format!("{prefix}.{n}"));
    let pooled = mean_axes_keep(x, &[2, 3]);
    let hidden = relu(&conv2d(&pooled, &p("cse.fc1.weight")?, Some(&p("cse.fc1.bias")?), 1, 0));
    let channel_gate = sigmoid(&conv2d(&hidden, &p("cse.fc2.weight")?, Some(&p("cse.fc2.bias")?), 1, 0));
    let spatial_gate = sigmoid(&conv2d(x, &p("sse.weight")?, Some(&p("sse.bias")?), 1, 0));
    Ok(add(&mul(x, &channel_gate), &mul(x, &spatial_gate)))
}

pub fn decoder_block_specs(
    prefix: &str,
    prev_channels: usize,
    skip_channels: usize,
    out_channels: usize,
    reduction: usize,
) -> Vec<ParamSpec> {
    let cin = prev_channels + skip_channels;
    let mut specs = vec![
        ParamSpec::new(format!("{prefix}.conv1.weight"), &[out_channels, cin, 3, 3], Init::TruncNormal(0.02)),
        ParamSpec::new(format!("{prefix}.norm1.weight"), &[out_channels], Init::Ones),
        ParamSpec::new(format!("{prefix}.norm1.bias"), &[out_channels], Init::Zeros),
        ParamSpec::new(format!("{prefix}.conv2.weight"), &[out_channels, out_channels, 3, 3], Init::TruncNormal(0.02)),
        ParamSpec::new(format!("{prefix}.norm2.weight"), &[out_channels], Init::Ones),
        ParamSpec::new(format!("{prefix}.norm2.bias"), &[out_channels], Init::Zeros),
    ];
    specs.extend(scse_specs(&format!("{prefix}.scse"), out_channels, reduction));
    specs
}

/// Upsamples `prev` to the skip resolution, concatenates channels and applies
/// two conv3×3 → GN → ReLU stages followed by SCSE.
pub fn decoder_block<T: Scalar>(
    params: &Binder<'_, T>,
    prefix: &str,
    prev: &Var<T>,
    skip: &Var<T>,
    norm_groups: usize,
    reduction: usize,
) -> NnResult<Var<T>> {
    let (ps, ss) = (prev.shape(), skip.shape());
    if ps.len() != 4 || ss.len() != 4 || ps[0] != ss[0] {
        return Err(NnError::IncompatibleSkip { prev: ps.to_vec(), skip: ss.to_vec() });
    }
    let (hp, wp, hs, ws) = (ps[2], ps[3], ss[2], ss[3]);
    let doubled = hs == 2 * hp && ws == 2 * wp;
    if !(doubled || (hs == hp && ws == wp)) {
        return Err(NnError::IncompatibleSkip { prev: ps.to_vec(), skip: ss.to_vec() });
    }
    let cin = ps[1] + ss[1];
    let p = |n: &str| params.param(&format!("{prefix}.{n}"));
    let w1 = p("conv1.weight")?;
    if w1.shape()[1] != cin {
        return Err(NnError::ChannelMismatch { expected: w1.shape()[1], found: cin });
    }
    let up = resize_bilinear(prev, hs, ws);
    let x = concat(&[up, skip.clone()], 1);
    let out_ch = w1.shape()[0];
    let groups = group_count(out_ch, norm_groups);
    let x = relu(&group_norm(&conv2d(&x, &w1, None, 1, 1), groups, &p("norm1.weight")?, &p("norm1.bias")?));
    let x = conv2d(&x, &p("conv2.weight")?, None, 1, 1);
    let x = relu(&group_norm(&x, groups, &p("norm2.weight")?, &p("norm2.bias")?));
    scse(params, &format!("{prefix}.scse"), &x, reduction)
}
