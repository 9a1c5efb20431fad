//! Window partitioning, scaled cosine window attention and the SwinV2 block.

use ndarray::{ArrayD, IxDyn};

use crate::error::{NnError, NnResult};
use crate::params::{Binder, Init, ParamSpec};
use crate::tensor::norm::layer_norm;
use crate::tensor::ops::{
    add, bmm, clamp_min, exp, gather_rows, gelu, l2_normalize_last, linear, mul, narrow, permute, recip, reshape,
    roll, softmax_last,
};
use crate::tensor::{lit, Scalar, Var};

/// Additive logit for token pairs that must not attend to each other.
pub const MASK_VALUE: f64 = -1.0e9;

const NORMALIZE_EPS: f64 = 1e-12;

/// Splits `[B, H, W, C]` into `[B·(H/M)·(W/M), M², C]`, windows in row-major
/// order per image.
pub fn window_partition<T: Scalar>(x: &Var<T>, window: usize) -> NnResult<Var<T>> {
    let &[b, h, w, c] = x.shape() else {
        return Err(NnError::InvalidConfig(format!("window_partition expects [B,H,W,C], got {:?}", x.shape())));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(NnError::IndivisibleFeatureMap { height: h, width: w, window });
    }
    let (nh, nw) = (h / window, w / window);
    let t = reshape(x, &[b, nh, window, nw, window, c]);
    let t = permute(&t, &[0, 1, 3, 2, 4, 5]);
    Ok(reshape(&t, &[b * nh * nw, window * window, c]))
}

/// Inverse of [`window_partition`].
pub fn window_reverse<T: Scalar>(windows: &Var<T>, window: usize, height: usize, width: usize) -> NnResult<Var<T>> {
    let &[n, tokens, c] = windows.shape() else {
        return Err(NnError::InvalidConfig(format!("window_reverse expects [N,M²,C], got {:?}", windows.shape())));
    };
    if window == 0 || !height.is_multiple_of(window) || !width.is_multiple_of(window) {
        return Err(NnError::IndivisibleFeatureMap { height, width, window });
    }
    let (nh, nw) = (height / window, width / window);
    if tokens != window * window || n % (nh * nw) != 0 {
        return Err(NnError::IndivisibleFeatureMap { height, width, window });
    }
    let b = n / (nh * nw);
    let t = reshape(windows, &[b, nh, nw, window, window, c]);
    let t = permute(&t, &[0, 1, 3, 2, 4, 5]);
    Ok(reshape(&t, &[b, height, width, c]))
}

/// Index into the `(2M−1)²` bias table for every ordered token pair of an
/// `M×M` window, row-major over `(query, key)`.
pub fn relative_position_index(window: usize) -> Vec<usize> {
    let span = 2 * window - 1;
    let n = window * window;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / window, i % window);
        for j in 0..n {
            let (yj, xj) = (j / window, j % window);
            let dy = yi + window - 1 - yj;
            let dx = xi + window - 1 - xj;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Attention mask `[nW, M², M²]` for a grid cyclically shifted by `shift`:
/// tokens that were not neighbours before the roll get [`MASK_VALUE`].
pub fn shifted_window_mask<T: Scalar>(height: usize, width: usize, window: usize, shift: usize) -> ArrayD<T> {
    let label_axis = |len: usize| -> Vec<usize> {
        (0..len)
            .map(|i| {
                if i < len - window {
                    0
                } else if i < len - shift {
                    1
                } else {
                    2
                }
            })
            .collect()
    };
    let (ly, lx) = (label_axis(height), label_axis(width));
    let (nh, nw) = (height / window, width / window);
    let n = window * window;
    let mut mask = ArrayD::<T>::zeros(IxDyn(&[nh * nw, n, n]));
    let masked = lit::<T>(MASK_VALUE);
    for wy in 0..nh {
        for wx in 0..nw {
            let label = |t: usize| ly[wy * window + t / window] * 3 + lx[wx * window + t % window];
            for i in 0..n {
                for j in 0..n {
                    if label(i) != label(j) {
                        mask[[wy * nw + wx, i, j]] = masked;
                    }
                }
            }
        }
    }
    mask
}

/// Attention probabilities from per-head queries and keys.
///
/// `q`, `k`: `[G, heads, N, d]`; `inv_temp`: `[heads]`; `bias`: `[heads, N, N]`;
/// optional `mask`: `[nW, N, N]` with `G` a multiple of `nW`. Logits are
/// `cos(q_i, k_j) / τ + B[i, j] (+ mask)`; rows are softmax-normalized.
pub fn scaled_cosine_probs<T: Scalar>(
    q: &Var<T>,
    k: &Var<T>,
    inv_temp: &Var<T>,
    bias: &Var<T>,
    mask: Option<&ArrayD<T>>,
) -> Var<T> {
    let &[g, heads, n, d] = q.shape() else { panic!("q must be [G, heads, N, d]") };
    let qn = reshape(&l2_normalize_last(q, lit(NORMALIZE_EPS)), &[g * heads, n, d]);
    let kn = reshape(&l2_normalize_last(k, lit(NORMALIZE_EPS)), &[g * heads, n, d]);
    let cos = reshape(&bmm(&qn, &kn, true), &[g, heads, n, n]);
    let logits = mul(&cos, &reshape(inv_temp, &[1, heads, 1, 1]));
    let mut logits = add(&logits, &reshape(bias, &[1, heads, n, n]));
    if let Some(mask) = mask {
        let nw = mask.shape()[0];
        let m = Var::constant(mask.clone().into_shape_with_order(IxDyn(&[1, nw, 1, n, n])).expect("mask shape"));
        let grouped = reshape(&logits, &[g / nw, nw, heads, n, n]);
        logits = reshape(&add(&grouped, &m), &[g, heads, n, n]);
    }
    softmax_last(&logits)
}

pub fn attention_specs(prefix: &str, dim: usize, heads: usize, window: usize) -> Vec<ParamSpec> {
    let span = 2 * window - 1;
    vec![
        ParamSpec::new(format!("{prefix}.qkv.weight"), &[3 * dim, dim], Init::TruncNormal(0.02)),
        ParamSpec::new(format!("{prefix}.qkv.bias"), &[3 * dim], Init::Zeros),
        ParamSpec::new(format!("{prefix}.log_temp"), &[heads], Init::Const(0.1f64.ln())),
        ParamSpec::new(format!("{prefix}.rel_bias"), &[span * span, heads], Init::TruncNormal(0.02)),
        ParamSpec::new(format!("{prefix}.proj.weight"), &[dim, dim], Init::TruncNormal(0.02)),
        ParamSpec::new(format!("{prefix}.proj.bias"), &[dim], Init::Zeros),
    ]
}

/// Multi-head scaled cosine attention inside windows.
///
/// `tokens` is `[Nw, M², C]`. The temperature of head `h` is
/// `max(exp(log_temp[h]), tau_min)`.
pub fn cosine_window_attention<T: Scalar>(
    params: &Binder<'_, T>,
    prefix: &str,
    tokens: &Var<T>,
    heads: usize,
    tau_min: f64,
    mask: Option<&ArrayD<T>>,
) -> NnResult<Var<T>> {
    let &[nwin, n, c] = tokens.shape() else {
        return Err(NnError::InvalidConfig(format!("attention expects [Nw, M², C], got {:?}", tokens.shape())));
    };
    if heads == 0 || c % heads != 0 {
        return Err(NnError::HeadDivisibility { channels: c, heads });
    }
    let window = (n as f64).sqrt().round() as usize;
    if window * window != n {
        return Err(NnError::InvalidConfig(format!("{n} tokens per window is not a square")));
    }
    if let Some(m) = mask {
        if m.ndim() != 3 || m.shape()[1] != n || m.shape()[2] != n || nwin % m.shape()[0] != 0 {
            return Err(NnError::InvalidConfig(format!("mask {:?} does not fit {nwin} windows of {n}", m.shape())));
        }
    }
    let d = c / heads;
    let qkv = linear(tokens, &params.param(&format!("{prefix}.qkv.weight"))?, Some(&params.param(&format!("{prefix}.qkv.bias"))?));
    let qkv = permute(&reshape(&qkv, &[nwin, n, 3, heads, d]), &[2, 0, 3, 1, 4]);
    let part = |i: usize| reshape(&narrow(&qkv, 0, i, 1), &[nwin, heads, n, d]);
    let (q, k, v) = (part(0), part(1), part(2));

    let log_temp = params.param(&format!("{prefix}.log_temp"))?;
    let inv_temp = recip(&clamp_min(&exp(&log_temp), lit(tau_min)));
    let table = params.param(&format!("{prefix}.rel_bias"))?;
    let bias = gather_rows(&table, &relative_position_index(window));
    let bias = permute(&bias, &[1, 0]);

    let probs = scaled_cosine_probs(&q, &k, &inv_temp, &bias, mask);
    let out = bmm(&reshape(&probs, &[nwin * heads, n, n]), &reshape(&v, &[nwin * heads, n, d]), false);
    let out = reshape(&permute(&reshape(&out, &[nwin, heads, n, d]), &[0, 2, 1, 3]), &[nwin, n, c]);
    Ok(linear(&out, &params.param(&format!("{prefix}.proj.weight"))?, Some(&params.param(&format!("{prefix}.proj.bias"))?)))
}

pub fn mlp_hidden(dim: usize, mlp_ratio: f64) -> usize {
    ((dim as f64) * mlp_ratio).round() as usize
}

pub fn block_specs(prefix: &str, dim: usize, heads: usize, window: usize, mlp_ratio: f64) -> Vec<ParamSpec> {
    let hidden = mlp_hidden(dim, mlp_ratio);
    let mut specs = attention_specs(&format!("{prefix}.attn"), dim, heads, window);
    specs.extend([
        ParamSpec::new(format!("{prefix}.norm1.weight"), &[dim], Init::Ones),
        ParamSpec::new(format!("{prefix}.norm1.bias"), &[dim], Init::Zeros),
        ParamSpec::new(format!("{prefix}.mlp.fc1.weight"), &[hidden, dim], Init::TruncNormal(0.02)),
        ParamSpec::new(format!("{prefix}.mlp.fc1.bias"), &[hidden], Init::Zeros),
        ParamSpec::new(format!("{prefix}.mlp.fc2.weight"), &[dim, hidden], Init::TruncNormal(0.02)),
        ParamSpec::new(format!("{prefix}.mlp.fc2.bias"), &[dim], Init::Zeros),
        ParamSpec::new(format!("{prefix}.norm2.weight"), &[dim], Init::Ones),
        ParamSpec::new(format!("{prefix}.norm2.bias"), &[dim], Init::Zeros),
    ]);
    specs
}

/// Window geometry of one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGeom {
    pub heads: usize,
    pub window: usize,
    pub shift: usize,
}

/// One SwinV2 block with residual post-normalization on a `[B, H, W, C]` grid:
/// `x ← x + LN(attn(x))`, then `x ← x + LN(MLP(x))`.
pub fn swinv2_block<T: Scalar>(
    params: &Binder<'_, T>,
    prefix: &str,
    x: &Var<T>,
    geom: BlockGeom,
    tau_min: f64,
) -> NnResult<Var<T>> {
    let &[_, h, w, _] = x.shape() else {
        return Err(NnError::InvalidConfig(format!("block expects [B,H,W,C], got {:?}", x.shape())));
    };
    let BlockGeom { heads, window, shift } = geom;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(NnError::IndivisibleFeatureMap { height: h, width: w, window });
    }
    let s = shift as isize;
    let shifted = if shift > 0 { roll(x, &[(1, -s), (2, -s)]) } else { x.clone() };
    let mask = (shift > 0).then(|| shifted_window_mask::<T>(h, w, window, shift));
    let windows = window_partition(&shifted, window)?;
    let attended = cosine_window_attention(params, &format!("{prefix}.attn"), &windows, heads, tau_min, mask.as_ref())?;
    let merged = window_reverse(&attended, window, h, w)?;
    let merged = if shift > 0 { roll(&merged, &[(1, s), (2, s)]) } else { merged };

    let p = |n: &str| params.param(&format!("{prefix}.{n}"));
    let x = add(x, &layer_norm(&merged, &p("norm1.weight")?, &p("norm1.bias")?));
    let hidden = gelu(&linear(&x, &p("mlp.fc1.weight")?, Some(&p("mlp.fc1.bias")?)));
    let y = linear(&hidden, &p("mlp.fc2.weight")?, Some(&p("mlp.fc2.bias")?));
    Ok(add(&x, &layer_norm(&y, &p("norm2.weight")?, &p("norm2.bias")?)))
}

pub fn merge_specs(prefix: &str, dim: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}.norm.weight"), &[4 * dim], Init::Ones),
        ParamSpec::new(format!("{prefix}.norm.bias"), &[4 * dim], Init::Zeros),
        ParamSpec::new(format!("{prefix}.reduction.weight"), &[2 * dim, 4 * dim], Init::TruncNormal(0.02)),
    ]
}

/// Concatenates each 2×2 neighbourhood of a `[B, H, W, C]` grid (order
/// `(0,0), (1,0), (0,1), (1,1)` as `(dy, dx)`), layer-normalizes the `4C`
/// vector and projects it to `2C`.
pub fn patch_merge<T: Scalar>(params: &Binder<'_, T>, prefix: &str, x: &Var<T>) -> NnResult<Var<T>> {
    let &[b, h, w, c] = x.shape() else {
        return Err(NnError::InvalidConfig(format!("patch_merge expects [B,H,W,C], got {:?}", x.shape())));
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(NnError::OddDimensions { height: h, width: w });
    }
    let t = reshape(x, &[b, h / 2, 2, w / 2, 2, c]);
    let t = permute(&t, &[0, 1, 3, 4, 2, 5]);
    let t = reshape(&t, &[b, h / 2, w / 2, 4 * c]);
    let p = |n: &str| params.param(&format!("{prefix}.{n}"));
    let t = layer_norm(&t, &p("norm.weight")?, &p("norm.bias")?);
    Ok(linear(&t, &p("reduction.weight")?, None))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn bias_index_covers_table() {
        let idx = relative_position_index(3);
        assert_eq!(idx.len(), 81);
        let mut seen = [false; 25];
        for &i in &idx {
            seen[i] = true;
        }
        assert!(seen.iter().all(|&s| s));
        // Diagonal pairs share the zero offset, which sits in the table centre.
        for t in 0..9 {
            assert_eq!(idx[t * 9 + t], 12);
        }
    }

    #[test]
    fn mask_blocks_wrapped_neighbours() {
        let m = shifted_window_mask::<f64>(4, 4, 2, 1);
        assert_eq!(m.shape(), &[4, 4, 4]);
        // First window is entirely in region 0: no masking.
        assert!(m.index_axis(ndarray::Axis(0), 0).iter().all(|&v| v == 0.0));
        // Last window mixes four regions: only the diagonal is open.
        for i in 0..4 {
            for j in 0..4 {
                let v = m[[3, i, j]];
                assert_eq!(v == 0.0, i == j);
            }
        }
    }

    #[test]
    fn head_divisibility_is_checked() {
        let store = ParamStore::<f64>::init(&attention_specs("a", 6, 4, 2), 0).unwrap();
        let b = Binder::inference(&store);
        let x = Var::constant(ArrayD::zeros(IxDyn(&[1, 4, 6])));
        assert!(matches!(
            cosine_window_attention(&b, "a", &x, 4, 0.01, None),
            Err(NnError::HeadDivisibility { channels: 6, heads: 4 })
        ));
    }

    #[test]
    fn odd_merge_is_rejected() {
        let store = ParamStore::<f64>::init(&merge_specs("m", 2), 0).unwrap();
        let b = Binder::inference(&store);
        let x = Var::constant(ArrayD::zeros(IxDyn(&[1, 3, 4, 2])));
        assert!(matches!(patch_merge(&b, "m", &x), Err(NnError::OddDimensions { height: 3, width: 4 })));
    }

    #[test]
    fn indivisible_partition_is_rejected() {
        let x = Var::<f64>::constant(ArrayD::zeros(IxDyn(&[1, 6, 6, 2])));
        assert!(matches!(window_partition(&x, 4), Err(NnError::IndivisibleFeatureMap { .. })));
    }
}
