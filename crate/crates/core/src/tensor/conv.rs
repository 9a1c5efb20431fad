//! 2-d convolution over NCHW tensors via chunked im2col + GEMM.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, IxDyn};

use super::{Scalar, Shared, Var};

/// Upper bound on the im2col scratch buffer, in elements.
const COLUMN_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeom {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output rows processed per GEMM so the column buffer stays bounded.
    fn rows_per_chunk(&self) -> usize {
        let per_row = self.patch_len() * self.out_width();
        (COLUMN_BUDGET / per_row.max(1)).clamp(1, self.out_height())
    }
}

/// Fills `cols` (`[C·k·k, rows·Wo]`) for output rows `oy0..oy0+rows`.
fn im2col<T: Scalar>(input: &[T], g: &Conv2dGeom, oy0: usize, rows: usize, cols: &mut [T]) {
    let (h, w, k, st, pad) = (g.height as isize, g.width as isize, g.kernel, g.stride, g.padding as isize);
    let wo = g.out_width();
    let n = rows * wo;
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for r in 0..rows {
                    let iy = ((oy0 + r) * st) as isize + ky as isize - pad;
                    let out = &mut dst[r * wo..(r + 1) * wo];
                    if iy < 0 || iy >= h {
                        out.fill(T::zero());
                        continue;
                    }
                    let line = &src[(iy as usize) * g.width..(iy as usize + 1) * g.width];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * st) as isize + kx as isize - pad;
                        *o = if ix < 0 || ix >= w { T::zero() } else { line[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back into the image gradient.
fn col2im<T: Scalar>(cols: &[T], g: &Conv2dGeom, oy0: usize, rows: usize, grad_in: &mut [T]) {
    let (h, w, k, st, pad) = (g.height as isize, g.width as isize, g.kernel, g.stride, g.padding as isize);
    let wo = g.out_width();
    let n = rows * wo;
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        let dst = &mut grad_in[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for r in 0..rows {
                    let iy = ((oy0 + r) * st) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &mut dst[(iy as usize) * g.width..(iy as usize + 1) * g.width];
                    for (ox, &v) in src[r * wo..(r + 1) * wo].iter().enumerate() {
                        let ix = (ox * st) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w {
                            line[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn weight_matrix<T: Scalar>(weight: &Shared<T>, out_channels: usize, patch: usize) -> ArrayView2<'_, T> {
    weight.view().into_shape_with_order((out_channels, patch)).expect("conv weight layout")
}

/// Square-kernel convolution. `input` is `[B, C, H, W]`, `weight` is
/// `[O, C, k, k]`, `bias` is `[O]`.
pub fn conv2d<T: Scalar>(
    input: &Var<T>,
    weight: &Var<T>,
    bias: Option<&Var<T>>,
    stride: usize,
    padding: usize,
) -> Var<T> {
    let xs = input.shape();
    let ws = weight.shape();
    assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
    assert_eq!(ws.len(), 4, "conv2d weight must be OIKK, got {ws:?}");
    assert_eq!(xs[1], ws[1], "conv2d channels: input {xs:?} weight {ws:?}");
    assert_eq!(ws[2], ws[3], "square kernels only");
    let (batch, out_ch) = (xs[0], ws[0]);
    let geom = Conv2dGeom { in_channels: xs[1], height: xs[2], width: xs[3], kernel: ws[2], stride, padding };
    let (ho, wo) = (geom.out_height(), geom.out_width());
    let patch = geom.patch_len();
    let in_len = geom.in_channels * geom.height * geom.width;
    let out_plane = ho * wo;

    let xv = input.value().clone();
    let wv = weight.value().clone();
    let x = xv.as_slice().expect("standard layout input");
    let wm = weight_matrix(&wv, out_ch, patch);
    let mut out = vec![T::zero(); batch * out_ch * out_plane];
    let chunk_rows = geom.rows_per_chunk();
    let mut cols = vec![T::zero(); patch * chunk_rows * wo];

    for b in 0..batch {
        let xb = &x[b * in_len..(b + 1) * in_len];
        let ob = &mut out[b * out_ch * out_plane..(b + 1) * out_ch * out_plane];
        if geom.is_pointwise() {
            let xm = ArrayView2::from_shape((geom.in_channels, out_plane), xb).expect("pointwise view");
            let mut om = ndarray::ArrayViewMut2::from_shape((out_ch, out_plane), ob).expect("pointwise out");
            general_mat_mul(T::one(), &wm, &xm, T::zero(), &mut om);
            continue;
        }
        let mut oy = 0;
        while oy < ho {
            let rows = chunk_rows.min(ho - oy);
            let n = rows * wo;
            im2col(xb, &geom, oy, rows, &mut cols[..patch * n]);
            let cm = ArrayView2::from_shape((patch, n), &cols[..patch * n]).expect("cols view");
            let mut tmp = Array2::<T>::zeros((out_ch, n));
            general_mat_mul(T::one(), &wm, &cm, T::zero(), &mut tmp);
            for o in 0..out_ch {
                ob[o * out_plane + oy * wo..o * out_plane + oy * wo + n]
                    .copy_from_slice(tmp.row(o).as_slice().expect("contiguous row"));
            }
            oy += rows;
        }
    }
    if let Some(bias) = bias {
        let bv = bias.value();
        for b in 0..batch {
            for o in 0..out_ch {
                let base = (b * out_ch + o) * out_plane;
                let bo = bv[[o]];
                out[base..base + out_plane].iter_mut().for_each(|v| *v += bo);
            }
        }
    }
    let out = ArrayD::from_shape_vec(IxDyn(&[batch, out_ch, ho, wo]), out).expect("conv output");

    let mut parents = vec![input.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let (rx, rw) = (input.requires_grad(), weight.requires_grad());
    Var::from_op(
        out,
        parents,
        Box::new(move |g| {
            let gs = g.as_standard_layout();
            let gd = gs.as_slice().expect("grad layout");
            let x = xv.as_slice().expect("input layout");
            let wm = weight_matrix(&wv, out_ch, patch);
            let mut gx = rx.then(|| vec![T::zero(); batch * in_len]);
            let mut gw = rw.then(|| Array2::<T>::zeros((out_ch, patch)));
            let mut cols = vec![T::zero(); patch * chunk_rows * wo];
            let mut gcols = vec![T::zero(); patch * chunk_rows * wo];
            for b in 0..batch {
                let gb = &gd[b * out_ch * out_plane..(b + 1) * out_ch * out_plane];
                let xb = &x[b * in_len..(b + 1) * in_len];
                if geom.is_pointwise() {
                    let gm = ArrayView2::from_shape((out_ch, out_plane), gb).expect("grad view");
                    if let Some(gw) = gw.as_mut() {
                        let xm = ArrayView2::from_shape((geom.in_channels, out_plane), xb).expect("x view");
                        general_mat_mul(T::one(), &gm, &xm.t(), T::one(), gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let slot = &mut gx[b * in_len..(b + 1) * in_len];
                        let mut gxm =
                            ndarray::ArrayViewMut2::from_shape((geom.in_channels, out_plane), slot).expect("gx view");
                        general_mat_mul(T::one(), &wm.t(), &gm, T::one(), &mut gxm);
                    }
                    continue;
                }
                let mut oy = 0;
                while oy < ho {
                    let rows = chunk_rows.min(ho - oy);
                    let n = rows * wo;
                    let mut gchunk = Array2::<T>::zeros((out_ch, n));
                    for o in 0..out_ch {
                        let src = &gb[o * out_plane + oy * wo..o * out_plane + oy * wo + n];
                        gchunk.row_mut(o).as_slice_mut().expect("row").copy_from_slice(src);
                    }
                    if let Some(gw) = gw.as_mut() {
                        im2col(xb, &geom, oy, rows, &mut cols[..patch * n]);
                        let cm = ArrayView2::from_shape((patch, n), &cols[..patch * n]).expect("cols");
                        general_mat_mul(T::one(), &gchunk, &cm.t(), T::one(), gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let mut gcm = ndarray::ArrayViewMut2::from_shape((patch, n), &mut gcols[..patch * n])
                            .expect("gcols");
                        general_mat_mul(T::one(), &wm.t(), &gchunk, T::zero(), &mut gcm);
                        col2im(&gcols[..patch * n], &geom, oy, rows, &mut gx[b * in_len..(b + 1) * in_len]);
                    }
                    oy += rows;
                }
            }
            let gx = gx.map(|v| {
                ArrayD::from_shape_vec(IxDyn(&[batch, geom.in_channels, geom.height, geom.width]), v)
                    .expect("gx shape")
            });
            let gw = gw.map(|m| {
                m.into_shape_with_order(IxDyn(&[out_ch, geom.in_channels, geom.kernel, geom.kernel]))
                    .expect("gw shape")
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                let g4 = gs.view();
                let mut gbias = ndarray::Array1::<T>::zeros(out_ch);
                for b in 0..batch {
                    for o in 0..out_ch {
                        let base = (b * out_ch + o) * out_plane;
                        gbias[o] += g4.as_slice().expect("layout")[base..base + out_plane].iter().copied().sum();
                    }
                }
                grads.push(Some(gbias.into_dyn()));
            }
            grads
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    /// Direct seven-loop convolution.
    fn naive(x: &Array4<f64>, w: &Array4<f64>, stride: usize, pad: usize) -> Array4<f64> {
        let (b, c, h, wd) = x.dim();
        let (o, _, k, _) = w.dim();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wd + 2 * pad - k) / stride + 1;
        let mut out = Array4::zeros((b, o, ho, wo));
        for bi in 0..b {
            for oi in 0..o {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (y * stride + ky) as isize - pad as isize;
                                    let ix = (xx * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x[[bi, ci, iy as usize, ix as usize]] * w[[oi, ci, ky, kx]];
                                    }
                                }
                            }
                        }
                        out[[bi, oi, y, xx]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let x = Array4::from_shape_fn((2, 3, 7, 6), |(a, b, c, d)| ((a * 7 + b * 5 + c * 3 + d) % 11) as f64 - 5.0);
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (1, 1, 0), (4, 4, 0), (2, 2, 0)] {
            let w = Array4::from_shape_fn((4, 3, k, k), |(a, b, c, d)| ((a + 2 * b + 3 * c + d) % 5) as f64 * 0.5 - 1.0);
            let y = conv2d(&Var::constant(x.clone().into_dyn()), &Var::constant(w.clone().into_dyn()), None, stride, pad);
            let want = naive(&x, &w, stride, pad);
            assert_eq!(y.shape(), want.shape());
            for (a, b) in y.value().iter().zip(want.iter()) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride} p={pad}");
            }
        }
    }
}
