//! Layer and group normalization with affine parameters.

use ndarray::{Array1, ArrayD, IxDyn};

use super::{lit, Scalar, Var};

pub const NORM_EPS: f64 = 1e-5;

/// Largest group count not above `requested` that divides `channels`.
pub fn group_count(channels: usize, requested: usize) -> usize {
    (1..=requested.clamp(1, channels.max(1))).rev().find(|g| channels.is_multiple_of(*g)).unwrap_or(1)
}

/// Normalizes contiguous segments of `seg` elements, returning the
/// normalized values and per-segment inverse standard deviations.
fn normalize_segments<T: Scalar>(x: &[T], seg: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let n = lit::<T>(seg as f64);
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(x.len() / seg);
    for (src, dst) in x.chunks_exact(seg).zip(xhat.chunks_exact_mut(seg)) {
        let mean = src.iter().copied().sum::<T>() / n;
        let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * r;
        }
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Backward of segment normalization given `dxhat`.
fn normalize_segments_backward<T: Scalar>(dxhat: &[T], xhat: &[T], rstd: &[T], seg: usize) -> Vec<T> {
    let n = lit::<T>(seg as f64);
    let mut dx = vec![T::zero(); dxhat.len()];
    for (((d, xh), out), &r) in dxhat.chunks_exact(seg).zip(xhat.chunks_exact(seg)).zip(dx.chunks_exact_mut(seg)).zip(rstd)
    {
        let mean_d = d.iter().copied().sum::<T>() / n;
        let mean_dx = d.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
        for ((o, &di), &xi) in out.iter_mut().zip(d).zip(xh) {
            *o = r * (di - mean_d - xi * mean_dx);
        }
    }
    dx
}

/// Layer normalization over the last axis.
pub fn layer_norm<T: Scalar>(x: &Var<T>, gamma: &Var<T>, beta: &Var<T>) -> Var<T> {
    let c = *x.shape().last().expect("rank >= 1");
    assert_eq!(gamma.shape(), &[c], "layer_norm gamma");
    assert_eq!(beta.shape(), &[c], "layer_norm beta");
    let shape = x.shape().to_vec();
    let xv = x.value().as_standard_layout().into_owned();
    let (xhat, rstd) = normalize_segments(xv.as_slice().expect("layout"), c, lit(NORM_EPS));
    let gv = gamma.value().clone();
    let bv = beta.value().clone();
    let g = gv.as_slice().expect("gamma");
    let b = bv.as_slice().expect("beta");
    let mut out = xhat.clone();
    for row in out.chunks_exact_mut(c) {
        for ((o, &gi), &bi) in row.iter_mut().zip(g).zip(b) {
            *o = *o * gi + bi;
        }
    }
    let out = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("ln shape");
    let (rx, rg, rb) = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
    Var::from_op(
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |dy| {
            let dys = dy.as_standard_layout();
            let d = dys.as_slice().expect("grad layout");
            let g = gv.as_slice().expect("gamma");
            let dx = rx.then(|| {
                let mut dxhat = d.to_vec();
                for row in dxhat.chunks_exact_mut(c) {
                    for (v, &gi) in row.iter_mut().zip(g) {
                        *v *= gi;
                    }
                }
                let dx = normalize_segments_backward(&dxhat, &xhat, &rstd, c);
                ArrayD::from_shape_vec(IxDyn(&shape), dx).expect("dx shape")
            });
            let (mut dg, mut db) = (Array1::<T>::zeros(c), Array1::<T>::zeros(c));
            for (drow, xrow) in d.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                for i in 0..c {
                    dg[i] += drow[i] * xrow[i];
                    db[i] += drow[i];
                }
            }
            vec![dx, rg.then(|| dg.into_dyn()), rb.then(|| db.into_dyn())]
        }),
    )
}

/// Group normalization over NCHW input with per-channel affine.
pub fn group_norm<T: Scalar>(x: &Var<T>, groups: usize, gamma: &Var<T>, beta: &Var<T>) -> Var<T> {
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 4, "group_norm expects NCHW");
    let (ch, plane) = (shape[1], shape[2] * shape[3]);
    assert!(groups > 0 && ch % groups == 0, "group_norm: {ch} channels, {groups} groups");
    assert_eq!(gamma.shape(), &[ch], "group_norm gamma");
    assert_eq!(beta.shape(), &[ch], "group_norm beta");
    let seg = ch / groups * plane;
    let xv = x.value().as_standard_layout().into_owned();
    let (xhat, rstd) = normalize_segments(xv.as_slice().expect("layout"), seg, lit(NORM_EPS));
    let gv = gamma.value().clone();
    let bv = beta.value().clone();
    let mut out = xhat.clone();
    for (idx, chunk) in out.chunks_exact_mut(plane).enumerate() {
        let c = idx % ch;
        let (gc, bc) = (gv[[c]], bv[[c]]);
        chunk.iter_mut().for_each(|v| *v = *v * gc + bc);
    }
    let out = ArrayD::from_shape_vec(IxDyn(&shape), out).expect("gn shape");
    let (rx, rg, rb) = (x.requires_grad(), gamma.requires_grad(), beta.requires_grad());
    Var::from_op(
        out,
        vec![x.clone(), gamma.clone(), beta.clone()],
        Box::new(move |dy| {
            let dys = dy.as_standard_layout();
            let d = dys.as_slice().expect("grad layout");
            let (mut dg, mut db) = (Array1::<T>::zeros(ch), Array1::<T>::zeros(ch));
            for (idx, (dchunk, xchunk)) in d.chunks_exact(plane).zip(xhat.chunks_exact(plane)).enumerate() {
                let c = idx % ch;
                let mut sg = T::zero();
                let mut sb = T::zero();
                for (&di, &xi) in dchunk.iter().zip(xchunk) {
                    sg += di * xi;
                    sb += di;
                }
                dg[c] += sg;
                db[c] += sb;
            }
            let dx = rx.then(|| {
                let mut dxhat = d.to_vec();
                for (idx, chunk) in dxhat.chunks_exact_mut(plane).enumerate() {
                    let gc = gv[[idx % ch]];
                    chunk.iter_mut().for_each(|v| *v *= gc);
                }
                let dx = normalize_segments_backward(&dxhat, &xhat, &rstd, seg);
                ArrayD::from_shape_vec(IxDyn(&shape), dx).expect("dx shape")
            });
            vec![dx, rg.then(|| dg.into_dyn()), rb.then(|| db.into_dyn())]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layer_norm_of_constant_rows_is_beta() {
        let x = Var::<f64>::constant(ArrayD::from_elem(IxDyn(&[3, 4]), 7.5));
        let g = Var::constant(ArrayD::from_elem(IxDyn(&[4]), 2.0));
        let b = Var::constant(ndarray::array![0.1, 0.2, 0.3, 0.4].into_dyn());
        let y = layer_norm(&x, &g, &b);
        for row in y.value().rows() {
            assert_eq!(row.to_vec(), vec![0.1, 0.2, 0.3, 0.4]);
        }
    }

    #[test]
    fn group_norm_zero_mean_unit_variance() {
        let x = ArrayD::from_shape_fn(IxDyn(&[2, 4, 3, 3]), |i| (i[0] * 31 + i[1] * 7 + i[2] * 3 + i[3]) as f64 * 0.37);
        let ones = Var::constant(ArrayD::ones(IxDyn(&[4])));
        let zeros = Var::constant(ArrayD::zeros(IxDyn(&[4])));
        let y = group_norm(&Var::constant(x), 2, &ones, &zeros);
        let v = y.value();
        for b in 0..2 {
            for g in 0..2 {
                let vals: Vec<f64> = (0..2)
                    .flat_map(|c| (0..9).map(move |p| (c, p)))
                    .map(|(c, p)| v[[b, g * 2 + c, p / 3, p % 3]])
                    .collect();
                let mean = vals.iter().sum::<f64>() / 18.0;
                let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 18.0;
                assert!(mean.abs() < 1e-12);
                assert!((var - 1.0).abs() < 1e-3);
            }
        }
    }
}
