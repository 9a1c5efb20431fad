//! Bilinear resampling of NCHW tensors (half-pixel centres, edge clamped).

use ndarray::{ArrayD, IxDyn};

use super::{lit, Scalar, Var};

/// For each output index: the two source taps and the weight of the second.
#[derive(Debug, Clone)]
pub struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub frac: Vec<f64>,
}

/// Source coordinates for resizing an axis of length `src` to `dst`, using
/// `(i + 0.5)·src/dst − 0.5` clamped below at 0.
pub fn axis_taps(src: usize, dst: usize) -> AxisTaps {
    let scale = src as f64 / dst as f64;
    let mut taps = AxisTaps { lo: Vec::with_capacity(dst), hi: Vec::with_capacity(dst), frac: Vec::with_capacity(dst) };
    for i in 0..dst {
        let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(pos - lo as f64);
    }
    taps
}

fn resample_plane<T: Scalar>(src: &[T], w: usize, ty: &AxisTaps, tx: &AxisTaps, dst: &mut [T]) {
    let wo = tx.lo.len();
    for (oy, row) in dst.chunks_exact_mut(wo).enumerate() {
        let fy = lit::<T>(ty.frac[oy]);
        let top = &src[ty.lo[oy] * w..(ty.lo[oy] + 1) * w];
        let bot = &src[ty.hi[oy] * w..(ty.hi[oy] + 1) * w];
        for (ox, o) in row.iter_mut().enumerate() {
            let fx = lit::<T>(tx.frac[ox]);
            let (l, h) = (tx.lo[ox], tx.hi[ox]);
            let t = top[l] + (top[h] - top[l]) * fx;
            let b = bot[l] + (bot[h] - bot[l]) * fx;
            *o = t + (b - t) * fy;
        }
    }
}

fn resample_plane_adjoint<T: Scalar>(g: &[T], w: usize, ty: &AxisTaps, tx: &AxisTaps, dsrc: &mut [T]) {
    let wo = tx.lo.len();
    for (oy, row) in g.chunks_exact(wo).enumerate() {
        let fy = lit::<T>(ty.frac[oy]);
        let (ly, hy) = (ty.lo[oy], ty.hi[oy]);
        for (ox, &gv) in row.iter().enumerate() {
            let fx = lit::<T>(tx.frac[ox]);
            let (lx, hx) = (tx.lo[ox], tx.hi[ox]);
            let one = T::one();
            dsrc[ly * w + lx] += gv * (one - fy) * (one - fx);
            dsrc[ly * w + hx] += gv * (one - fy) * fx;
            dsrc[hy * w + lx] += gv * fy * (one - fx);
            dsrc[hy * w + hx] += gv * fy * fx;
        }
    }
}

/// Resizes the two trailing axes of a 4-d tensor to `(out_h, out_w)`.
pub fn resize_bilinear<T: Scalar>(x: &Var<T>, out_h: usize, out_w: usize) -> Var<T> {
    let shape = x.shape().to_vec();
    assert_eq!(shape.len(), 4, "resize_bilinear expects NCHW");
    let (h, w) = (shape[2], shape[3]);
    if (h, w) == (out_h, out_w) {
        return x.clone();
    }
    let planes = shape[0] * shape[1];
    let ty = axis_taps(h, out_h);
    let tx = axis_taps(w, out_w);
    let src = x.value().as_standard_layout().into_owned();
    let s = src.as_slice().expect("layout");
    let mut out = vec![T::zero(); planes * out_h * out_w];
    for (p, dst) in out.chunks_exact_mut(out_h * out_w).enumerate() {
        resample_plane(&s[p * h * w..(p + 1) * h * w], w, &ty, &tx, dst);
    }
    let out = ArrayD::from_shape_vec(IxDyn(&[shape[0], shape[1], out_h, out_w]), out).expect("resize shape");
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let gs = g.as_standard_layout();
            let gd = gs.as_slice().expect("layout");
            let mut dx = vec![T::zero(); planes * h * w];
            for (p, dsrc) in dx.chunks_exact_mut(h * w).enumerate() {
                resample_plane_adjoint(&gd[p * out_h * out_w..(p + 1) * out_h * out_w], w, &ty, &tx, dsrc);
            }
            vec![Some(ArrayD::from_shape_vec(IxDyn(&shape), dx).expect("dx shape"))]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_is_preserved() {
        let x = Var::<f64>::constant(ArrayD::from_elem(IxDyn(&[1, 2, 5, 3]), 0.625));
        let y = resize_bilinear(&x, 10, 7);
        assert_eq!(y.shape(), &[1, 2, 10, 7]);
        assert!(y.value().iter().all(|&v| (v - 0.625).abs() < 1e-15));
    }

    #[test]
    fn adjoint_identity() {
        // <resize(x), g> == <x, resize^T(g)>
        let x = ArrayD::from_shape_fn(IxDyn(&[1, 1, 3, 4]), |i| (i[2] * 4 + i[3]) as f64 * 0.3 - 1.0);
        let xv = Var::leaf(x.clone());
        let y = resize_bilinear(&xv, 7, 5);
        let g = ArrayD::from_shape_fn(IxDyn(&[1, 1, 7, 5]), |i| ((i[2] * 5 + i[3]) % 3) as f64 - 1.0);
        let lhs: f64 = y.value().iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let grads = y.backward_with(g);
        let rhs: f64 = x.iter().zip(grads.get(&xv).unwrap().iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
