//! Differentiable tensor primitives.
//!
//! Shape errors inside these primitives are programming errors and panic, in
//! the same way `ndarray` does. Layer code validates user-facing shapes before
//! calling in.

use ndarray::linalg::general_mat_mul;
use ndarray::{concatenate, s, Array2, Array3, ArrayD, ArrayView2, ArrayView3, ArrayViewD, Axis, IxDyn, Slice, Zip};

use super::{lit, Scalar, Shared, Var};

thread_local! {
    static KINK_TRACE: std::cell::Cell<Option<u64>> = const { std::cell::Cell::new(None) };
}

/// Runs `f` and returns a fingerprint of the sign pattern of every ReLU input
/// it evaluated on this thread. Two runs with equal fingerprints took the same
/// linear piece of every ReLU.
pub fn trace_kinks<R>(f: impl FnOnce() -> R) -> (R, u64) {
    let saved = KINK_TRACE.with(|t| t.replace(Some(0xcbf2_9ce4_8422_2325)));
    let out = f();
    let print = KINK_TRACE.with(|t| t.replace(saved)).expect("trace active");
    (out, print)
}

fn record_signs<T: Scalar>(x: &Shared<T>) {
    KINK_TRACE.with(|t| {
        if let Some(mut h) = t.get() {
            for &v in x.iter() {
                h = (h ^ u64::from(v > T::zero())).wrapping_mul(0x0100_0000_01b3);
            }
            t.set(Some(h));
        }
    });
}

/// Sums `grad` down to `shape`, undoing numpy-style broadcasting.
pub fn reduce_to_shape<T: Scalar>(grad: ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if grad.shape() == shape {
        return grad;
    }
    let mut g = grad;
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g
}

fn owned<T: Scalar>(v: &Var<T>) -> ArrayD<T> {
    v.value().to_owned()
}

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let out = a.value() + b.value();
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| vec![Some(reduce_to_shape(g.clone(), &sa)), Some(reduce_to_shape(g.clone(), &sb))]),
    )
}

pub fn sub<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let out = a.value() - b.value();
    let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
    Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            vec![Some(reduce_to_shape(g.clone(), &sa)), Some(reduce_to_shape(g.mapv(|x| -x), &sb))]
        }),
    )
}

pub fn mul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let out = a.value() * b.value();
    let (av, bv) = (a.value().clone(), b.value().clone());
    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = ra.then(|| reduce_to_shape(g * &bv, av.shape()));
            let gb = rb.then(|| reduce_to_shape(g * &av, bv.shape()));
            vec![ga, gb]
        }),
    )
}

pub fn div<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Var<T> {
    let out = a.value() / b.value();
    let (av, bv) = (a.value().clone(), b.value().clone());
    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let ga = ra.then(|| reduce_to_shape(g / &bv, av.shape()));
            let gb = rb.then(|| {
                let t = g * &av / &bv.mapv(|x| x * x);
                reduce_to_shape(t.mapv(|x| -x), bv.shape())
            });
            vec![ga, gb]
        }),
    )
}

pub fn scale<T: Scalar>(x: &Var<T>, c: T) -> Var<T> {
    Var::from_op(x.value().mapv(|v| v * c), vec![x.clone()], Box::new(move |g| vec![Some(g.mapv(|v| v * c))]))
}

pub fn add_scalar<T: Scalar>(x: &Var<T>, c: T) -> Var<T> {
    Var::from_op(x.value().mapv(|v| v + c), vec![x.clone()], Box::new(|g| vec![Some(g.clone())]))
}

/// Elementwise map with derivative `df(x, y)` where `y = f(x)`.
pub fn map<T, F, D>(x: &Var<T>, f: F, df: D) -> Var<T>
where
    T: Scalar,
    F: Fn(T) -> T,
    D: Fn(T, T) -> T + 'static,
{
    let out = x.value().mapv(f);
    let xv = x.value().clone();
    let yv = out.clone().into_shared();
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = g.clone();
            Zip::from(&mut gx).and(&xv).and(&yv).for_each(|gi, &xi, &yi| *gi *= df(xi, yi));
            vec![Some(gx)]
        }),
    )
}

pub fn relu<T: Scalar>(x: &Var<T>) -> Var<T> {
    record_signs(x.value());
    map(x, |v| v.max(T::zero()), |v, _| if v > T::zero() { T::one() } else { T::zero() })
}

pub fn logistic_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Var<T>) -> Var<T> {
    map(x, logistic_scalar, |_, y| y * (T::one() - y))
}

/// Exact (erf-based) GELU.
pub fn gelu<T: Scalar>(x: &Var<T>) -> Var<T> {
    fn erf<T: Scalar>(v: T) -> T {
        lit(libm::erf(v.to_f64().expect("finite")))
    }
    let half = lit::<T>(0.5);
    let inv_sqrt2 = lit::<T>(std::f64::consts::FRAC_1_SQRT_2);
    let inv_sqrt_2pi = lit::<T>(0.398_942_280_401_432_7);
    map(
        x,
        move |v| half * v * (T::one() + erf(v * inv_sqrt2)),
        move |v, _| {
            let cdf = half * (T::one() + erf(v * inv_sqrt2));
            let pdf = inv_sqrt_2pi * (-(half * v * v)).exp();
            cdf + v * pdf
        },
    )
}

pub fn exp<T: Scalar>(x: &Var<T>) -> Var<T> {
    map(x, |v| v.exp(), |_, y| y)
}

pub fn recip<T: Scalar>(x: &Var<T>) -> Var<T> {
    map(x, |v| T::one() / v, |_, y| -(y * y))
}

/// `max(x, lo)`; the gradient is zero where the bound is active.
pub fn clamp_min<T: Scalar>(x: &Var<T>, lo: T) -> Var<T> {
    map(x, move |v| v.max(lo), move |v, _| if v > lo { T::one() } else { T::zero() })
}

pub fn reshape<T: Scalar>(x: &Var<T>, shape: &[usize]) -> Var<T> {
    let from = x.shape().to_vec();
    let out = x
        .value()
        .to_shape(IxDyn(shape))
        .unwrap_or_else(|e| panic!("reshape {from:?} -> {shape:?}: {e}"))
        .into_owned();
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| vec![Some(g.to_shape(IxDyn(&from)).expect("reshape back").into_owned())]),
    )
}

pub fn permute<T: Scalar>(x: &Var<T>, axes: &[usize]) -> Var<T> {
    let out = x.value().clone().permuted_axes(IxDyn(axes)).as_standard_layout().into_owned();
    let mut inverse = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inverse[a] = i;
    }
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            vec![Some(g.view().permuted_axes(IxDyn(&inverse)).as_standard_layout().into_owned())]
        }),
    )
}

fn roll_array<T: Scalar>(x: &ArrayD<T>, shifts: &[(usize, isize)]) -> ArrayD<T> {
    let mut out = x.clone();
    for &(axis, shift) in shifts {
        let n = out.shape()[axis] as isize;
        if n == 0 {
            continue;
        }
        let k = shift.rem_euclid(n) as usize;
        if k == 0 {
            continue;
        }
        let split = n as usize - k;
        let tail = out.slice_axis(Axis(axis), Slice::from(split..));
        let head = out.slice_axis(Axis(axis), Slice::from(..split));
        out = concatenate(Axis(axis), &[tail, head]).expect("roll concat");
    }
    out
}

/// Cyclic shift: element `i` moves to `i + shift (mod n)` along each axis.
pub fn roll<T: Scalar>(x: &Var<T>, shifts: &[(usize, isize)]) -> Var<T> {
    let out = roll_array(&owned(x), shifts);
    let back: Vec<(usize, isize)> = shifts.iter().map(|&(a, s)| (a, -s)).collect();
    Var::from_op(out, vec![x.clone()], Box::new(move |g| vec![Some(roll_array(g, &back))]))
}

pub fn concat<T: Scalar>(parts: &[Var<T>], axis: usize) -> Var<T> {
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    let out = concatenate(Axis(axis), &views).expect("concat shapes");
    let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
    Var::from_op(
        out,
        parts.to_vec(),
        Box::new(move |g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&n| {
                    let piece = g.slice_axis(Axis(axis), Slice::from(start..start + n)).to_owned();
                    start += n;
                    Some(piece)
                })
                .collect()
        }),
    )
}

/// Contiguous sub-range `start..start + len` along `axis`.
pub fn narrow<T: Scalar>(x: &Var<T>, axis: usize, start: usize, len: usize) -> Var<T> {
    let out = x.value().slice_axis(Axis(axis), Slice::from(start..start + len)).to_owned();
    let full = x.shape().to_vec();
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = ArrayD::zeros(IxDyn(&full));
            gx.slice_axis_mut(Axis(axis), Slice::from(start..start + len)).assign(g);
            vec![Some(gx)]
        }),
    )
}

/// Rows of a 2-d `table` selected by `index`; output `[index.len(), cols]`.
pub fn gather_rows<T: Scalar>(table: &Var<T>, index: &[usize]) -> Var<T> {
    assert_eq!(table.ndim(), 2, "gather_rows expects a 2-d table");
    let t = table.value().view().into_dimensionality::<ndarray::Ix2>().expect("2-d");
    let cols = t.ncols();
    let mut out = Array2::<T>::zeros((index.len(), cols));
    for (r, &i) in index.iter().enumerate() {
        out.row_mut(r).assign(&t.row(i));
    }
    let rows = t.nrows();
    let index = index.to_vec();
    Var::from_op(
        out.into_dyn(),
        vec![table.clone()],
        Box::new(move |g| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().expect("2-d grad");
            let mut gt = Array2::<T>::zeros((rows, cols));
            for (r, &i) in index.iter().enumerate() {
                let mut dst = gt.row_mut(i);
                dst += &g2.row(r);
            }
            vec![Some(gt.into_dyn())]
        }),
    )
}

pub fn sum_all<T: Scalar>(x: &Var<T>) -> Var<T> {
    let total: T = x.value().iter().copied().sum();
    let shape = x.shape().to_vec();
    Var::from_op(
        ArrayD::from_elem(IxDyn(&[]), total),
        vec![x.clone()],
        Box::new(move |g| vec![Some(ArrayD::from_elem(IxDyn(&shape), g[IxDyn(&[])]))]),
    )
}

pub fn mean_all<T: Scalar>(x: &Var<T>) -> Var<T> {
    let n = lit::<T>(x.value().len() as f64);
    scale(&sum_all(x), T::one() / n)
}

/// Mean over `axes`, keeping them as size-1 dimensions.
pub fn mean_axes_keep<T: Scalar>(x: &Var<T>, axes: &[usize]) -> Var<T> {
    let mut out = owned(x);
    let mut count = 1usize;
    for &a in axes {
        count *= out.shape()[a];
        out = out.sum_axis(Axis(a)).insert_axis(Axis(a));
    }
    let inv = T::one() / lit::<T>(count as f64);
    out.mapv_inplace(|v| v * inv);
    let shape = x.shape().to_vec();
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let gx = g.broadcast(IxDyn(&shape)).expect("broadcast mean grad").mapv(|v| v * inv);
            vec![Some(gx)]
        }),
    )
}

/// Softmax over the last axis.
pub fn softmax_last<T: Scalar>(x: &Var<T>) -> Var<T> {
    let last = Axis(x.ndim() - 1);
    let mut out = owned(x);
    for mut lane in out.lanes_mut(last) {
        let m = lane.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in lane.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in lane.iter_mut() {
            *v /= total;
        }
    }
    let y = out.clone().into_shared();
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = g.clone();
            Zip::from(gx.lanes_mut(last)).and(y.lanes(last)).for_each(|mut gl, yl| {
                let dot: T = gl.iter().zip(yl.iter()).map(|(&a, &b)| a * b).sum();
                Zip::from(&mut gl).and(&yl).for_each(|gi, &yi| *gi = yi * (*gi - dot));
            });
            vec![Some(gx)]
        }),
    )
}

/// `x / max(||x||, eps)` over the last axis.
pub fn l2_normalize_last<T: Scalar>(x: &Var<T>, eps: T) -> Var<T> {
    let last = Axis(x.ndim() - 1);
    let mut out = owned(x);
    let mut norms = Vec::with_capacity(out.len() / out.shape()[last.0].max(1));
    for mut lane in out.lanes_mut(last) {
        let n = lane.iter().map(|&v| v * v).sum::<T>().sqrt();
        let d = n.max(eps);
        lane.mapv_inplace(|v| v / d);
        norms.push(n);
    }
    let y = out.clone().into_shared();
    Var::from_op(
        out,
        vec![x.clone()],
        Box::new(move |g| {
            let mut gx = g.clone();
            for ((mut gl, yl), &n) in gx.lanes_mut(last).into_iter().zip(y.lanes(last)).zip(norms.iter()) {
                if n > eps {
                    let dot: T = gl.iter().zip(yl.iter()).map(|(&a, &b)| a * b).sum();
                    Zip::from(&mut gl).and(&yl).for_each(|gi, &yi| *gi = (*gi - yi * dot) / n);
                } else {
                    gl.mapv_inplace(|v| v / eps);
                }
            }
            vec![Some(gx)]
        }),
    )
}

fn as_matrix<T: Scalar>(a: ArrayViewD<'_, T>) -> ArrayView2<'_, T> {
    let cols = *a.shape().last().expect("at least 1-d");
    let rows = a.len() / cols.max(1);
    a.into_shape_with_order((rows, cols)).expect("standard layout")
}

fn matrix<T: Scalar>(a: &Shared<T>) -> ArrayView2<'_, T> {
    a.view().into_dimensionality::<ndarray::Ix2>().expect("2-d weight")
}

/// `x · Wᵀ + b` over the last axis; `weight` is `[out, in]`.
pub fn linear<T: Scalar>(x: &Var<T>, weight: &Var<T>, bias: Option<&Var<T>>) -> Var<T> {
    let in_dim = *x.shape().last().expect("linear input rank >= 1");
    let (out_dim, w_in) = (weight.shape()[0], weight.shape()[1]);
    assert_eq!(in_dim, w_in, "linear: input features {in_dim} vs weight {:?}", weight.shape());
    let xv = x.value().clone();
    let wv = weight.value().clone();
    let x2 = as_matrix(xv.view());
    let mut y = Array2::<T>::zeros((x2.nrows(), out_dim));
    general_mat_mul(T::one(), &x2, &matrix(&wv).t(), T::zero(), &mut y);
    if let Some(b) = bias {
        let bv = b.value().view().into_dimensionality::<ndarray::Ix1>().expect("1-d bias");
        y += &bv;
    }
    let mut out_shape = x.shape().to_vec();
    *out_shape.last_mut().expect("rank") = out_dim;
    let out = y.into_shape_with_order(IxDyn(&out_shape)).expect("linear reshape");

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    let (rx, rw) = (x.requires_grad(), weight.requires_grad());
    let x_shape = x.shape().to_vec();
    Var::from_op(
        out,
        parents,
        Box::new(move |g| {
            let g2 = as_matrix(g.view());
            let gx = rx.then(|| {
                let mut gx = Array2::<T>::zeros((g2.nrows(), in_dim));
                general_mat_mul(T::one(), &g2, &matrix(&wv), T::zero(), &mut gx);
                gx.into_shape_with_order(IxDyn(&x_shape)).expect("grad x shape")
            });
            let gw = rw.then(|| {
                let x2 = as_matrix(xv.view());
                let mut gw = Array2::<T>::zeros((out_dim, in_dim));
                general_mat_mul(T::one(), &g2.t(), &x2, T::zero(), &mut gw);
                gw.into_dyn()
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(Some(g2.sum_axis(Axis(0)).into_dyn()));
            }
            grads
        }),
    )
}

fn batched_product<T: Scalar>(a: ArrayView3<'_, T>, b: ArrayView3<'_, T>, ta: bool, tb: bool) -> Array3<T> {
    let batch = a.shape()[0];
    let rows = if ta { a.shape()[2] } else { a.shape()[1] };
    let cols = if tb { b.shape()[1] } else { b.shape()[2] };
    let mut out = Array3::<T>::zeros((batch, rows, cols));
    for i in 0..batch {
        let ai = a.index_axis(Axis(0), i);
        let bi = b.index_axis(Axis(0), i);
        let ai = if ta { ai.reversed_axes() } else { ai };
        let bi = if tb { bi.reversed_axes() } else { bi };
        let mut oi = out.slice_mut(s![i, .., ..]);
        general_mat_mul(T::one(), &ai, &bi, T::zero(), &mut oi);
    }
    out
}

fn view3<T: Scalar, S: ndarray::Data<Elem = T>>(a: &ndarray::ArrayBase<S, IxDyn>) -> ArrayView3<'_, T> {
    a.view().into_dimensionality::<ndarray::Ix3>().expect("3-d operand")
}

/// Batched product `a[i] · b[i]`, or `a[i] · b[i]ᵀ` when `transpose_b`.
pub fn bmm<T: Scalar>(a: &Var<T>, b: &Var<T>, transpose_b: bool) -> Var<T> {
    let av = a.value().clone();
    let bv = b.value().clone();
    let out = batched_product(view3(&av), view3(&bv), false, transpose_b).into_dyn();
    let (ra, rb) = (a.requires_grad(), b.requires_grad());
    Var::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            let g3 = view3(g);
            let (a3, b3) = (view3(&av), view3(&bv));
            if transpose_b {
                // C = A Bᵀ: dA = dC B, dB = dCᵀ A
                let ga = ra.then(|| batched_product(g3, b3, false, false).into_dyn());
                let gb = rb.then(|| batched_product(g3, a3, true, false).into_dyn());
                vec![ga, gb]
            } else {
                // C = A B: dA = dC Bᵀ, dB = Aᵀ dC
                let ga = ra.then(|| batched_product(g3, b3, false, true).into_dyn());
                let gb = rb.then(|| batched_product(a3, g3, true, false).into_dyn());
                vec![ga, gb]
            }
        }),
    )
}

/// Mean binary cross-entropy between `logits` and binary `target`, computed
/// as `max(x, 0) - x·t + ln(1 + e^{-|x|})`.
pub fn bce_with_logits_mean<T: Scalar>(logits: &Var<T>, target: &ArrayD<T>) -> Var<T> {
    assert_eq!(logits.shape(), target.shape(), "bce shapes");
    let n = lit::<T>(target.len() as f64);
    let total: T = logits
        .value()
        .iter()
        .zip(target.iter())
        .map(|(&x, &t)| x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p())
        .sum();
    let xv = logits.value().clone();
    let tv = target.clone();
    Var::from_op(
        ArrayD::from_elem(IxDyn(&[]), total / n),
        vec![logits.clone()],
        Box::new(move |g| {
            let scale = g[IxDyn(&[])] / n;
            let mut gx = ArrayD::zeros(xv.raw_dim());
            Zip::from(&mut gx)
                .and(&xv)
                .and(&tv)
                .for_each(|gi, &x, &t| *gi = (logistic_scalar(x) - t) * scale);
            vec![Some(gx)]
        }),
    )
}
