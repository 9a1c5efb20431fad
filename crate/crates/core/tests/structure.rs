use fcbswin::fcb::{residual_block_postnorm, residual_block_specs};
use fcbswin::gradcheck::{jittered_store, random_array};
use fcbswin::params::{Binder, ParamStore};
use fcbswin::rng::SplitMix64;
use fcbswin::swin::{block_specs, scaled_cosine_probs, scse, scse_specs, swinv2_block, window_partition, window_reverse, BlockGeom};
use fcbswin::tensor::conv::conv2d;
use fcbswin::Var;
use ndarray::{ArrayD, Axis, IxDyn};
use proptest::prelude::*;

fn zero(store: &mut ParamStore<f64>, name: &str) {
    let shape = store.value(name).unwrap().shape().to_vec();
    store.set(name, ArrayD::zeros(IxDyn(&shape))).unwrap();
}

fn fill(store: &mut ParamStore<f64>, name: &str, v: f64) {
    let shape = store.value(name).unwrap().shape().to_vec();
    store.set(name, ArrayD::from_elem(IxDyn(&shape), v)).unwrap();
}

#[test]
fn residual_block_zero_branch_is_identity() {
    let mut rng = SplitMix64::new(1);
    let mut store = jittered_store(&residual_block_specs("rb", 8, 8), 3, 0.5).unwrap();
    zero(&mut store, "rb.norm2.weight");
    zero(&mut store, "rb.norm2.bias");
    let x = Var::constant(random_array(&[2, 8, 6, 6], 2.0, &mut rng));
    let y = residual_block_postnorm(&Binder::inference(&store), "rb", &x, 4).unwrap();
    assert_eq!(y.value(), x.value());

    let mut store = jittered_store(&residual_block_specs("rb", 4, 8), 4, 0.5).unwrap();
    zero(&mut store, "rb.norm2.weight");
    zero(&mut store, "rb.norm2.bias");
    let x = Var::constant(random_array(&[1, 4, 5, 5], 2.0, &mut rng));
    let b = Binder::inference(&store);
    let y = residual_block_postnorm(&b, "rb", &x, 4).unwrap();
    let proj = conv2d(&x, &b.param("rb.proj.weight").unwrap(), Some(&b.param("rb.proj.bias").unwrap()), 1, 0);
    assert_eq!(y.value(), proj.value());
}

#[test]
fn swin_block_zero_branches_are_identity() {
    let mut rng = SplitMix64::new(2);
    let mut store = jittered_store(&block_specs("blk", 8, 2, 2, 4.0), 5, 0.5).unwrap();
    for n in ["blk.norm1.weight", "blk.norm1.bias", "blk.norm2.weight", "blk.norm2.bias"] {
        zero(&mut store, n);
    }
    let x = Var::constant(random_array(&[1, 4, 4, 8], 2.0, &mut rng));
    for shift in [0, 1] {
        let geom = BlockGeom { heads: 2, window: 2, shift };
        let y = swinv2_block(&Binder::inference(&store), "blk", &x, geom, 0.01).unwrap();
        assert_eq!(y.value(), x.value());
    }
}

fn attention_inputs(seed: u64) -> (ArrayD<f64>, ArrayD<f64>, Var<f64>, Var<f64>) {
    let mut rng = SplitMix64::new(seed);
    let q = random_array(&[3, 2, 9, 4], 1.5, &mut rng);
    let k = random_array(&[3, 2, 9, 4], 1.5, &mut rng);
    let inv_temp = Var::constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![10.0, 3.0]).unwrap());
    let bias = Var::constant(random_array(&[2, 9, 9], 0.5, &mut rng));
    (q, k, inv_temp, bias)
}

#[test]
fn attention_rows_sum_to_one() {
    let (q, k, t, b) = attention_inputs(3);
    let p = scaled_cosine_probs(&Var::constant(q), &Var::constant(k), &t, &b, None);
    for s in p.value().sum_axis(Axis(3)).iter() {
        assert!((s - 1.0).abs() <= 1e-6, "{s}");
    }
    assert!(p.value().iter().all(|&v| v >= 0.0));
}

proptest! {
    #[test]
    fn attention_ignores_query_and_key_scale(seed: u64, a in 0.01f64..100.0, c in 0.01f64..100.0) {
        let (q, k, t, b) = attention_inputs(seed);
        let base = scaled_cosine_probs(&Var::constant(q.clone()), &Var::constant(k.clone()), &t, &b, None);
        let scaled = scaled_cosine_probs(&Var::constant(q * a), &Var::constant(k * c), &t, &b, None);
        for (x, y) in base.value().iter().zip(scaled.value().iter()) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn window_round_trip_is_exact(b in 1usize..3, nh in 1usize..4, nw in 1usize..4, m in 1usize..5, c in 1usize..4, seed: u64) {
        let mut rng = SplitMix64::new(seed);
        let x = Var::constant(random_array(&[b, nh * m, nw * m, c], 1.0, &mut rng));
        let w = window_partition(&x, m).unwrap();
        prop_assert_eq!(w.shape(), &[b * nh * nw, m * m, c][..]);
        let back = window_reverse(&w, m, nh * m, nw * m).unwrap();
        prop_assert_eq!(back.value(), x.value());
    }
}

#[test]
fn scse_with_open_gates_doubles_input() {
    let mut rng = SplitMix64::new(4);
    let mut store = jittered_store(&scse_specs("g", 8, 2), 6, 0.5).unwrap();
    for n in ["g.cse.fc2.weight", "g.sse.weight"] {
        zero(&mut store, n);
    }
    fill(&mut store, "g.cse.fc2.bias", 40.0);
    fill(&mut store, "g.sse.bias", 40.0);
    let x = random_array(&[2, 8, 5, 5], 3.0, &mut rng);
    let y = scse(&Binder::inference(&store), "g", &Var::constant(x.clone()), 2).unwrap();
    for (a, b) in y.value().iter().zip(x.iter()) {
        assert!((a - 2.0 * b).abs() <= 1e-6);
    }
}
