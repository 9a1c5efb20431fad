use fcbswin::augment::{
    augment_pair, color_augment, geometric_augment, is_binary, normalize, resize_pair, warp_pair, AugmentConfig,
    GeometricParams, SampleRng,
};
use fcbswin::rng::SplitMix64;
use ndarray::{Array2, Array3};
use proptest::prelude::*;

fn sample_pair(seed: u64, h: usize, w: usize) -> (Array3<f32>, Array2<u8>) {
    let mut rng = SplitMix64::new(seed);
    let img = Array3::from_shape_simple_fn((h, w, 3), || rng.unit() as f32);
    let (cy, cx, r) = (h as f64 / 2.0, w as f64 / 3.0, h.min(w) as f64 / 3.0);
    let mask = Array2::from_shape_fn((h, w), |(y, x)| u8::from((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2) < r * r));
    (img, mask)
}

fn bits(a: &Array3<f32>) -> Vec<u32> {
    a.iter().map(|v| v.to_bits()).collect()
}

#[test]
fn identical_keys_give_identical_pairs() {
    let (img, mask) = sample_pair(1, 96, 80);
    let cfg = AugmentConfig::default();
    for (epoch, index) in [(0, 0), (3, 17), (199, 999)] {
        let a = augment_pair(&img, &mask, &cfg, 42, epoch, index).unwrap();
        let b = augment_pair(&img, &mask, &cfg, 42, epoch, index).unwrap();
        assert_eq!(bits(&a.0), bits(&b.0));
        assert_eq!(a.1, b.1);
    }
    let a = augment_pair(&img, &mask, &cfg, 42, 1, 2).unwrap();
    for (s, e, i) in [(43, 1, 2), (42, 2, 2), (42, 1, 3)] {
        assert_ne!(bits(&a.0), bits(&augment_pair(&img, &mask, &cfg, s, e, i).unwrap().0));
    }
}

#[test]
fn masks_stay_binary_for_every_transform() {
    let (img, mask) = sample_pair(2, 24, 28);
    let cfg = AugmentConfig::default();
    for draw in 0..100u64 {
        let mut rng = SampleRng::new(7, 0, draw);
        let (_, m) = geometric_augment(&img, &mask, &mut rng, &cfg).unwrap();
        assert!(is_binary(&m), "geometric draw {draw}");

        let mut rng = SampleRng::new(7, 1, draw);
        let flips = GeometricParams { hflip: rng.bernoulli(0.5), vflip: rng.bernoulli(0.5), ..GeometricParams::IDENTITY };
        assert!(is_binary(&warp_pair(&img, &mask, &flips).unwrap().1), "flip draw {draw}");

        let mut rng = SampleRng::new(7, 2, draw);
        let out = (8 + rng.uniform([0.0, 40.0]) as usize, 8 + rng.uniform([0.0, 40.0]) as usize);
        assert!(is_binary(&resize_pair(&img, &mask, out).unwrap().1), "resize draw {draw}");

        let mut rng = SampleRng::new(7, 3, draw);
        let colored = color_augment(&img, &mut rng, &cfg);
        assert!(colored.iter().all(|v| (0.0..=1.0).contains(v)), "color draw {draw}");

        let (_, m) = augment_pair(&img, &mask, &cfg, 7, 4, draw).unwrap();
        assert!(is_binary(&m), "full draw {draw}");
    }
}

#[test]
fn normalized_range() {
    let (img, _) = sample_pair(3, 8, 8);
    assert!(normalize(&img).iter().all(|v| (-1.0..=1.0).contains(v)));
}

proptest! {
    #[test]
    fn flips_move_image_and_mask_together(h in 2usize..20, w in 2usize..20, hflip: bool, vflip: bool, seed: u64) {
        let (_, mask) = sample_pair(seed, h, w);
        let img = Array3::from_shape_fn((h, w, 3), |(y, x, _)| f32::from(mask[[y, x]]));
        let p = GeometricParams { hflip, vflip, ..GeometricParams::IDENTITY };
        let (i2, m2) = warp_pair(&img, &mask, &p).unwrap();
        for ((y, x), &m) in m2.indexed_iter() {
            prop_assert_eq!(i2[[y, x, 0]], f32::from(m));
        }
        let sy = if vflip { h - 1 } else { 0 };
        let sx = if hflip { w - 1 } else { 0 };
        prop_assert_eq!(m2[[0, 0]], mask[[sy, sx]]);
    }

    #[test]
    fn random_affine_keeps_mask_binary(seed: u64, epoch in 0u64..200, index in 0u64..1000) {
        let (img, mask) = sample_pair(seed, 16, 20);
        let (a, m) = augment_pair(&img, &mask, &AugmentConfig::default(), seed, epoch, index).unwrap();
        prop_assert!(is_binary(&m));
        prop_assert!(a.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }
}
