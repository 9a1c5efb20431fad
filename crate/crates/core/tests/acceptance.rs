//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line.

use std::collections::{BTreeSet, HashSet};
use std::time::{Duration, Instant};

use fcbswin::augment::{augment_pair, geometric_augment, is_binary, resize_pair, warp_pair, AugmentConfig, GeometricParams, SampleRng};
use fcbswin::datakit::{
    audit_leakage, random_partition, sequence_partition, sorted_fixed_partition, DatasetIndex, DatasetKind, Ratios,
    SequenceMap,
};
use fcbswin::evalkit::{image_metrics, ImageMetrics};
use fcbswin::fcb::{residual_block_postnorm, residual_block_specs};
use fcbswin::gradcheck::{jittered_store, random_array, run_suite, LOSS_TOLERANCE, MODEL_TOLERANCE, MODULE_TOLERANCE};
use fcbswin::model::{ModelConfig, SegModel};
use fcbswin::params::Binder;
use fcbswin::rng::SplitMix64;
use fcbswin::swin::{encoder_forward, scaled_cosine_probs, scse, scse_specs, window_partition, window_reverse};
use fcbswin::trainer::{evaluate, train, EvalResolution, InMemorySource, TrainConfig, TrainState};
use fcbswin::Var;
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use sha2::{Digest, Sha256};

fn verdict(id: u32, name: &str, ok: bool, detail: String) {
    println!("{} criterion {id} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {id} {name} failed: {detail}");
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

const KVASIR_SORTED_MANIFEST_SHA256: &str = "b3a91475d7fb85ff5a9d9115038307712d318327ab5a293b1ffede78ff174728";

fn kvasir_names() -> Vec<String> {
    const ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";
    let mut rng = SplitMix64::new(0x6b76);
    (0..1000)
        .map(|_| (0..25).map(|_| ALPHABET[rng.below(36) as usize] as char).collect::<String>() + ".jpg")
        .collect()
}

#[test]
fn criterion_1_partition_fixtures() {
    const LIMIT: Duration = Duration::from_secs(1);
    let t = Instant::now();
    let names = kvasir_names();
    let index = DatasetIndex::from_filenames(DatasetKind::KvasirSeg, &names).unwrap();
    let first = sorted_fixed_partition(&index, Ratios::DEFAULT).unwrap().to_json();
    let second = sorted_fixed_partition(&index, Ratios::DEFAULT).unwrap().to_json();
    let spec = sorted_fixed_partition(&index, Ratios::DEFAULT).unwrap();
    let sizes = (spec.train.len(), spec.val.len(), spec.test.len());
    let digest: String = Sha256::digest(first.as_bytes()).iter().map(|b| format!("{b:02x}")).collect();
    let elapsed = t.elapsed();
    let ok = sizes == (800, 100, 100) && first == second && digest == KVASIR_SORTED_MANIFEST_SHA256 && elapsed < LIMIT;
    verdict(1, "partition fixtures", ok, format!("sizes {sizes:?}, manifest sha256 {digest}, {}", secs(elapsed)));
}

#[test]
fn criterion_2_leakage_audit() {
    const LIMIT: Duration = Duration::from_secs(1);
    let t = Instant::now();
    let names: Vec<String> = (1..=612).map(|i| format!("{i}.tif")).collect();
    let index = DatasetIndex::from_filenames(DatasetKind::CvcClinicDb, &names).unwrap();
    let map = SequenceMap::example_cvc();
    let grouped = sequence_partition(&index, &map, &BTreeSet::from([4, 19, 26]), &BTreeSet::from([11, 18, 23])).unwrap();
    let grouped_report = audit_leakage(&grouped, &map).unwrap();
    let random = random_partition(&index, Ratios::DEFAULT, 0).unwrap();
    let random_report = audit_leakage(&random, &map).unwrap();
    let elapsed = t.elapsed();
    let ok = grouped_report.is_clean && !random_report.is_clean && elapsed < LIMIT;
    verdict(
        2,
        "leakage audit",
        ok,
        format!(
            "grouped split clean={}, random split leaking sequences={}, {}",
            grouped_report.is_clean,
            random_report.leaking_sequences.len(),
            secs(elapsed)
        ),
    );
}

fn brute_force(pred: &Array2<u8>, gt: &Array2<u8>) -> ImageMetrics {
    let set = |m: &Array2<u8>| -> HashSet<(usize, usize)> { m.indexed_iter().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect() };
    let (p, g) = (set(pred), set(gt));
    if p.is_empty() && g.is_empty() {
        return ImageMetrics { dice: 1.0, iou: 1.0, precision: 1.0, recall: 1.0 };
    }
    let inter = p.intersection(&g).count() as f64;
    let ratio = |a: f64, b: usize| if b == 0 { 0.0 } else { a / b as f64 };
    ImageMetrics {
        dice: ratio(2.0 * inter, p.len() + g.len()),
        iou: ratio(inter, p.union(&g).count()),
        precision: ratio(inter, p.len()),
        recall: ratio(inter, g.len()),
    }
}

#[test]
fn criterion_3_metric_oracle() {
    const LIMIT: Duration = Duration::from_secs(5);
    const IDENTITY_TOL: f64 = 1e-12;
    let t = Instant::now();
    let mut rng = SplitMix64::new(31);
    let (mut mismatches, mut worst) = (0, 0.0f64);
    for _ in 0..1000 {
        let (dp, dg) = (rng.unit(), rng.unit());
        let pred = Array2::from_shape_simple_fn((16, 16), || u8::from(rng.unit() < dp));
        let gt = Array2::from_shape_simple_fn((16, 16), || u8::from(rng.unit() < dg));
        let m = image_metrics(&pred.clone().into_dyn(), &gt.clone().into_dyn()).unwrap();
        mismatches += usize::from(m != brute_force(&pred, &gt));
        let hm = if m.precision + m.recall == 0.0 { 0.0 } else { 2.0 * m.precision * m.recall / (m.precision + m.recall) };
        worst = worst.max((m.dice - 2.0 * m.iou / (1.0 + m.iou)).abs()).max((m.dice - hm).abs());
    }
    let elapsed = t.elapsed();
    let ok = mismatches == 0 && worst <= IDENTITY_TOL && elapsed < LIMIT;
    verdict(3, "metric oracle", ok, format!("{mismatches} mismatches in 1000 pairs, identity error {worst:.2e}, {}", secs(elapsed)));
}

#[test]
fn criterion_4_gradient_suite() {
    const LIMIT: Duration = Duration::from_secs(120);
    let t = Instant::now();
    let reports = run_suite().unwrap();
    let elapsed = t.elapsed();
    let expected = [
        ("cosine_window_attention", MODULE_TOLERANCE),
        ("swinv2_block", MODULE_TOLERANCE),
        ("patch_merge", MODULE_TOLERANCE),
        ("scse", MODULE_TOLERANCE),
        ("residual_block_postnorm", MODULE_TOLERANCE),
        ("decoder_block", MODULE_TOLERANCE),
        ("bce_dice_loss", LOSS_TOLERANCE),
        ("model_end_to_end", MODEL_TOLERANCE),
    ];
    assert_eq!((MODULE_TOLERANCE, LOSS_TOLERANCE, MODEL_TOLERANCE), (1e-4, 1e-6, 1e-3));
    let mut ok = elapsed < LIMIT && reports.len() == expected.len();
    let mut parts = Vec::new();
    for ((name, tol), r) in expected.iter().zip(&reports) {
        ok &= r.name == *name && r.tolerance == *tol && r.passed() && r.probes > 0;
        parts.push(format!("{} {:.1e}", r.name, r.max_rel_error));
    }
    verdict(4, "gradient suite", ok, format!("{}; {}", parts.join(", "), secs(elapsed)));
}

#[test]
fn criterion_5_structural_identities() {
    const TOL: f64 = 1e-6;
    let mut rng = SplitMix64::new(5);

    let mut store = jittered_store(&residual_block_specs("rb", 8, 8), 3, 0.5).unwrap();
    for n in ["rb.norm2.weight", "rb.norm2.bias"] {
        store.set(n, ArrayD::zeros(IxDyn(&[8]))).unwrap();
    }
    let x = Var::constant(random_array(&[2, 8, 6, 6], 2.0, &mut rng));
    let zero_branch = residual_block_postnorm(&Binder::inference(&store), "rb", &x, 4).unwrap().value() == x.value();

    let grid = Var::constant(random_array(&[2, 12, 8, 3], 1.0, &mut rng));
    let back = window_reverse(&window_partition(&grid, 4).unwrap(), 4, 12, 8).unwrap();
    let round_trip = back.value() == grid.value();

    let q = random_array(&[4, 2, 16, 8], 1.0, &mut rng);
    let k = Var::constant(random_array(&[4, 2, 16, 8], 1.0, &mut rng));
    let inv_temp = Var::constant(ArrayD::from_shape_vec(IxDyn(&[2]), vec![10.0, 100.0]).unwrap());
    let bias = Var::constant(random_array(&[2, 16, 16], 1.0, &mut rng));
    let p = scaled_cosine_probs(&Var::constant(q.clone()), &k, &inv_temp, &bias, None);
    let row_err = p.value().sum_axis(Axis(3)).iter().map(|s| (s - 1.0).abs()).fold(0.0, f64::max);
    let p7 = scaled_cosine_probs(&Var::constant(q * 7.0), &k, &inv_temp, &bias, None);
    let scale_err = p.value().iter().zip(p7.value().iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let mut store = jittered_store(&scse_specs("g", 8, 2), 6, 0.5).unwrap();
    store.set("g.cse.fc2.weight", ArrayD::zeros(IxDyn(&[8, 4, 1, 1]))).unwrap();
    store.set("g.sse.weight", ArrayD::zeros(IxDyn(&[1, 8, 1, 1]))).unwrap();
    store.set("g.cse.fc2.bias", ArrayD::from_elem(IxDyn(&[8]), 40.0)).unwrap();
    store.set("g.sse.bias", ArrayD::from_elem(IxDyn(&[1]), 40.0)).unwrap();
    let x = random_array(&[2, 8, 5, 5], 3.0, &mut rng);
    let y = scse(&Binder::inference(&store), "g", &Var::constant(x.clone()), 2).unwrap();
    let scse_err = y.value().iter().zip(x.iter()).map(|(a, b)| (a - 2.0 * b).abs()).fold(0.0, f64::max);

    let ok = zero_branch && round_trip && row_err <= TOL && scale_err <= TOL && scse_err <= TOL;
    verdict(
        5,
        "structural identities",
        ok,
        format!(
            "zero-branch exact={zero_branch}, window round trip exact={round_trip}, row-sum err {row_err:.1e}, \
             query-scale err {scale_err:.1e}, scse 2x err {scse_err:.1e}"
        ),
    );
}

#[test]
fn criterion_6_full_size_shape_contract() {
    const LIMIT: Duration = Duration::from_secs(60);
    let cfg = ModelConfig::base();
    let model = SegModel::<f32>::new(cfg.clone(), 1).unwrap();
    let image = ArrayD::from_shape_fn(IxDyn(&[1, 3, 384, 384]), |i| ((i[1] * 5 + i[2] * 7 + i[3]) % 13) as f32 / 6.5 - 1.0);
    let t = Instant::now();
    let logits = model.predict(&image).unwrap();
    let forward_time = t.elapsed();
    let enc = encoder_forward(&Binder::inference(&model.params), "swin", &cfg.swin, &Var::constant(image)).unwrap();
    let skip_shapes: Vec<Vec<usize>> = enc.skips.iter().map(|s| s.shape().to_vec()).collect();
    // [B, C, H, W] per stage: 384/4 = 96 at C = 128, then halving side and doubling width.
    let expected: Vec<Vec<usize>> = vec![vec![1, 128, 96, 96], vec![1, 256, 48, 48], vec![1, 512, 24, 24], vec![1, 1024, 12, 12]];
    let ok = logits.shape() == [1, 1, 384, 384]
        && skip_shapes == expected
        && logits.iter().all(|v| v.is_finite())
        && forward_time < LIMIT;
    verdict(
        6,
        "full-size shape contract",
        ok,
        format!("logits {:?}, skips {skip_shapes:?}, forward {}", logits.shape(), secs(forward_time)),
    );
}

/// Four textured images, each with one elliptical polyp of a different size and place.
fn synthetic_pairs(size: usize) -> InMemorySource {
    let mut rng = SplitMix64::new(77);
    let shapes = [(0.35, 0.40, 0.20, 0.14), (0.62, 0.58, 0.16, 0.22), (0.30, 0.70, 0.12, 0.12), (0.68, 0.30, 0.24, 0.18)];
    let items = shapes
        .iter()
        .enumerate()
        .map(|(i, &(cy, cx, ry, rx))| {
            let s = size as f64;
            let inside = |y: usize, x: usize| ((y as f64 / s - cy) / ry).powi(2) + ((x as f64 / s - cx) / rx).powi(2) < 1.0;
            let mask = Array2::from_shape_fn((size, size), |(y, x)| u8::from(inside(y, x)));
            let mut img = Array3::<f32>::zeros((size, size, 3));
            for ((y, x, c), v) in img.indexed_iter_mut() {
                let base = if inside(y, x) { [0.85, 0.45, 0.35][c] } else { [0.55, 0.30, 0.25][c] };
                *v = (base + 0.15 * (rng.unit() - 0.5)) as f32;
            }
            (format!("synthetic_{i}.png"), img, mask)
        })
        .collect();
    InMemorySource { items }
}

#[test]
fn criterion_7_desk_scale_learning() {
    const LIMIT: Duration = Duration::from_secs(300);
    const STEPS: usize = 300;
    const TARGET_MDICE: f64 = 0.95;
    const TOY_LR: f64 = 1e-3;

    let cfg = TrainConfig {
        epochs: STEPS / 2,
        batch_size: 2,
        lr0: TOY_LR,
        augment: None,
        global_seed: 3,
        ..TrainConfig::default()
    };
    let data = synthetic_pairs(64);
    let mut model = SegModel::<f32>::new(ModelConfig::toy(), 11).unwrap();
    let t = Instant::now();
    let report = train(&mut model, &cfg, &data, &data, None).unwrap();
    let train_mdice = evaluate(&model, &data, 0.5, EvalResolution::Model).unwrap().summary.m_dice;
    let elapsed = t.elapsed();
    let best = report.state.checkpoint.best_val_dice;

    let plateau_cfg = TrainConfig { lr0: 1e-5, plateau_factor: 0.6, plateau_patience: 10, ..TrainConfig::default() };
    let mut state = TrainState::new(&plateau_cfg);
    let mut lr_exact = true;
    for epoch in 1..=60usize {
        state.end_epoch(0.5, 0.0);
        let row = state.log[epoch - 1];
        // The first epoch sets the best loss; every tenth stale epoch after it cuts the rate.
        let k = epoch.saturating_sub(2) / 10;
        lr_exact &= row.lr == 1e-5 * 0.6f64.powi(k as i32);
    }
    let lrs: Vec<f64> = state.log.iter().map(|r| r.lr).collect();
    lr_exact &= lrs[11] == 6e-6 && (lrs[21] - 3.6e-6).abs() < 1e-21;

    let ok = report.steps == STEPS && train_mdice > TARGET_MDICE && lr_exact && elapsed < LIMIT;
    verdict(
        7,
        "desk-scale learning",
        ok,
        format!(
            "{} steps at lr {TOY_LR:e}, final training mDice {train_mdice:.4} (best {best:.4}), plateau log exact={lr_exact}, {}",
            report.steps,
            secs(elapsed)
        ),
    );
}

#[test]
fn criterion_8_augmentation_reproducibility() {
    let mut rng = SplitMix64::new(8);
    let img = Array3::from_shape_simple_fn((96, 80, 3), || rng.unit() as f32);
    let mask = Array2::from_shape_fn((96, 80), |(y, x)| u8::from((y as i32 - 40).pow(2) + (x as i32 - 30).pow(2) < 500));
    let cfg = AugmentConfig::default();

    let mut identical = true;
    for key in 0..20u64 {
        let a = augment_pair(&img, &mask, &cfg, 123, key / 4, key).unwrap();
        let b = augment_pair(&img, &mask, &cfg, 123, key / 4, key).unwrap();
        identical &= a.1 == b.1 && a.0.iter().zip(b.0.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
    }

    let mut binary = [0usize; 4];
    for draw in 0..100u64 {
        let mut r = SampleRng::new(9, 0, draw);
        binary[0] += usize::from(is_binary(&geometric_augment(&img, &mask, &mut r, &cfg).unwrap().1));
        let mut r = SampleRng::new(9, 1, draw);
        let flips = GeometricParams { hflip: r.bernoulli(0.5), vflip: r.bernoulli(0.5), ..GeometricParams::IDENTITY };
        binary[1] += usize::from(is_binary(&warp_pair(&img, &mask, &flips).unwrap().1));
        let mut r = SampleRng::new(9, 2, draw);
        let size = (16 + r.uniform([0.0, 100.0]) as usize, 16 + r.uniform([0.0, 100.0]) as usize);
        binary[2] += usize::from(is_binary(&resize_pair(&img, &mask, size).unwrap().1));
        binary[3] += usize::from(is_binary(&augment_pair(&img, &mask, &cfg, 9, 3, draw).unwrap().1));
    }
    let ok = identical && binary == [100; 4];
    verdict(
        8,
        "augmentation reproducibility",
        ok,
        format!("bitwise identical={identical}, binary masks per transform (affine, flip, resize, full) {binary:?} of 100"),
    );
}
