use fcbswin::model::{ModelConfig, SegModel};
use fcbswin::rng::SplitMix64;
use fcbswin::trainer::{
    adamw_step, read_checkpoint, train, AdamHyper, AdamState, InMemorySource, TrainConfig, TrainError, CHECKPOINT_META,
    TRAIN_LOG,
};
use fcbswin::ParamStore;
use ndarray::{Array2, Array3, ArrayD, IxDyn};

fn tiny_source(n: usize, seed: u64) -> InMemorySource {
    let mut rng = SplitMix64::new(seed);
    let items = (0..n)
        .map(|i| {
            let img = Array3::from_shape_simple_fn((40, 52, 3), || rng.unit() as f32);
            let mask = Array2::from_shape_fn((40, 52), |(y, x)| u8::from(y > 10 + i && x < 30));
            (format!("s{i}.png"), img, mask)
        })
        .collect();
    InMemorySource { items }
}

fn short_config() -> TrainConfig {
    TrainConfig { epochs: 2, batch_size: 2, lr0: 1e-3, global_seed: 4, ..TrainConfig::default() }
}

#[test]
fn same_seed_same_weights() {
    let data = tiny_source(3, 1);
    let run = || {
        let mut m = SegModel::<f32>::new(ModelConfig::toy(), 2).unwrap();
        let r = train(&mut m, &short_config(), &data, &data, None).unwrap();
        (m.params.to_archive_bytes(), r.state.log)
    };
    let (a, log_a) = run();
    let (b, log_b) = run();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_eq!(log_a.len(), 2);
}

#[test]
fn checkpoint_and_log_written() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_source(2, 3);
    let mut m = SegModel::<f32>::new(ModelConfig::toy(), 2).unwrap();
    let r = train(&mut m, &short_config(), &data, &data, Some(dir.path())).unwrap();
    let (loaded, meta) = read_checkpoint(dir.path()).unwrap();
    assert_eq!(Some(meta.epoch), r.state.checkpoint.best_epoch);
    assert_eq!(meta.config_hash, ModelConfig::toy().hash());
    assert_eq!(meta.val_mdice, r.state.checkpoint.best_val_dice);
    assert_eq!(loaded.config, ModelConfig::toy());
    let log = std::fs::read_to_string(dir.path().join(TRAIN_LOG)).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(std::fs::read_to_string(dir.path().join(CHECKPOINT_META)).unwrap().contains("\"config_hash\""));
}

#[test]
fn empty_validation_split_rejected() {
    let mut m = SegModel::<f32>::new(ModelConfig::toy(), 2).unwrap();
    let err = train(&mut m, &short_config(), &tiny_source(2, 1), &InMemorySource::default(), None).unwrap_err();
    assert!(matches!(err, TrainError::EmptyPartition(_)));
    let bad = TrainConfig { plateau_factor: 1.5, ..short_config() };
    assert!(matches!(train(&mut m, &bad, &tiny_source(2, 1), &tiny_source(1, 2), None), Err(TrainError::InvalidConfig(_))));
}

/// Decoupled-decay Adam written out scalar by scalar.
fn reference_adamw(theta: &mut [f64], grads: &[Vec<f64>], lr: f64, hp: AdamHyper) {
    let (mut m, mut v) = (vec![0.0; theta.len()], vec![0.0; theta.len()]);
    for (t, g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        for i in 0..theta.len() {
            theta[i] -= lr * hp.weight_decay * theta[i];
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
            let mh = m[i] / (1.0 - hp.beta1.powi(t));
            let vh = v[i] / (1.0 - hp.beta2.powi(t));
            theta[i] -= lr * mh / (vh.sqrt() + hp.eps);
        }
    }
}

#[test]
fn adamw_matches_reference_over_many_steps() {
    let mut rng = SplitMix64::new(5);
    let init: Vec<f64> = (0..6).map(|_| rng.uniform(-1.0, 1.0)).collect();
    let grads: Vec<Vec<f64>> = (0..25).map(|_| (0..6).map(|_| rng.uniform(-2.0, 2.0)).collect()).collect();
    let hp = AdamHyper::default();
    let mut expected = init.clone();
    reference_adamw(&mut expected, &grads, 1e-2, hp);

    let mut store = ParamStore::<f64>::new();
    store.insert("w", ArrayD::from_shape_vec(IxDyn(&[2, 3]), init).unwrap()).unwrap();
    let mut state = AdamState::default();
    for g in &grads {
        store.zero_grad();
        store.accumulate_grad("w", &ArrayD::from_shape_vec(IxDyn(&[2, 3]), g.clone()).unwrap()).unwrap();
        adamw_step(&mut store, &mut state, 1e-2, hp).unwrap();
    }
    for (a, b) in store.value("w").unwrap().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-14, "{a} vs {b}");
    }
    assert_eq!(state.step, 25);
}
