//! Optimization loop: AdamW, plateau learning-rate decay, best-validation
//! checkpointing and per-epoch shuffling keyed by `(seed, epoch)`.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use ndarray::{s, Array2, Array3, ArrayD, Axis, IxDyn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{augment_pair, normalize, resize_pair, AugmentConfig, AugmentError};
use crate::datakit::{read_image, read_mask, DataError, DatasetIndex, Split};
use crate::error::NnError;
use crate::evalkit::{aggregate, bce_dice_loss, binarize, image_metrics, EvalError, ImageRecord, MetricsReport};
use crate::model::{forward, ModelConfig, SegModel};
use crate::params::{Binder, ParamStore};
use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::interp::resize_bilinear;
use crate::tensor::{lit, Scalar, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("the {0} split is empty")]
    EmptyPartition(Split),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("gradient for `{0}` does not match its parameter")]
    ShapeMismatch(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// A loss counts as an improvement only when below `best − plateau_delta`.
    pub plateau_delta: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub global_seed: u64,
    /// `None` trains on resized, normalized samples only.
    pub augment: Option<AugmentConfig>,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 2,
            lr0: 1e-5,
            plateau_factor: 0.6,
            plateau_patience: 10,
            plateau_delta: 1e-8,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            global_seed: 0,
            augment: Some(AugmentConfig::default()),
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.plateau_patience == 0 {
            return bad("plateau_patience must be at least 1");
        }
        if !(self.lr0 > 0.0) || self.weight_decay < 0.0 {
            return bad("lr0 must be positive and weight_decay non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("AdamW betas must lie in [0, 1) and eps must be positive");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    fn adam(&self) -> AdamHyper {
        AdamHyper { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-2 }
    }
}

/// First and second moments per parameter plus the step count.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T: Scalar> {
    pub m: IndexMap<String, ArrayD<T>>,
    pub v: IndexMap<String, ArrayD<T>>,
    pub step: u64,
}

/// One AdamW update of every parameter that holds a gradient:
/// `θ ← θ − lr·wd·θ`, then `θ ← θ − lr·m̂/(√v̂ + eps)` with bias-corrected moments.
pub fn adamw_step<T: Scalar>(params: &mut ParamStore<T>, state: &mut AdamState<T>, lr: f64, hp: AdamHyper) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    let (b1, b2) = (lit::<T>(hp.beta1), lit::<T>(hp.beta2));
    let (one, eps, lr_t) = (T::one(), lit::<T>(hp.eps), lit::<T>(lr));
    let decay = lit::<T>(1.0 - lr * hp.weight_decay);
    let (inv_bc1, inv_bc2) = (lit::<T>(1.0 / bc1), lit::<T>(1.0 / bc2));
    for (name, p) in params.iter_mut() {
        let Some(g) = p.grad.as_ref() else { continue };
        if g.shape() != p.value.shape() {
            return Err(TrainError::ShapeMismatch(name.to_string()));
        }
        let m = state.m.entry(name.to_string()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        let v = state.v.entry(name.to_string()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        ndarray::Zip::from(&mut p.value).and(&mut *m).and(&mut *v).and(g).for_each(|w, m, v, &g| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            let m_hat = *m * inv_bc1;
            let v_hat = *v * inv_bc2;
            *w = *w * decay - lr_t * m_hat / (v_hat.sqrt() + eps);
        });
    }
    Ok(())
}

/// Reduce-on-plateau on the per-epoch mean training loss.
#[derive(Debug, Clone, PartialEq)]
pub struct PlateauState {
    pub lr0: f64,
    pub factor: f64,
    pub patience: usize,
    pub delta: f64,
    pub best_loss: f64,
    pub epochs_since_improvement: usize,
    pub reductions: u32,
}

impl PlateauState {
    pub fn new(lr0: f64, factor: f64, patience: usize, delta: f64) -> Self {
        Self { lr0, factor, patience, delta, best_loss: f64::INFINITY, epochs_since_improvement: 0, reductions: 0 }
    }

    /// `lr0 · factor^reductions`.
    pub fn lr(&self) -> f64 {
        self.lr0 * self.factor.powi(self.reductions as i32)
    }
}

/// Records one epoch's loss; returns the new learning rate when it drops.
pub fn plateau_schedule(state: &mut PlateauState, epoch_train_loss: f64) -> Option<f64> {
    if epoch_train_loss < state.best_loss - state.delta {
        state.best_loss = epoch_train_loss;
        state.epochs_since_improvement = 0;
        return None;
    }
    state.epochs_since_improvement += 1;
    if state.epochs_since_improvement >= state.patience {
        state.epochs_since_improvement = 0;
        state.reductions += 1;
        return Some(state.lr());
    }
    None
}

/// Keeps weights only when validation dice strictly exceeds every earlier value.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTracker {
    pub best_val_dice: f64,
    pub best_epoch: Option<usize>,
}

impl Default for CheckpointTracker {
    fn default() -> Self {
        Self { best_val_dice: f64::NEG_INFINITY, best_epoch: None }
    }
}

impl CheckpointTracker {
    pub fn observe(&mut self, epoch: usize, val_dice: f64) -> bool {
        if val_dice > self.best_val_dice {
            self.best_val_dice = val_dice;
            self.best_epoch = Some(epoch);
            true
        } else {
            false
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mdice: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

pub fn log_to_csv(rows: &[LogRow]) -> Result<String, TrainError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| TrainError::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Per-epoch bookkeeping shared by [`train`] and callers driving epochs themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub epoch: usize,
    pub plateau: PlateauState,
    pub checkpoint: CheckpointTracker,
    pub log: Vec<LogRow>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochOutcome {
    pub checkpoint: bool,
    pub lr_reduced_to: Option<f64>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            epoch: 0,
            plateau: PlateauState::new(cfg.lr0, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_delta),
            checkpoint: CheckpointTracker::default(),
            log: Vec::new(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.plateau.lr()
    }

    /// Closes an epoch: decides on checkpointing, logs the row with the rate
    /// used during the epoch, then applies the plateau rule.
    pub fn end_epoch(&mut self, train_loss: f64, val_mdice: f64) -> EpochOutcome {
        self.epoch += 1;
        let lr = self.current_lr();
        let checkpoint = self.checkpoint.observe(self.epoch, val_mdice);
        self.log.push(LogRow { epoch: self.epoch, train_loss, val_mdice, lr });
        let lr_reduced_to = plateau_schedule(&mut self.plateau, train_loss);
        EpochOutcome { checkpoint, lr_reduced_to }
    }
}

/// Indexed image/mask pairs.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn name(&self, i: usize) -> String;
    fn load(&self, i: usize) -> Result<(Array3<f32>, Array2<u8>), TrainError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Default)]
pub struct InMemorySource {
    pub items: Vec<(String, Array3<f32>, Array2<u8>)>,
}

impl SampleSource for InMemorySource {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn name(&self, i: usize) -> String {
        self.items[i].0.clone()
    }

    fn load(&self, i: usize) -> Result<(Array3<f32>, Array2<u8>), TrainError> {
        Ok((self.items[i].1.clone(), self.items[i].2.clone()))
    }
}

/// Files of one split read lazily from a dataset root.
#[derive(Debug, Clone)]
pub struct DiskSource {
    pub index: DatasetIndex,
    pub names: Vec<String>,
}

impl DiskSource {
    pub fn new(index: DatasetIndex, names: &[String]) -> Result<Self, TrainError> {
        for n in names {
            if index.entry(n).is_none() {
                return Err(DataError::BadManifest(format!("`{n}` is not in the dataset")).into());
            }
        }
        Ok(Self { index, names: names.to_vec() })
    }

    pub fn all(index: DatasetIndex) -> Self {
        let names = index.filenames();
        Self { index, names }
    }
}

impl SampleSource for DiskSource {
    fn len(&self) -> usize {
        self.names.len()
    }

    fn name(&self, i: usize) -> String {
        self.names[i].clone()
    }

    fn load(&self, i: usize) -> Result<(Array3<f32>, Array2<u8>), TrainError> {
        let entry = self.index.entry(&self.names[i]).expect("checked at construction");
        let img = read_image(&self.index.image_path(entry))?;
        let mask = read_mask(&self.index.mask_path(entry))?;
        Ok((img, mask))
    }
}

/// `H×W×3` → `[3, H, W]`.
pub fn to_chw(image: &Array3<f32>) -> Array3<f32> {
    image.view().permuted_axes([2, 0, 1]).as_standard_layout().into_owned()
}

fn stack_batch(images: &[Array3<f32>], masks: &[Array2<u8>]) -> (ArrayD<f32>, ArrayD<f32>) {
    let (c, h, w) = images[0].dim();
    let mut x = ArrayD::<f32>::zeros(IxDyn(&[images.len(), c, h, w]));
    let mut t = ArrayD::<f32>::zeros(IxDyn(&[images.len(), 1, h, w]));
    for (b, (img, m)) in images.iter().zip(masks).enumerate() {
        x.slice_mut(s![b, .., .., ..]).assign(img);
        t.slice_mut(s![b, 0, .., ..]).assign(&m.mapv(f32::from));
    }
    (x, t)
}

/// Resized, optionally augmented, normalized `[3, S, S]` input and its mask.
pub fn prepare_train_sample(
    source: &dyn SampleSource,
    i: usize,
    size: usize,
    cfg: &TrainConfig,
    epoch: u64,
) -> Result<(Array3<f32>, Array2<u8>), TrainError> {
    let (img, mask) = source.load(i)?;
    let (img, mask) = resize_pair(&img, &mask, (size, size))?;
    let (img, mask) = match &cfg.augment {
        Some(a) => augment_pair(&img, &mask, a, cfg.global_seed, epoch, i as u64)?,
        None => (normalize(&img), mask),
    };
    Ok((to_chw(&img), mask))
}

/// Epoch order: the identity permutation shuffled by `SplitMix64(derive_seed(seed, [epoch]))`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::new(derive_seed(seed, &[epoch])).shuffle(&mut order);
    order
}

/// Runs one optimization step on a batch and returns its loss.
pub fn train_step(
    model: &mut SegModel<f32>,
    adam: &mut AdamState<f32>,
    input: &ArrayD<f32>,
    target: &ArrayD<f32>,
    lr: f64,
    hp: AdamHyper,
) -> Result<f64, TrainError> {
    let grads = {
        let binder = Binder::training(&model.params);
        let logits = forward(&binder, &model.config, &Var::constant(input.clone()))?;
        let loss = bce_dice_loss(&logits, target)?;
        let value = f64::from(loss.item());
        if !value.is_finite() {
            return Ok(value);
        }
        let g = loss.backward();
        (binder.collect(&g), value)
    };
    model.params.zero_grad();
    for (name, g) in &grads.0 {
        model.params.accumulate_grad(name, g)?;
    }
    adamw_step(&mut model.params, adam, lr, hp)?;
    Ok(grads.1)
}

/// Where predictions are compared with ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalResolution {
    /// At the model input size, against the nearest-resized mask.
    #[default]
    Model,
    /// Logits resized bilinearly back to the native size of each image.
    Native,
}

/// Per-image metrics over `source`: resize → normalize → forward → binarize.
pub fn evaluate(
    model: &SegModel<f32>,
    source: &dyn SampleSource,
    threshold: f64,
    resolution: EvalResolution,
) -> Result<MetricsReport, TrainError> {
    if source.is_empty() {
        return Err(EvalError::EmptyList.into());
    }
    let size = model.config.img_size;
    let mut records = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let (img, mask) = source.load(i)?;
        let native = mask.dim();
        let (img_r, mask_r) = resize_pair(&img, &mask, (size, size))?;
        let x = to_chw(&normalize(&img_r)).insert_axis(Axis(0)).into_dyn();
        let logits = model.predict(&x)?;
        let (pred, gt) = match resolution {
            EvalResolution::Model => (binarize(&logits, threshold), mask_r.into_dyn()),
            EvalResolution::Native => (native_mask(logits, native, threshold).into_dyn(), mask.into_dyn()),
        };
        let pred = pred.into_shape_with_order(gt.raw_dim()).expect("one prediction per pixel");
        records.push(ImageRecord::new(source.name(i), image_metrics(&pred, &gt)?));
    }
    Ok(aggregate(records, threshold)?)
}

fn native_mask(logits: ArrayD<f32>, (h, w): (usize, usize), threshold: f64) -> Array2<u8> {
    let up = resize_bilinear(&Var::constant(logits), h, w);
    binarize(&up.value().to_owned(), threshold).into_shape_with_order((h, w)).expect("single-channel logits")
}

/// Binary `{0, 1}` mask at the native size of an `H×W×3` image in `[0, 1]`.
pub fn predict_mask(model: &SegModel<f32>, image: &Array3<f32>, threshold: f64) -> Result<Array2<u8>, TrainError> {
    let size = model.config.img_size;
    let (h, w, _) = image.dim();
    let resized = crate::augment::resize_image(image, (size, size));
    let x = to_chw(&normalize(&resized)).insert_axis(Axis(0)).into_dyn();
    Ok(native_mask(model.predict(&x)?, (h, w), threshold))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_mdice: f64,
    pub config_hash: String,
    pub config: ModelConfig,
}

pub const CHECKPOINT_WEIGHTS: &str = "best.fcbw";
pub const CHECKPOINT_META: &str = "best.json";
pub const TRAIN_LOG: &str = "train_log.csv";

pub fn write_checkpoint(dir: &Path, model: &SegModel<f32>, epoch: usize, val_mdice: f64) -> Result<PathBuf, TrainError> {
    fs::create_dir_all(dir)?;
    let path = dir.join(CHECKPOINT_WEIGHTS);
    model.params.save(&path)?;
    let meta =
        CheckpointMeta { epoch, val_mdice, config_hash: model.config.hash(), config: model.config.clone() };
    fs::write(dir.join(CHECKPOINT_META), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(path)
}

/// Loads `best.fcbw` from `dir`, taking the model config from the sidecar.
pub fn read_checkpoint(dir: &Path) -> Result<(SegModel<f32>, CheckpointMeta), TrainError> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join(CHECKPOINT_META))?)?;
    if meta.config.hash() != meta.config_hash {
        return Err(TrainError::InvalidConfig("checkpoint sidecar hash does not match its config".into()));
    }
    let params = crate::model::load_weights(dir.join(CHECKPOINT_WEIGHTS), &meta.config)?;
    Ok((SegModel::from_params(meta.config.clone(), params)?, meta))
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub best_checkpoint: Option<PathBuf>,
    pub state: TrainState,
    pub steps: usize,
}

/// Trains `model` in place. With `out_dir`, the best weights, their sidecar
/// and the CSV log are written there.
pub fn train(
    model: &mut SegModel<f32>,
    cfg: &TrainConfig,
    train_src: &dyn SampleSource,
    val_src: &dyn SampleSource,
    out_dir: Option<&Path>,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train_src.is_empty() {
        return Err(TrainError::EmptyPartition(Split::Train));
    }
    if val_src.is_empty() {
        return Err(TrainError::EmptyPartition(Split::Val));
    }
    let size = model.config.img_size;
    let mut state = TrainState::new(cfg);
    let mut adam = AdamState::default();
    let mut best_checkpoint = None;
    let mut steps = 0;
    for epoch in 1..=cfg.epochs {
        let lr = state.current_lr();
        let order = epoch_order(train_src.len(), cfg.global_seed, epoch as u64);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut imgs = Vec::with_capacity(chunk.len());
            let mut masks = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let (img, mask) = prepare_train_sample(train_src, i, size, cfg, epoch as u64)?;
                imgs.push(img);
                masks.push(mask);
            }
            let (x, t) = stack_batch(&imgs, &masks);
            let loss = train_step(model, &mut adam, &x, &t, lr, cfg.adam())?;
            steps += 1;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step: steps, loss });
            }
            total += loss;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let val = evaluate(model, val_src, cfg.threshold, EvalResolution::Model)?;
        let outcome = state.end_epoch(train_loss, val.summary.m_dice);
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.6} val_mdice {:.4} lr {lr:.3e}{}",
            val.summary.m_dice,
            if outcome.checkpoint { " (checkpoint)" } else { "" }
        );
        if let Some(dir) = out_dir {
            if outcome.checkpoint {
                best_checkpoint = Some(write_checkpoint(dir, model, epoch, val.summary.m_dice)?);
            }
            fs::write(dir.join(TRAIN_LOG), log_to_csv(&state.log)?)?;
        }
    }
    Ok(TrainReport { best_checkpoint, state, steps })
}
