//! Central finite-difference checks of analytic gradients in `f64`.
//!
//! A check binds a parameter store and a set of inputs, reduces the module
//! output to a scalar, back-propagates once, and compares selected gradient
//! coordinates with `(L(θ + h) − L(θ − h)) / 2h`. The error of one coordinate
//! is `|a − n| / max(|a|, |n|, floor)`.
//!
//! ReLU makes the loss only piecewise smooth. When a perturbed evaluation
//! lands on a different linear piece than the unperturbed one (detected from
//! the ReLU sign fingerprint), the step is divided by ten and the central
//! difference retried, up to three times; coordinates that still straddle a
//! kink are skipped and counted.

use ndarray::{ArrayD, IxDyn};

use crate::error::NnResult;
use crate::evalkit::bce_dice_loss;
use crate::fcb::{residual_block_postnorm, residual_block_specs};
use crate::model::{forward, ModelConfig};
use crate::params::{Binder, ParamSpec, ParamStore};
use crate::rng::SplitMix64;
use crate::swin::{
    attention_specs, block_specs, cosine_window_attention, decoder_block, decoder_block_specs, merge_specs, patch_merge,
    scse, scse_specs, swinv2_block, BlockGeom,
};
use crate::tensor::ops::{mean_all, mul, sum_all, trace_kinks};
use crate::tensor::Var;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckOptions {
    pub step: f64,
    /// Coordinates probed per tensor; all of them when the tensor is smaller.
    pub probes_per_tensor: usize,
    pub floor: f64,
    pub seed: u64,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self { step: 1e-5, probes_per_tensor: 64, floor: 1e-8, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub tolerance: f64,
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst: String,
    pub probes: usize,
    /// Coordinates whose step had to shrink to avoid a ReLU kink.
    pub reduced_step: usize,
    /// Coordinates where every tried step crossed a kink.
    pub skipped: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

enum Target {
    Input(usize),
    Param(String),
}

fn probe_indices(len: usize, count: usize, rng: &mut SplitMix64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    if len > count {
        rng.shuffle(&mut idx);
        idx.truncate(count);
        idx.sort_unstable();
    }
    idx
}

/// Compares the gradient of `loss` with central differences for every input
/// and every parameter the loss touches.
pub fn check<F>(
    name: &str,
    tolerance: f64,
    store: &ParamStore<f64>,
    inputs: &[ArrayD<f64>],
    opts: CheckOptions,
    loss: F,
) -> NnResult<CheckReport>
where
    F: Fn(&Binder<'_, f64>, &[Var<f64>]) -> NnResult<Var<f64>>,
{
    let binder = Binder::training(store);
    let leaves: Vec<Var<f64>> = inputs.iter().map(|x| Var::leaf(x.clone())).collect();
    let value = loss(&binder, &leaves)?;
    assert_eq!(value.value().len(), 1, "gradient check needs a scalar loss");
    let grads = value.backward();

    let mut targets: Vec<(Target, ArrayD<f64>)> = leaves
        .iter()
        .enumerate()
        .map(|(i, leaf)| (Target::Input(i), grads.get(leaf).cloned().unwrap_or_else(|| ArrayD::zeros(leaf.shape()))))
        .collect();
    for pname in binder.bound_names() {
        let var = binder.param(&pname)?;
        let g = grads.get(&var).cloned().unwrap_or_else(|| ArrayD::zeros(var.shape()));
        targets.push((Target::Param(pname), g));
    }

    let eval = |store: &ParamStore<f64>, inputs: &[ArrayD<f64>]| -> NnResult<(f64, u64)> {
        let b = Binder::inference(store);
        let vars: Vec<Var<f64>> = inputs.iter().map(|x| Var::constant(x.clone())).collect();
        let (v, print) = trace_kinks(|| loss(&b, &vars));
        Ok((v?.item(), print))
    };
    let center_print = eval(store, inputs)?.1;

    let mut rng = SplitMix64::new(opts.seed);
    let mut report = CheckReport {
        name: name.to_string(),
        tolerance,
        max_rel_error: 0.0,
        worst: String::new(),
        probes: 0,
        reduced_step: 0,
        skipped: 0,
    };
    for (target, analytic) in &targets {
        for k in probe_indices(analytic.len(), opts.probes_per_tensor, &mut rng) {
            let side = |delta: f64| -> NnResult<(f64, u64)> {
                match target {
                    Target::Input(i) => {
                        let mut xs = inputs.to_vec();
                        bump(&mut xs[*i], k, delta);
                        eval(store, &xs)
                    }
                    Target::Param(p) => {
                        let mut s = store.clone();
                        let mut v = s.value(p)?.to_owned();
                        bump(&mut v, k, delta);
                        s.set(p, v)?;
                        eval(&s, inputs)
                    }
                }
            };
            let mut numeric = None;
            for (attempt, h) in (0..KINK_RETRIES).map(|r| (r, opts.step / 10f64.powi(r as i32))) {
                let ((plus, plus_print), (minus, minus_print)) = (side(h)?, side(-h)?);
                if plus_print == center_print && minus_print == center_print {
                    if attempt > 0 {
                        report.reduced_step += 1;
                    }
                    numeric = Some((plus - minus) / (2.0 * h));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                report.skipped += 1;
                continue;
            };
            let a = analytic.as_slice_memory_order().expect("contiguous gradient")[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.probes += 1;
            if report.worst.is_empty() || err > report.max_rel_error {
                let label = match target {
                    Target::Input(i) => format!("input{i}"),
                    Target::Param(p) => p.clone(),
                };
                report.max_rel_error = err;
                report.worst = format!("{label}[{k}] analytic {a:.6e} numeric {numeric:.6e}");
            }
        }
    }
    Ok(report)
}

fn bump(x: &mut ArrayD<f64>, k: usize, delta: f64) {
    x.as_slice_memory_order_mut().expect("contiguous tensor")[k] += delta;
}

/// Uniform values in `[-scale, scale)` with the given shape.
pub fn random_array(shape: &[usize], scale: f64, rng: &mut SplitMix64) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.uniform(-scale, scale))
}

/// Initializes `specs` and then adds uniform noise to every tensor, so no
/// parameter sits at a symmetric starting value.
pub fn jittered_store(specs: &[ParamSpec], seed: u64, noise: f64) -> NnResult<ParamStore<f64>> {
    let mut store = ParamStore::<f64>::init(specs, seed)?;
    let mut rng = SplitMix64::new(seed ^ 0x5eed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let v = store.value(&n)?.to_owned();
        let jitter = random_array(v.shape(), noise, &mut rng);
        store.set(&n, v + jitter)?;
    }
    Ok(store)
}

/// `Σ w ⊙ y` with fixed random weights, so every output coordinate matters.
pub fn projected(y: &Var<f64>, seed: u64) -> Var<f64> {
    let mut rng = SplitMix64::new(seed);
    let w = random_array(y.shape(), 1.0, &mut rng);
    sum_all(&mul(y, &Var::constant(w)))
}

const KINK_RETRIES: usize = 4;

pub const MODULE_TOLERANCE: f64 = 1e-4;
pub const LOSS_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-3;

/// Tiny end-to-end configuration for the full-network check.
pub fn gradcheck_model_config() -> ModelConfig {
    ModelConfig::toy()
}

/// Runs the standard suite of module, loss and end-to-end checks.
pub fn run_suite() -> NnResult<Vec<CheckReport>> {
    let opts = CheckOptions::default();
    let mut rng = SplitMix64::new(2024);
    let mut reports = Vec::new();

    let specs = attention_specs("attn", 8, 2, 2);
    let store = jittered_store(&specs, 11, 0.3)?;
    let x = random_array(&[2, 4, 8], 1.0, &mut rng);
    reports.push(check("cosine_window_attention", MODULE_TOLERANCE, &store, &[x], opts, |b, v| {
        Ok(projected(&cosine_window_attention(b, "attn", &v[0], 2, 0.01, None)?, 1))
    })?);

    let specs = block_specs("blk", 8, 2, 2, 4.0);
    let store = jittered_store(&specs, 12, 0.3)?;
    let x = random_array(&[1, 4, 4, 8], 1.0, &mut rng);
    let geom = BlockGeom { heads: 2, window: 2, shift: 1 };
    reports.push(check("swinv2_block", MODULE_TOLERANCE, &store, &[x], opts, |b, v| {
        Ok(projected(&swinv2_block(b, "blk", &v[0], geom, 0.01)?, 2))
    })?);

    let store = jittered_store(&merge_specs("merge", 4), 13, 0.3)?;
    let x = random_array(&[1, 4, 4, 4], 1.0, &mut rng);
    reports.push(check("patch_merge", MODULE_TOLERANCE, &store, &[x], opts, |b, v| {
        Ok(projected(&patch_merge(b, "merge", &v[0])?, 3))
    })?);

    let store = jittered_store(&scse_specs("scse", 4, 2), 14, 0.3)?;
    let x = random_array(&[1, 4, 3, 3], 1.0, &mut rng);
    reports.push(check("scse", MODULE_TOLERANCE, &store, &[x], opts, |b, v| Ok(projected(&scse(b, "scse", &v[0], 2)?, 4)))?);

    let store = jittered_store(&residual_block_specs("rb", 4, 4), 15, 0.3)?;
    let x = random_array(&[1, 4, 5, 5], 1.0, &mut rng);
    reports.push(check("residual_block_postnorm", MODULE_TOLERANCE, &store, &[x], opts, |b, v| {
        Ok(projected(&residual_block_postnorm(b, "rb", &v[0], 2)?, 5))
    })?);

    let store = jittered_store(&decoder_block_specs("dec", 4, 2, 4, 2), 16, 0.3)?;
    let prev = random_array(&[1, 4, 2, 2], 1.0, &mut rng);
    let skip = random_array(&[1, 2, 4, 4], 1.0, &mut rng);
    reports.push(check("decoder_block", MODULE_TOLERANCE, &store, &[prev, skip], opts, |b, v| {
        Ok(projected(&decoder_block(b, "dec", &v[0], &v[1], 2, 2)?, 6))
    })?);

    let logits = random_array(&[1, 1, 2, 2], 2.0, &mut rng);
    let target = ArrayD::from_shape_vec(IxDyn(&[1, 1, 2, 2]), vec![1.0, 0.0, 0.0, 1.0]).expect("shape");
    reports.push(check("bce_dice_loss", LOSS_TOLERANCE, &ParamStore::new(), &[logits], opts, |_, v| {
        Ok(bce_dice_loss(&v[0], &target).expect("valid target"))
    })?);

    let cfg = gradcheck_model_config();
    let store = jittered_store(&cfg.param_specs(), 17, 0.1)?;
    let size = cfg.img_size;
    let image = random_array(&[1, 3, size, size], 1.0, &mut rng);
    let model_opts = CheckOptions { probes_per_tensor: 3, ..opts };
    reports.push(check("model_end_to_end", MODEL_TOLERANCE, &store, &[image], model_opts, |b, v| {
        let y = forward(b, &cfg, &v[0])?;
        Ok(mean_all(&mul(&y, &y)))
    })?);

    Ok(reports)
}
