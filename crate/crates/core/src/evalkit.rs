//! Training loss and per-image overlap metrics.
//!
//! The training dice term is smoothed (`ε = 1`) and pooled over the batch;
//! the evaluation metrics are unsmoothed and computed per image with explicit
//! conventions for empty masks.

use std::fs;
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::ops::{add, add_scalar, bce_with_logits_mean, div, mul, scale, sigmoid, sum_all};
use crate::tensor::{lit, Scalar, Var};

/// Smoothing constant of the training dice term.
pub const DICE_SMOOTH: f64 = 1.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: {expected:?} vs {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("target contains values other than 0 and 1")]
    NonBinaryTarget,
    #[error("mask contains values other than 0 and 1")]
    NonBinaryMask,
    #[error("cannot aggregate an empty list of images")]
    EmptyList,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Mean binary cross-entropy on logits plus `1 − (2Σpt + ε)/(Σp + Σt + ε)`.
pub fn bce_dice_loss<T: Scalar>(logits: &Var<T>, target: &ArrayD<T>) -> Result<Var<T>, EvalError> {
    if logits.shape() != target.shape() {
        return Err(EvalError::ShapeMismatch { expected: logits.shape().to_vec(), found: target.shape().to_vec() });
    }
    if target.iter().any(|&t| t != T::zero() && t != T::one()) {
        return Err(EvalError::NonBinaryTarget);
    }
    let bce = bce_with_logits_mean(logits, target);
    let p = sigmoid(logits);
    let t = Var::constant(target.clone());
    let smooth = lit::<T>(DICE_SMOOTH);
    let intersection = sum_all(&mul(&p, &t));
    let numerator = add_scalar(&scale(&intersection, lit(2.0)), smooth);
    let t_sum = target.iter().copied().sum::<T>();
    let denominator = add_scalar(&sum_all(&p), t_sum + smooth);
    let dice_loss = add_scalar(&scale(&div(&numerator, &denominator), -T::one()), T::one());
    Ok(add(&bce, &dice_loss))
}

/// 1 where `logistic(logit) > threshold`, else 0.
pub fn binarize<T: Scalar>(logits: &ArrayD<T>, threshold: f64) -> ArrayD<u8> {
    let cut = (threshold / (1.0 - threshold)).ln();
    logits.mapv(|l| u8::from(l.to_f64().unwrap_or(f64::NAN) > cut))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl ImageMetrics {
    /// Metrics from pixel counts. Both masks empty gives all ones; any other
    /// zero denominator gives zero.
    pub fn from_confusion(c: Confusion) -> Self {
        let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
        if c.tp + c.fp + c.fn_ == 0 {
            return Self { dice: 1.0, iou: 1.0, precision: 1.0, recall: 1.0 };
        }
        let ratio = |num: f64, den: f64| if den == 0.0 { 0.0 } else { num / den };
        Self {
            dice: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
            precision: ratio(tp, tp + fp),
            recall: ratio(tp, tp + fn_),
        }
    }
}

pub fn confusion(pred: &ArrayD<u8>, gt: &ArrayD<u8>) -> Result<Confusion, EvalError> {
    if pred.shape() != gt.shape() {
        return Err(EvalError::ShapeMismatch { expected: gt.shape().to_vec(), found: pred.shape().to_vec() });
    }
    let mut c = Confusion::default();
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => {}
            _ => return Err(EvalError::NonBinaryMask),
        }
    }
    Ok(c)
}

pub fn image_metrics(pred: &ArrayD<u8>, gt: &ArrayD<u8>) -> Result<ImageMetrics, EvalError> {
    Ok(ImageMetrics::from_confusion(confusion(pred, gt)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub filename: String,
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

impl ImageRecord {
    pub fn new(filename: impl Into<String>, m: ImageMetrics) -> Self {
        Self { filename: filename.into(), dice: m.dice, iou: m.iou, precision: m.precision, recall: m.recall }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub images: usize,
    pub threshold: f64,
    pub m_dice: f64,
    pub m_iou: f64,
    pub m_precision: f64,
    pub m_recall: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub per_image: Vec<ImageRecord>,
    pub summary: MetricsSummary,
}

/// Unweighted means over images.
pub fn aggregate(per_image: Vec<ImageRecord>, threshold: f64) -> Result<MetricsReport, EvalError> {
    if per_image.is_empty() {
        return Err(EvalError::EmptyList);
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageRecord) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let summary = MetricsSummary {
        images: per_image.len(),
        threshold,
        m_dice: mean(|r| r.dice),
        m_iou: mean(|r| r.iou),
        m_precision: mean(|r| r.precision),
        m_recall: mean(|r| r.recall),
    };
    Ok(MetricsReport { per_image, summary })
}

impl MetricsReport {
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        for r in &self.per_image {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn summary_json(&self) -> Result<String, EvalError> {
        Ok(serde_json::to_string_pretty(&self.summary)? + "\n")
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<(), EvalError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join(format!("{stem}.csv")), self.to_csv()?)?;
        fs::write(dir.join(format!("{stem}.json")), self.summary_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, IxDyn};

    fn mask(v: &[u8]) -> ArrayD<u8> {
        ArrayD::from_shape_vec(IxDyn(&[v.len()]), v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_case() {
        let m = image_metrics(&mask(&[1, 1, 0, 0]), &mask(&[1, 0, 1, 0])).unwrap();
        assert_eq!(m.dice, 0.5);
        assert_eq!(m.iou, 1.0 / 3.0);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
    }

    #[test]
    fn empty_conventions() {
        let both = image_metrics(&mask(&[0, 0]), &mask(&[0, 0])).unwrap();
        assert_eq!(both, ImageMetrics { dice: 1.0, iou: 1.0, precision: 1.0, recall: 1.0 });
        let miss = image_metrics(&mask(&[0, 0]), &mask(&[1, 0])).unwrap();
        assert_eq!(miss, ImageMetrics { dice: 0.0, iou: 0.0, precision: 0.0, recall: 0.0 });
    }

    #[test]
    fn binarize_is_strict_sign() {
        let l = array![0.0f64, 3.0, -3.0, 1e-300].into_dyn();
        assert_eq!(binarize(&l, 0.5).into_raw_vec_and_offset().0, vec![0, 1, 0, 1]);
    }

    #[test]
    fn saturated_losses_vanish() {
        let ones = ArrayD::<f64>::ones(IxDyn(&[1, 1, 2, 2]));
        let l = bce_dice_loss(&Var::constant(ones.mapv(|_| 50.0)), &ones).unwrap().item();
        assert!(l.abs() < 1e-12, "{l}");
        let zeros = ArrayD::<f64>::zeros(IxDyn(&[1, 1, 2, 2]));
        let l = bce_dice_loss(&Var::constant(zeros.mapv(|_| -50.0)), &zeros).unwrap().item();
        assert!(l.abs() < 1e-12, "{l}");
    }

    #[test]
    fn non_binary_target_rejected() {
        let t = ArrayD::<f64>::from_elem(IxDyn(&[1, 1, 1, 2]), 0.5);
        let r = bce_dice_loss(&Var::constant(t.clone()), &t);
        assert!(matches!(r, Err(EvalError::NonBinaryTarget)));
    }

    #[test]
    fn aggregate_means_and_csv() {
        let recs = vec![
            ImageRecord { filename: "a.png".into(), dice: 1.0, iou: 1.0, precision: 1.0, recall: 1.0 },
            ImageRecord { filename: "b.png".into(), dice: 0.5, iou: 1.0 / 3.0, precision: 0.5, recall: 0.5 },
        ];
        let r = aggregate(recs, 0.5).unwrap();
        assert_eq!(r.summary.m_dice, 0.75);
        let csv = r.to_csv().unwrap();
        assert!(csv.starts_with("filename,dice,iou,precision,recall\na.png,1.0,1.0,1.0,1.0\n"));
        assert!(matches!(aggregate(vec![], 0.5), Err(EvalError::EmptyList)));
    }
}
