//! FCB-SwinV2 polyp segmentation.
//!
//! A dual-branch segmentation network (a SwinV2-UNET transformer branch running
//! in parallel with a fully convolutional branch) together with the tooling
//! needed to train and evaluate it reproducibly: deterministic and
//! sequence-grouped dataset partitions, a seeded augmentation pipeline,
//! BCE + dice training and per-image overlap metrics.
//!
//! Everything numerical runs on a small reverse-mode autodiff engine
//! ([`tensor`]) that is generic over `f32` and `f64`, so the same layer code
//! serves full-size inference and 64-bit finite-difference gradient checks.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod datakit;
pub mod error;
pub mod evalkit;
pub mod fcb;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod rng;
pub mod swin;
pub mod tensor;
pub mod trainer;

pub use model::{ModelConfig, SegModel};
pub use params::ParamStore;
pub use tensor::{Scalar, Var};
