//! The full dual-branch segmentation network and its weight files.

use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NnError, NnResult};
use crate::fcb::{fcb_forward, residual_block_postnorm, residual_block_specs, FcbConfig};
use crate::params::{Binder, Init, ParamSpec, ParamStore};
use crate::swin::{tb_forward, SwinConfig};
use crate::tensor::conv::conv2d;
use crate::tensor::interp::resize_bilinear;
use crate::tensor::ops::concat;
use crate::tensor::{Scalar, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    pub num_blocks: usize,
    pub groups: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { num_blocks: 2, groups: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub img_size: usize,
    pub swin: SwinConfig,
    pub fcb: FcbConfig,
    pub head: HeadConfig,
}

impl ModelConfig {
    pub fn base() -> Self {
        Self { img_size: 384, swin: SwinConfig::base(), fcb: FcbConfig::base(), head: HeadConfig::default() }
    }

    pub fn toy() -> Self {
        Self { img_size: 64, swin: SwinConfig::toy(), fcb: FcbConfig::toy(), head: HeadConfig { num_blocks: 2, groups: 4 } }
    }

    /// Channels of each branch output; the head sees twice this many.
    pub fn branch_channels(&self) -> usize {
        self.fcb.out_channels
    }

    pub fn validate(&self) -> NnResult<()> {
        self.swin.validate()?;
        self.fcb.validate()?;
        if self.swin.img_size != self.img_size {
            return Err(NnError::ConfigMismatch(format!(
                "transformer input {} differs from model input {}",
                self.swin.img_size, self.img_size
            )));
        }
        if self.swin.in_channels != self.fcb.in_channels {
            return Err(NnError::ConfigMismatch("branches disagree on input channels".into()));
        }
        if self.swin.out_channels() != self.fcb.out_channels {
            return Err(NnError::ConfigMismatch(format!(
                "transformer branch yields {} channels, convolutional branch {}",
                self.swin.out_channels(),
                self.fcb.out_channels
            )));
        }
        if !self.img_size.is_multiple_of(self.fcb.size_multiple()) {
            return Err(NnError::ConfigMismatch(format!(
                "input {} is not divisible by {}",
                self.img_size,
                self.fcb.size_multiple()
            )));
        }
        if self.head.num_blocks == 0 || self.head.groups == 0 {
            return Err(NnError::InvalidConfig("the head needs at least one block and one group".into()));
        }
        Ok(())
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.swin.param_specs("swin");
        specs.extend(self.fcb.param_specs("fcb"));
        specs.extend(self.head_specs());
        specs
    }

    fn head_specs(&self) -> Vec<ParamSpec> {
        let c = self.branch_channels();
        let mut specs = Vec::new();
        for b in 0..self.head.num_blocks {
            let cin = if b == 0 { 2 * c } else { c };
            specs.extend(residual_block_specs(&format!("head.rb.{b}"), cin, c));
        }
        specs.push(ParamSpec::new("head.conv_out.weight", &[1, c, 1, 1], Init::TruncNormal(0.02)));
        specs.push(ParamSpec::new("head.conv_out.bias", &[1], Init::Zeros));
        specs
    }

    /// SHA-256 of the compact JSON encoding, as lowercase hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Randomly initialized parameters for `cfg`.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> NnResult<ParamStore<T>> {
    cfg.validate()?;
    ParamStore::init(&cfg.param_specs(), seed)
}

/// Logits `[B, 1, S, S]` for a normalized `[B, 3, S, S]` image batch.
pub fn forward<T: Scalar>(params: &Binder<'_, T>, cfg: &ModelConfig, image: &Var<T>) -> NnResult<Var<T>> {
    let s = image.shape();
    if s.len() != 4 || s[1] != cfg.fcb.in_channels || s[2] != cfg.img_size || s[3] != cfg.img_size {
        return Err(NnError::ConfigMismatch(format!(
            "expected input [B, {}, {}, {}], got {:?}",
            cfg.fcb.in_channels, cfg.img_size, cfg.img_size, s
        )));
    }
    let tb = tb_forward(params, "swin", &cfg.swin, image)?;
    let tb = resize_bilinear(&tb, cfg.img_size, cfg.img_size);
    let fcb = fcb_forward(params, "fcb", &cfg.fcb, image)?;
    let mut x = concat(&[tb, fcb], 1);
    for b in 0..cfg.head.num_blocks {
        x = residual_block_postnorm(params, &format!("head.rb.{b}"), &x, cfg.head.groups)?;
    }
    let w = params.param("head.conv_out.weight")?;
    let bias = params.param("head.conv_out.bias")?;
    Ok(conv2d(&x, &w, Some(&bias), 1, 0))
}

/// A configuration together with its weights.
#[derive(Debug, Clone)]
pub struct SegModel<T: Scalar> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> SegModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> NnResult<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> NnResult<Self> {
        config.validate()?;
        params.validate(&config.param_specs())?;
        Ok(Self { config, params })
    }

    /// Gradient-free forward pass.
    pub fn predict(&self, image: &ArrayD<T>) -> NnResult<ArrayD<T>> {
        let binder = Binder::inference(&self.params);
        let y = forward(&binder, &self.config, &Var::constant(image.clone()))?;
        Ok(y.value().to_owned())
    }
}

pub fn save_weights<T: Scalar>(params: &ParamStore<T>, path: impl AsRef<Path>) -> NnResult<()> {
    params.save(path)
}

/// Reads an archive and checks every expected name and shape against `cfg`.
pub fn load_weights<T: Scalar>(path: impl AsRef<Path>, cfg: &ModelConfig) -> NnResult<ParamStore<T>> {
    let store = ParamStore::load(path)?;
    store.validate(&cfg.param_specs())?;
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn presets_validate() {
        ModelConfig::base().validate().unwrap();
        ModelConfig::toy().validate().unwrap();
    }

    #[test]
    fn head_input_is_twice_branch_width() {
        let cfg = ModelConfig::base();
        let specs = cfg.param_specs();
        let first = specs.iter().find(|s| s.name == "head.rb.0.conv1.weight").unwrap();
        assert_eq!(first.shape, vec![64, 128, 3, 3]);
    }

    #[test]
    fn toy_forward_shape_and_batch_independence() {
        let m = SegModel::<f64>::new(ModelConfig::toy(), 5).unwrap();
        let one = ArrayD::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |i| ((i[1] * 5 + i[2] * 3 + i[3]) % 11) as f64 / 11.0 - 0.5);
        let two = ndarray::concatenate(ndarray::Axis(0), &[one.view(), one.view()]).unwrap();
        let y = m.predict(&two).unwrap();
        assert_eq!(y.shape(), &[2, 1, 64, 64]);
        let (a, b) = (y.index_axis(ndarray::Axis(0), 0), y.index_axis(ndarray::Axis(0), 1));
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_input_size_is_config_mismatch() {
        let m = SegModel::<f64>::new(ModelConfig::toy(), 5).unwrap();
        let img = ArrayD::zeros(IxDyn(&[1, 3, 32, 32]));
        assert!(matches!(m.predict(&img), Err(NnError::ConfigMismatch(_))));
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ModelConfig::toy();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.head.num_blocks = 3;
        assert_ne!(a.hash(), b.hash());
    }
}
