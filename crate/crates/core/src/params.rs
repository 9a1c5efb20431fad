//! Named parameter storage, initialization and the weight archive format.
//!
//! # Archive layout
//!
//! ```text
//! [u64 little-endian: manifest length L]
//! [L bytes: UTF-8 JSON manifest]
//! [zero padding up to the next multiple of 64]
//! [tensor data ...]
//! ```
//!
//! The manifest maps each tensor name to `{"dtype", "shape", "byte_offset"}`
//! in store order. `byte_offset` is relative to the start of the data section
//! and is always a multiple of 64; tensors are raw little-endian values in
//! row-major order, separated by zero padding.

use std::cell::RefCell;
use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{NnError, NnResult};
use crate::tensor::{lit, Gradients, Scalar, Shared, Var};

pub const ARCHIVE_ALIGN: usize = 64;

/// How a parameter is filled before training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Normal(0, std) resampled until within two standard deviations.
    TruncNormal(f64),
    Zeros,
    Ones,
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        Self { name: name.into(), shape: shape.to_vec(), init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub value: Shared<T>,
    pub grad: Option<ArrayD<T>>,
}

/// Ordered map of named tensors, each with a gradient slot.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    entries: IndexMap<String, Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    /// Allocates and initializes every spec in order from one seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> NnResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Self::new();
        for spec in specs {
            let n = spec.numel();
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Const(c) => vec![lit(c); n],
                Init::TruncNormal(std) => (0..n)
                    .map(|_| loop {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        if z.abs() <= 2.0 {
                            break lit(z * std);
                        }
                    })
                    .collect(),
            };
            let value = ArrayD::from_shape_vec(IxDyn(&spec.shape), data).expect("spec shape");
            store.insert(&spec.name, value)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, value: ArrayD<T>) -> NnResult<()> {
        if self.entries.contains_key(name) {
            return Err(NnError::DuplicateTensor(name.to_string()));
        }
        self.entries.insert(name.to_string(), Param { value: value.into_shared(), grad: None });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.get_mut(name)
    }

    pub fn value(&self, name: &str) -> NnResult<&Shared<T>> {
        self.entries.get(name).map(|p| &p.value).ok_or_else(|| NnError::MissingTensor(name.to_string()))
    }

    /// Replaces a tensor's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: ArrayD<T>) -> NnResult<()> {
        let p = self.entries.get_mut(name).ok_or_else(|| NnError::MissingTensor(name.to_string()))?;
        if p.value.shape() != value.shape() {
            return Err(NnError::ShapeMismatch {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        p.value = value.into_shared();
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad = None;
        }
    }

    /// Adds `grad` into the slot for `name`.
    pub fn accumulate_grad(&mut self, name: &str, grad: &ArrayD<T>) -> NnResult<()> {
        let p = self.entries.get_mut(name).ok_or_else(|| NnError::MissingTensor(name.to_string()))?;
        if p.value.shape() != grad.shape() {
            return Err(NnError::ShapeMismatch {
                name: name.to_string(),
                expected: p.value.shape().to_vec(),
                found: grad.shape().to_vec(),
            });
        }
        match p.grad.as_mut() {
            Some(acc) => *acc += grad,
            None => p.grad = Some(grad.clone()),
        }
        Ok(())
    }

    /// Checks that names and shapes agree exactly with `specs`.
    pub fn validate(&self, specs: &[ParamSpec]) -> NnResult<()> {
        for spec in specs {
            let p = self.entries.get(&spec.name).ok_or_else(|| NnError::MissingTensor(spec.name.clone()))?;
            if p.value.shape() != spec.shape.as_slice() {
                return Err(NnError::ShapeMismatch {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: p.value.shape().to_vec(),
                });
            }
        }
        if self.entries.len() != specs.len() {
            let known: std::collections::HashSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
            if let Some(extra) = self.entries.keys().find(|k| !known.contains(k.as_str())) {
                return Err(NnError::CorruptArchive(format!("unexpected tensor `{extra}`")));
            }
        }
        Ok(())
    }

    /// Converts every tensor to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for (name, p) in &self.entries {
            let v = p.value.mapv(|x| lit::<U>(x.to_f64().expect("finite")));
            out.entries.insert(name.clone(), Param { value: v.into_shared(), grad: None });
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> NnResult<()> {
        fs::write(path, self.to_archive_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> NnResult<Self> {
        Self::from_archive_bytes(&fs::read(path)?)
    }

    pub fn to_archive_bytes(&self) -> Vec<u8> {
        let elem = std::mem::size_of::<T>();
        let mut manifest: IndexMap<String, ArchiveEntry> = IndexMap::new();
        let mut offset = 0usize;
        for (name, p) in &self.entries {
            manifest.insert(
                name.clone(),
                ArchiveEntry { dtype: T::DTYPE.to_string(), shape: p.value.shape().to_vec(), byte_offset: offset },
            );
            offset = align_up(offset + p.value.len() * elem);
        }
        let header = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(8 + header.len() + ARCHIVE_ALIGN + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.resize(align_up(out.len()), 0);
        let data_start = out.len();
        for (p, entry) in self.entries.values().zip(manifest.values()) {
            out.resize(data_start + entry.byte_offset, 0);
            for &v in p.value.iter() {
                v.write_le(&mut out);
            }
        }
        out.resize(data_start + offset, 0);
        out
    }

    pub fn from_archive_bytes(bytes: &[u8]) -> NnResult<Self> {
        let corrupt = |m: &str| NnError::CorruptArchive(m.to_string());
        if bytes.len() < 8 {
            return Err(corrupt("truncated header length"));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let header_end = 8usize.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated manifest"))?;
        let manifest: IndexMap<String, ArchiveEntry> = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| NnError::CorruptArchive(format!("manifest: {e}")))?;
        let data_start = align_up(header_end);
        let mut store = Self::new();
        for (name, entry) in manifest {
            let elem = match entry.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(NnError::CorruptArchive(format!("unsupported dtype `{other}` for `{name}`"))),
            };
            if entry.byte_offset % ARCHIVE_ALIGN != 0 {
                return Err(NnError::CorruptArchive(format!("misaligned tensor `{name}`")));
            }
            let n: usize = entry.shape.iter().product();
            let start = data_start + entry.byte_offset;
            let end = start + n * elem;
            if end > bytes.len() {
                return Err(NnError::CorruptArchive(format!("tensor `{name}` runs past end of file")));
            }
            let raw = &bytes[start..end];
            let data: Vec<T> = if T::DTYPE == entry.dtype {
                raw.chunks_exact(elem).map(T::read_le).collect()
            } else if elem == 4 {
                raw.chunks_exact(4).map(|c| lit(f32::read_le(c) as f64)).collect()
            } else {
                raw.chunks_exact(8).map(|c| lit(f64::read_le(c))).collect()
            };
            let value = ArrayD::from_shape_vec(IxDyn(&entry.shape), data).map_err(|e| NnError::CorruptArchive(e.to_string()))?;
            store.insert(&name, value).map_err(|_| NnError::CorruptArchive(format!("duplicate tensor `{name}`")))?;
        }
        Ok(store)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArchiveEntry {
    dtype: String,
    shape: Vec<usize>,
    byte_offset: usize,
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ARCHIVE_ALIGN) * ARCHIVE_ALIGN
}

/// Hands out graph leaves for stored parameters during one forward pass.
pub struct Binder<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    track: bool,
    bound: RefCell<IndexMap<String, Var<T>>>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    /// Parameters become leaves that collect gradients.
    pub fn training(store: &'a ParamStore<T>) -> Self {
        Self { store, track: true, bound: RefCell::new(IndexMap::new()) }
    }

    /// Parameters become constants; no graph is retained.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self { store, track: false, bound: RefCell::new(IndexMap::new()) }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn param(&self, name: &str) -> NnResult<Var<T>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(v.clone());
        }
        let value = self.store.value(name)?.clone();
        let v = if self.track { Var::leaf(value) } else { Var::constant(value) };
        self.bound.borrow_mut().insert(name.to_string(), v.clone());
        Ok(v)
    }

    /// Names touched so far, in first-use order.
    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }

    /// Pairs every bound parameter with its gradient from `grads`.
    pub fn collect(&self, grads: &Gradients<T>) -> Vec<(String, ArrayD<T>)> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, v)| grads.get(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::new("a.weight", &[3, 5], Init::TruncNormal(0.02)),
            ParamSpec::new("a.bias", &[3], Init::Zeros),
            ParamSpec::new("n.gamma", &[7], Init::Ones),
        ]
    }

    #[test]
    fn archive_round_trip_is_bitwise() {
        let store = ParamStore::<f32>::init(&specs(), 5).unwrap();
        let bytes = store.to_archive_bytes();
        let back = ParamStore::<f32>::from_archive_bytes(&bytes).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), store.names().collect::<Vec<_>>());
        for (name, p) in store.iter() {
            let q = back.get(name).unwrap();
            let a: Vec<u32> = p.value.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = q.value.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn offsets_are_aligned() {
        let store = ParamStore::<f32>::init(&specs(), 1).unwrap();
        let bytes = store.to_archive_bytes();
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[8..8 + len]).unwrap();
        for (_, e) in manifest.as_object().unwrap() {
            assert_eq!(e["byte_offset"].as_u64().unwrap() % 64, 0);
            assert_eq!(e["dtype"], "f32");
        }
        assert_eq!(align_up(8 + len) % 64, 0);
    }

    #[test]
    fn truncated_init_stays_within_two_sigma() {
        let store = ParamStore::<f64>::init(&[ParamSpec::new("w", &[4000], Init::TruncNormal(0.02))], 0).unwrap();
        assert!(store.value("w").unwrap().iter().all(|v| v.abs() <= 0.04));
    }

    #[test]
    fn truncated_archive_is_rejected() {
        let store = ParamStore::<f32>::init(&specs(), 5).unwrap();
        let bytes = store.to_archive_bytes();
        assert!(matches!(
            ParamStore::<f32>::from_archive_bytes(&bytes[..bytes.len() - 70]),
            Err(NnError::CorruptArchive(_))
        ));
        assert!(matches!(ParamStore::<f32>::from_archive_bytes(&bytes[..4]), Err(NnError::CorruptArchive(_))));
    }

    #[test]
    fn validate_reports_missing_and_shape() {
        let store = ParamStore::<f32>::init(&specs(), 5).unwrap();
        let mut want = specs();
        want.push(ParamSpec::new("extra", &[1], Init::Zeros));
        assert!(matches!(store.validate(&want), Err(NnError::MissingTensor(n)) if n == "extra"));
        let mut bad = specs();
        bad[0].shape = vec![5, 3];
        assert!(matches!(store.validate(&bad), Err(NnError::ShapeMismatch { name, .. }) if name == "a.weight"));
    }
}
