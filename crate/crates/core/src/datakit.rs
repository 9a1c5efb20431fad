//! Dataset indexing, reproducible train/val/test partitions and leakage audits.
//!
//! Every partition starts from the bytewise-sorted list of image filenames.
//! Slicing is by floor: `⌊train%·N⌋` names go to train, `⌊val%·N⌋` to val and
//! the remainder to test. Seeded partitions shuffle the sorted list with
//! [`SplitMix64`] before slicing. Each split is stored in canonical order.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SplitMix64;

/// Illustrative CVC-ClinicDB frame-to-sequence map shipped with the crate.
pub const EXAMPLE_CVC_SEQUENCE_MAP: &str = include_str!("../data/cvc_clinicdb_sequences_example.csv");

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read dataset root {0}")]
    UnreadableRoot(PathBuf),
    #[error("no mask found for image `{0}`")]
    MissingMask(String),
    #[error("dataset contains no images")]
    EmptyDataset,
    #[error("invalid ratios: {0}")]
    BadRatios(String),
    #[error("sequences {0:?} are in both the validation and the test set")]
    OverlappingSequenceSets(Vec<u32>),
    #[error("sequence {0} does not occur in the sequence map")]
    UnknownSequenceId(u32),
    #[error("`{0}` has no entry in the sequence map")]
    UnmappedFilename(String),
    #[error("invalid sequence map: {0}")]
    BadSequenceMap(String),
    #[error("invalid partition manifest: {0}")]
    BadManifest(String),
    #[error("cannot decode image {path}: {source}")]
    Image { path: PathBuf, source: image::ImageError },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    KvasirSeg,
    CvcClinicDb,
    Generic,
}

impl DatasetKind {
    /// Image and mask directories relative to the dataset root.
    pub fn layout(self) -> (&'static str, &'static str) {
        match self {
            DatasetKind::KvasirSeg => ("images", "masks"),
            DatasetKind::CvcClinicDb => ("Original", "Ground Truth"),
            DatasetKind::Generic => ("images", "masks"),
        }
    }

    fn accepts(self, ext: &str) -> bool {
        let ext = ext.to_ascii_lowercase();
        match self {
            DatasetKind::KvasirSeg => ext == "jpg" || ext == "jpeg",
            DatasetKind::CvcClinicDb => ext == "tif" || ext == "tiff" || ext == "png",
            DatasetKind::Generic => matches!(ext.as_str(), "jpg" | "jpeg" | "png" | "tif" | "tiff"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    /// Image path relative to the root; its file name identifies the sample.
    pub image: String,
    pub mask: String,
}

impl DatasetEntry {
    pub fn filename(&self) -> &str {
        file_name(&self.image)
    }
}

fn file_name(rel: &str) -> &str {
    rel.rsplit('/').next().unwrap_or(rel)
}

fn stem(name: &str) -> &str {
    match name.rfind('.') {
        Some(i) if i > 0 => &name[..i],
        _ => name,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub root: PathBuf,
    pub kind: DatasetKind,
    /// Sorted bytewise by image file name.
    pub entries: Vec<DatasetEntry>,
}

impl DatasetIndex {
    /// An index over bare file names (masks share the name), for manifests
    /// built without touching the file system.
    pub fn from_filenames<S: AsRef<str>>(kind: DatasetKind, names: &[S]) -> Result<Self, DataError> {
        if names.is_empty() {
            return Err(DataError::EmptyDataset);
        }
        let (img_dir, mask_dir) = kind.layout();
        let mut entries: Vec<DatasetEntry> = names
            .iter()
            .map(|n| DatasetEntry { image: format!("{img_dir}/{}", n.as_ref()), mask: format!("{mask_dir}/{}", n.as_ref()) })
            .collect();
        entries.sort_by(|a, b| a.filename().as_bytes().cmp(b.filename().as_bytes()));
        Ok(Self { root: PathBuf::new(), kind, entries })
    }

    pub fn image_count(&self) -> usize {
        self.entries.len()
    }

    pub fn filenames(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.filename().to_string()).collect()
    }

    pub fn entry(&self, filename: &str) -> Option<&DatasetEntry> {
        self.entries
            .binary_search_by(|e| e.filename().as_bytes().cmp(filename.as_bytes()))
            .ok()
            .map(|i| &self.entries[i])
    }

    pub fn image_path(&self, entry: &DatasetEntry) -> PathBuf {
        self.root.join(&entry.image)
    }

    pub fn mask_path(&self, entry: &DatasetEntry) -> PathBuf {
        self.root.join(&entry.mask)
    }
}

fn list_files(dir: &Path, kind: DatasetKind) -> Result<Vec<String>, DataError> {
    let read = fs::read_dir(dir).map_err(|_| DataError::UnreadableRoot(dir.to_path_buf()))?;
    let mut names = Vec::new();
    for entry in read {
        let entry = entry?;
        if !entry.file_type()?.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().into_owned();
        let ext = name.rsplit_once('.').map(|(_, e)| e).unwrap_or("");
        if kind.accepts(ext) {
            names.push(name);
        }
    }
    names.sort_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
    Ok(names)
}

/// Indexes a dataset directory laid out as described by [`DatasetKind::layout`].
pub fn load_dataset(root: impl AsRef<Path>, kind: DatasetKind) -> Result<DatasetIndex, DataError> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(DataError::UnreadableRoot(root.to_path_buf()));
    }
    let (img_dir, mask_dir) = kind.layout();
    let images = list_files(&root.join(img_dir), kind)?;
    let masks = list_files(&root.join(mask_dir), kind)?;
    let mut by_stem: BTreeMap<&str, &str> = BTreeMap::new();
    for m in &masks {
        by_stem.entry(stem(m)).or_insert(m.as_str());
    }
    if images.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let entries = images
        .iter()
        .map(|img| {
            let mask = by_stem.get(stem(img)).ok_or_else(|| DataError::MissingMask(img.clone()))?;
            Ok(DatasetEntry { image: format!("{img_dir}/{img}"), mask: format!("{mask_dir}/{mask}") })
        })
        .collect::<Result<Vec<_>, DataError>>()?;
    Ok(DatasetIndex { root: root.to_path_buf(), kind, entries })
}

/// Reads an RGB image as `H×W×3` values in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Array3<f32>, DataError> {
    let img = image::open(path).map_err(|source| DataError::Image { path: path.to_path_buf(), source })?.to_rgb8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Ok(Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, c)| f32::from(raw[(y * w as usize + x) * 3 + c]) / 255.0))
}

/// Reads a mask as `H×W` in `{0, 1}`; grey levels above 127 are foreground.
pub fn read_mask(path: &Path) -> Result<Array2<u8>, DataError> {
    let img = image::open(path).map_err(|source| DataError::Image { path: path.to_path_buf(), source })?.to_luma8();
    let (w, h) = img.dimensions();
    let raw = img.into_raw();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| u8::from(raw[y * w as usize + x] > 127)))
}

/// Writes a `{0, 1}` mask as an 8-bit PNG with values `{0, 255}`.
pub fn write_mask_png(path: &Path, mask: &Array2<u8>) -> Result<(), DataError> {
    let (h, w) = mask.dim();
    let raw: Vec<u8> = mask.iter().map(|&v| if v > 0 { 255 } else { 0 }).collect();
    let img = image::GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    img.save_with_format(path, image::ImageFormat::Png).map_err(|source| DataError::Image { path: path.to_path_buf(), source })
}

/// Image files directly inside `dir`, in byte order.
pub fn list_images(dir: &Path) -> Result<Vec<String>, DataError> {
    list_files(dir, DatasetKind::Generic)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceMap {
    pub mapping: BTreeMap<String, u32>,
    pub source: Option<PathBuf>,
}

#[derive(Debug, Deserialize)]
struct SequenceRow {
    filename: String,
    sequence_id: u32,
}

impl SequenceMap {
    /// Parses CSV with header `filename,sequence_id`.
    pub fn parse(text: &str) -> Result<Self, DataError> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["filename", "sequence_id"] {
            return Err(DataError::BadSequenceMap(format!("expected header `filename,sequence_id`, got {headers:?}")));
        }
        let mut mapping = BTreeMap::new();
        for row in reader.deserialize() {
            let row: SequenceRow = row?;
            if mapping.insert(row.filename.clone(), row.sequence_id).is_some() {
                return Err(DataError::BadSequenceMap(format!("`{}` is listed twice", row.filename)));
            }
        }
        Ok(Self { mapping, source: None })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let mut map = Self::parse(&fs::read_to_string(path)?)?;
        map.source = Some(path.to_path_buf());
        Ok(map)
    }

    /// The shipped illustrative CVC-ClinicDB map (612 frames, 29 sequences).
    pub fn example_cvc() -> Self {
        Self::parse(EXAMPLE_CVC_SEQUENCE_MAP).expect("bundled map parses")
    }

    /// Sequence of `filename`, falling back to a unique entry with the same stem
    /// (so `12.png` finds `12.tif`).
    pub fn lookup(&self, filename: &str) -> Option<u32> {
        if let Some(&id) = self.mapping.get(filename) {
            return Some(id);
        }
        let want = stem(filename);
        let mut hits = self.mapping.iter().filter(|(k, _)| stem(k) == want).map(|(_, &v)| v);
        match (hits.next(), hits.next()) {
            (Some(id), None) => Some(id),
            _ => None,
        }
    }

    pub fn sequence_ids(&self) -> BTreeSet<u32> {
        self.mapping.values().copied().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMethod {
    SortedFixed,
    RandomSeeded,
    SequenceGrouped,
}

/// Percentages of train, val and test; must sum to 100.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Ratios {
    pub const DEFAULT: Ratios = Ratios { train: 80.0, val: 10.0, test: 10.0 };

    pub fn new(train: f64, val: f64, test: f64) -> Result<Self, DataError> {
        let r = Self { train, val, test };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(DataError::BadRatios(format!("{parts:?} must be non-negative")));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 100.0).abs() > 1e-9 {
            return Err(DataError::BadRatios(format!("{parts:?} sum to {sum}, not 100")));
        }
        Ok(())
    }

    /// `(⌊train%·N⌋, ⌊val%·N⌋, rest)`.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let count = |pct: f64| ((pct * n as f64) / 100.0 + 1e-9).floor() as usize;
        let train = count(self.train).min(n);
        let val = count(self.val).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub ratios: Option<Ratios>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_sequences: Option<Vec<u32>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub test_sequences: Option<Vec<u32>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub method: PartitionMethod,
    pub provenance: Provenance,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

fn canonical(mut names: Vec<String>) -> Vec<String> {
    names.sort_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
    names
}

impl PartitionSpec {
    pub fn split(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pretty JSON with a trailing newline; identical input gives identical bytes.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let spec: Self = serde_json::from_str(text)?;
        spec.check_disjoint()?;
        Ok(spec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DataError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    fn check_disjoint(&self) -> Result<(), DataError> {
        let mut seen = BTreeSet::new();
        for name in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(name.as_str()) {
                return Err(DataError::BadManifest(format!("`{name}` appears more than once")));
            }
        }
        Ok(())
    }

    /// Checks that the three splits exactly cover `index`.
    pub fn check_covers(&self, index: &DatasetIndex) -> Result<(), DataError> {
        self.check_disjoint()?;
        let ours: BTreeSet<&str> = self.train.iter().chain(&self.val).chain(&self.test).map(String::as_str).collect();
        let theirs: BTreeSet<&str> = index.entries.iter().map(DatasetEntry::filename).collect();
        if let Some(extra) = ours.difference(&theirs).next() {
            return Err(DataError::BadManifest(format!("`{extra}` is not in the dataset")));
        }
        if let Some(missing) = theirs.difference(&ours).next() {
            return Err(DataError::BadManifest(format!("`{missing}` is not assigned to any split")));
        }
        Ok(())
    }
}

fn slice_partition(names: &[String], ratios: &Ratios) -> (Vec<String>, Vec<String>, Vec<String>) {
    let (tr, va, _) = ratios.sizes(names.len());
    (
        canonical(names[..tr].to_vec()),
        canonical(names[tr..tr + va].to_vec()),
        canonical(names[tr + va..].to_vec()),
    )
}

pub fn sorted_fixed_partition(index: &DatasetIndex, ratios: Ratios) -> Result<PartitionSpec, DataError> {
    ratios.validate()?;
    if index.entries.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let names = canonical(index.filenames());
    let (train, val, test) = slice_partition(&names, &ratios);
    Ok(PartitionSpec {
        method: PartitionMethod::SortedFixed,
        provenance: Provenance { ratios: Some(ratios), ..Provenance::default() },
        train,
        val,
        test,
    })
}

/// Shuffles the sorted names with `SplitMix64::new(seed)` (Fisher–Yates from
/// the last position down) and slices by `ratios`.
pub fn random_partition(index: &DatasetIndex, ratios: Ratios, seed: u64) -> Result<PartitionSpec, DataError> {
    ratios.validate()?;
    if index.entries.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let mut names = canonical(index.filenames());
    SplitMix64::new(seed).shuffle(&mut names);
    let (train, val, test) = slice_partition(&names, &ratios);
    Ok(PartitionSpec {
        method: PartitionMethod::RandomSeeded,
        provenance: Provenance { ratios: Some(ratios), seed: Some(seed), ..Provenance::default() },
        train,
        val,
        test,
    })
}

/// Holds out whole sequences: every frame of `val_sequences` goes to val,
/// every frame of `test_sequences` to test, the rest to train.
pub fn sequence_partition(
    index: &DatasetIndex,
    seqmap: &SequenceMap,
    val_sequences: &BTreeSet<u32>,
    test_sequences: &BTreeSet<u32>,
) -> Result<PartitionSpec, DataError> {
    let overlap: Vec<u32> = val_sequences.intersection(test_sequences).copied().collect();
    if !overlap.is_empty() {
        return Err(DataError::OverlappingSequenceSets(overlap));
    }
    let known = seqmap.sequence_ids();
    if let Some(&id) = val_sequences.iter().chain(test_sequences).find(|id| !known.contains(id)) {
        return Err(DataError::UnknownSequenceId(id));
    }
    if index.entries.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for name in canonical(index.filenames()) {
        let id = seqmap.lookup(&name).ok_or_else(|| DataError::UnmappedFilename(name.clone()))?;
        if val_sequences.contains(&id) {
            val.push(name);
        } else if test_sequences.contains(&id) {
            test.push(name);
        } else {
            train.push(name);
        }
    }
    Ok(PartitionSpec {
        method: PartitionMethod::SequenceGrouped,
        provenance: Provenance {
            val_sequences: Some(val_sequences.iter().copied().collect()),
            test_sequences: Some(test_sequences.iter().copied().collect()),
            ..Provenance::default()
        },
        train,
        val,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakingSequence {
    pub sequence_id: u32,
    pub partitions: Vec<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub leaking_sequences: Vec<LeakingSequence>,
    pub is_clean: bool,
}

/// Lists every sequence whose frames appear in two or more splits.
pub fn audit_leakage(spec: &PartitionSpec, seqmap: &SequenceMap) -> Result<LeakageReport, DataError> {
    let mut seen: BTreeMap<u32, BTreeSet<Split>> = BTreeMap::new();
    for split in Split::ALL {
        for name in spec.split(split) {
            let id = seqmap.lookup(name).ok_or_else(|| DataError::UnmappedFilename(name.clone()))?;
            seen.entry(id).or_default().insert(split);
        }
    }
    let leaking_sequences: Vec<LeakingSequence> = seen
        .into_iter()
        .filter(|(_, splits)| splits.len() >= 2)
        .map(|(sequence_id, splits)| LeakingSequence { sequence_id, partitions: splits.into_iter().collect() })
        .collect();
    Ok(LeakageReport { is_clean: leaking_sequences.is_empty(), leaking_sequences })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index(names: &[&str]) -> DatasetIndex {
        DatasetIndex::from_filenames(DatasetKind::Generic, names).unwrap()
    }

    #[test]
    fn bytewise_order() {
        let idx = index(&["img2.png", "img10.png", "b.png", "a.png"]);
        assert_eq!(idx.filenames(), vec!["a.png", "b.png", "img10.png", "img2.png"]);
    }

    #[test]
    fn floor_slicing() {
        assert_eq!(Ratios::DEFAULT.sizes(1000), (800, 100, 100));
        assert_eq!(Ratios::DEFAULT.sizes(10), (8, 1, 1));
        assert_eq!(Ratios::DEFAULT.sizes(7), (5, 0, 2));
        assert_eq!(Ratios::new(29.0, 29.0, 42.0).unwrap().sizes(100), (29, 29, 42));
        assert!(matches!(Ratios::new(80.0, 10.0, 5.0), Err(DataError::BadRatios(_))));
    }

    #[test]
    fn example_map_shape() {
        let map = SequenceMap::example_cvc();
        assert_eq!(map.mapping.len(), 612);
        assert_eq!(map.sequence_ids().len(), 29);
        assert_eq!(map.lookup("1.png"), Some(1));
        assert_eq!(map.lookup("612.tif"), Some(29));
    }

    #[test]
    fn overlapping_sets_rejected() {
        let map = SequenceMap::example_cvc();
        let idx = index(&["1.tif"]);
        let s: BTreeSet<u32> = [3].into();
        assert!(matches!(sequence_partition(&idx, &map, &s, &s), Err(DataError::OverlappingSequenceSets(v)) if v == vec![3]));
        let u: BTreeSet<u32> = [99].into();
        assert!(matches!(sequence_partition(&idx, &map, &u, &BTreeSet::new()), Err(DataError::UnknownSequenceId(99))));
    }

    #[test]
    fn single_crossing_frame_is_reported() {
        let map = SequenceMap::parse("filename,sequence_id\na.png,7\nb.png,7\nc.png,8\n").unwrap();
        let spec = PartitionSpec {
            method: PartitionMethod::SortedFixed,
            provenance: Provenance::default(),
            train: vec!["a.png".into(), "c.png".into()],
            val: vec![],
            test: vec!["b.png".into()],
        };
        let r = audit_leakage(&spec, &map).unwrap();
        assert_eq!(r.leaking_sequences, vec![LeakingSequence { sequence_id: 7, partitions: vec![Split::Train, Split::Test] }]);
        assert!(!r.is_clean);
    }

    #[test]
    fn bad_header_rejected() {
        assert!(matches!(SequenceMap::parse("name,seq\na,1\n"), Err(DataError::BadSequenceMap(_))));
    }
}
