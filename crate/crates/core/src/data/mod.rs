//! Paired MRI/PET slices: on-disk format, normalization, splitting and the
//! synthetic phantom generator.
//!
//! A dataset directory holds `manifest.json` plus one `<id>_mri.f32` and one
//! `<id>_pet.f32` per sample. Each array file is raw little-endian `f32`,
//! row-major, with no header, so its size is exactly `height * width * 4` bytes.

mod phantom;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{stream, Purpose};
use crate::{Error, Result};

pub use phantom::{gen_phantom, render_phantom, PhantomDetail};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FORMAT_VERSION: &str = "1.0";

/// Co-registered MRI and PET slices sharing one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSlice {
    pub id: String,
    pub mri: Array2<f32>,
    pub pet: Array2<f32>,
}

impl PairedSlice {
    pub fn new(id: impl Into<String>, mri: Array2<f32>, pet: Array2<f32>) -> Result<Self> {
        let id = id.into();
        if mri.dim() != pet.dim() {
            return Err(Error::Dimension(format!(
                "sample `{id}`: MRI {:?} and PET {:?} differ",
                mri.dim(),
                pet.dim()
            )));
        }
        Ok(Self { id, mri, pet })
    }

    pub fn height(&self) -> usize {
        self.mri.nrows()
    }

    pub fn width(&self) -> usize {
        self.mri.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: f64,
    pub max: f64,
}

impl Bounds {
    fn of<'a>(values: impl IntoIterator<Item = &'a f32>) -> Self {
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            min = min.min(*v as f64);
            max = max.max(*v as f64);
        }
        Self { min, max }
    }

    fn union(self, other: Self) -> Self {
        Self {
            min: self.min.min(other.min),
            max: self.max.max(other.max),
        }
    }

    fn span(&self) -> f64 {
        let s = self.max - self.min;
        if s > 0.0 {
            s
        } else {
            1.0
        }
    }

    /// Maps `[min, max]` onto `[0, 1]`, clamping values outside the fitted range.
    pub fn forward(&self, v: f32) -> f32 {
        (((v as f64 - self.min) / self.span()).clamp(0.0, 1.0)) as f32
    }

    pub fn inverse(&self, v: f32) -> f32 {
        (v as f64 * self.span() + self.min) as f32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModalityBounds {
    pub mri: Bounds,
    pub pet: Bounds,
}

/// Intensity normalization recorded in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Normalization {
    /// Stored values are already in `[0, 1]`.
    None,
    /// One min-max range per modality, fitted on the training split.
    Global { mri: Bounds, pet: Bounds },
    /// Min-max range per sample and modality.
    PerSample { bounds: BTreeMap<String, ModalityBounds> },
}

impl Normalization {
    /// Global min-max per modality over `slices`.
    pub fn fit_global<'a>(slices: impl IntoIterator<Item = &'a PairedSlice>) -> Result<Self> {
        let mut acc: Option<ModalityBounds> = None;
        for s in slices {
            let b = ModalityBounds {
                mri: Bounds::of(s.mri.iter()),
                pet: Bounds::of(s.pet.iter()),
            };
            acc = Some(match acc {
                None => b,
                Some(a) => ModalityBounds {
                    mri: a.mri.union(b.mri),
                    pet: a.pet.union(b.pet),
                },
            });
        }
        let b = acc.ok_or_else(|| Error::Input("cannot fit normalization on zero samples".into()))?;
        Ok(Normalization::Global { mri: b.mri, pet: b.pet })
    }

    pub fn fit_per_sample<'a>(slices: impl IntoIterator<Item = &'a PairedSlice>) -> Self {
        let bounds = slices
            .into_iter()
            .map(|s| {
                (
                    s.id.clone(),
                    ModalityBounds {
                        mri: Bounds::of(s.mri.iter()),
                        pet: Bounds::of(s.pet.iter()),
                    },
                )
            })
            .collect();
        Normalization::PerSample { bounds }
    }

    pub fn bounds_for(&self, id: &str) -> Result<Option<ModalityBounds>> {
        match self {
            Normalization::None => Ok(None),
            Normalization::Global { mri, pet } => Ok(Some(ModalityBounds { mri: *mri, pet: *pet })),
            Normalization::PerSample { bounds } => bounds
                .get(id)
                .copied()
                .map(Some)
                .ok_or_else(|| Error::Config(format!("no normalization bounds for sample `{id}`"))),
        }
    }

    /// Raw slice -> `[0, 1]` slice.
    pub fn normalize(&self, slice: &PairedSlice) -> Result<PairedSlice> {
        match self.bounds_for(&slice.id)? {
            None => Ok(slice.clone()),
            Some(b) => Ok(PairedSlice {
                id: slice.id.clone(),
                mri: slice.mri.mapv(|v| b.mri.forward(v)),
                pet: slice.pet.mapv(|v| b.pet.forward(v)),
            }),
        }
    }

    pub fn denormalize(&self, slice: &PairedSlice) -> Result<PairedSlice> {
        match self.bounds_for(&slice.id)? {
            None => Ok(slice.clone()),
            Some(b) => Ok(PairedSlice {
                id: slice.id.clone(),
                mri: slice.mri.mapv(|v| b.mri.inverse(v)),
                pet: slice.pet.mapv(|v| b.pet.inverse(v)),
            }),
        }
    }

    /// Maps a normalized PET array of sample `id` back to raw units.
    pub fn denormalize_pet(&self, id: &str, pet: &Array2<f32>) -> Result<Array2<f32>> {
        Ok(match self.bounds_for(id)? {
            None => pet.clone(),
            Some(b) => pet.mapv(|v| b.pet.inverse(v)),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: String,
    pub mri_path: String,
    pub pet_path: String,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub dtype: String,
    pub layout: String,
    pub normalization: Normalization,
    pub samples: Vec<SampleEntry>,
    #[serde(default)]
    pub split: Split,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.dtype != "f32le" {
            return Err(Error::Config(format!("unsupported dtype `{}`", self.dtype)));
        }
        if self.layout != "row-major" {
            return Err(Error::Config(format!("unsupported layout `{}`", self.layout)));
        }
        let mut seen = BTreeSet::new();
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(Error::Config(format!("duplicate sample id `{}`", s.id)));
            }
        }
        for id in self.split.train.iter().chain(&self.split.test) {
            if !seen.contains(id.as_str()) {
                return Err(Error::Config(format!("split references unknown id `{id}`")));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let manifest: Self = serde_json::from_str(&text)?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// A loaded dataset: normalized slices in manifest order plus the manifest.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
    pub slices: Vec<PairedSlice>,
}

impl Dataset {
    fn subset(&self, ids: &[String]) -> Vec<PairedSlice> {
        let wanted: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        self.slices
            .iter()
            .filter(|s| wanted.contains(s.id.as_str()))
            .cloned()
            .collect()
    }

    /// Training split, or every sample when the manifest records no split.
    pub fn train(&self) -> Vec<PairedSlice> {
        if self.manifest.split.train.is_empty() && self.manifest.split.test.is_empty() {
            self.slices.clone()
        } else {
            self.subset(&self.manifest.split.train)
        }
    }

    pub fn test(&self) -> Vec<PairedSlice> {
        self.subset(&self.manifest.split.test)
    }
}

/// Resolves a dataset directory or a manifest path to the manifest path.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn read_f32(path: &Path, height: usize, width: usize, id: &str) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::Load {
        id: id.to_string(),
        reason: format!("{}: {e}", path.display()),
    })?;
    let expected = height * width * 4;
    if bytes.len() != expected {
        return Err(Error::Load {
            id: id.to_string(),
            reason: format!(
                "{} has {} bytes, expected {expected} ({height}x{width} f32)",
                path.display(),
                bytes.len()
            ),
        });
    }
    let values: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Load {
            id: id.to_string(),
            reason: format!("{} has a non-finite value at index {pos}", path.display()),
        });
    }
    Ok(Array2::from_shape_vec((height, width), values).expect("length checked above"))
}

pub fn write_f32(path: &Path, values: &Array2<f32>) -> Result<()> {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads every sample listed in the manifest without normalizing.
pub fn load_raw(manifest_path_or_dir: &Path) -> Result<Dataset> {
    let path = manifest_path(manifest_path_or_dir);
    let manifest = DatasetManifest::read(&path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    if manifest.samples.is_empty() {
        log::warn!("dataset manifest {} lists no samples", path.display());
    }
    let slices = manifest
        .samples
        .iter()
        .map(|e| {
            let mri = read_f32(&root.join(&e.mri_path), e.height, e.width, &e.id)?;
            let pet = read_f32(&root.join(&e.pet_path), e.height, e.width, &e.id)?;
            PairedSlice::new(e.id.clone(), mri, pet)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { root, manifest, slices })
}

/// Loads and normalizes a dataset into `[0, 1]`.
pub fn load_dataset(manifest_path_or_dir: &Path) -> Result<Dataset> {
    let mut ds = load_raw(manifest_path_or_dir)?;
    ds.slices = ds
        .slices
        .iter()
        .map(|s| ds.manifest.normalization.normalize(s))
        .collect::<Result<_>>()?;
    Ok(ds)
}

/// Reads only the MRI arrays of the listed ids (PET files are not touched).
pub fn load_mri_only(manifest_path_or_dir: &Path, ids: &[String]) -> Result<Vec<(String, Array2<f32>)>> {
    let path = manifest_path(manifest_path_or_dir);
    let manifest = DatasetManifest::read(&path)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let entries: BTreeMap<&str, &SampleEntry> =
        manifest.samples.iter().map(|e| (e.id.as_str(), e)).collect();
    ids.iter()
        .map(|id| {
            let e = entries
                .get(id.as_str())
                .ok_or_else(|| Error::Load { id: id.clone(), reason: "not in manifest".into() })?;
            let raw = read_f32(&root.join(&e.mri_path), e.height, e.width, id)?;
            let norm = match manifest.normalization.bounds_for(id)? {
                None => raw,
                Some(b) => raw.mapv(|v| b.mri.forward(v)),
            };
            Ok((id.clone(), norm))
        })
        .collect()
}

/// Writes raw slices and a manifest into `dir`.
pub fn write_dataset(
    dir: &Path,
    slices: &[PairedSlice],
    normalization: Normalization,
    split: Split,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut samples = Vec::with_capacity(slices.len());
    for s in slices {
        let entry = SampleEntry {
            id: s.id.clone(),
            mri_path: format!("{}_mri.f32", s.id),
            pet_path: format!("{}_pet.f32", s.id),
            height: s.height(),
            width: s.width(),
        };
        write_f32(&dir.join(&entry.mri_path), &s.mri)?;
        write_f32(&dir.join(&entry.pet_path), &s.pet)?;
        samples.push(entry);
    }
    let manifest = DatasetManifest {
        format_version: FORMAT_VERSION.to_string(),
        dtype: "f32le".to_string(),
        layout: "row-major".to_string(),
        normalization,
        samples,
        split,
    };
    manifest.validate()?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Seeded disjoint split of `ids`; the test side gets `round(n * test_fraction)` ids.
pub fn split_ids(ids: &[String], test_fraction: f64, seed: u64) -> Result<Split> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test_fraction must lie strictly between 0 and 1, got {test_fraction}"
        )));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut stream(seed, Purpose::Split, 0));
    let n_test = (ids.len() as f64 * test_fraction).round() as usize;
    let (test, train) = order.split_at(n_test);
    let pick = |idx: &[usize]| {
        let mut v: Vec<usize> = idx.to_vec();
        v.sort_unstable();
        v.into_iter().map(|i| ids[i].clone()).collect::<Vec<_>>()
    };
    Ok(Split {
        train: pick(train),
        test: pick(test),
    })
}

/// Splits a collection into `(train, test)` slices.
pub fn split_dataset(
    collection: &[PairedSlice],
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<PairedSlice>, Vec<PairedSlice>, Split)> {
    let ids: Vec<String> = collection.iter().map(|s| s.id.clone()).collect();
    let split = split_ids(&ids, test_fraction, seed)?;
    let test_ids: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();
    let (test, train): (Vec<_>, Vec<_>) = collection
        .iter()
        .cloned()
        .partition(|s| test_ids.contains(s.id.as_str()));
    Ok((train, test, split))
}

/// A source of `(x0, condition)` training batches.
pub trait BatchSource {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks the items at `indices` into `(batch, h, w)` PET and MRI tensors.
    fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)>;
}

impl BatchSource for [PairedSlice] {
    fn len(&self) -> usize {
        <[PairedSlice]>::len(self)
    }

    fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        let first = indices
            .first()
            .map(|i| &self[*i])
            .ok_or_else(|| Error::Input("empty batch".into()))?;
        let (h, w) = (first.height(), first.width());
        let mut pet: Vec<f32> = Vec::with_capacity(indices.len() * h * w);
        let mut mri: Vec<f32> = Vec::with_capacity(indices.len() * h * w);
        for &i in indices {
            let s = &self[i];
            if (s.height(), s.width()) != (h, w) {
                return Err(Error::Dimension(format!(
                    "sample `{}` is {}x{}, batch is {h}x{w}",
                    s.id,
                    s.height(),
                    s.width()
                )));
            }
            pet.extend(s.pet.iter().copied());
            mri.extend(s.mri.iter().copied());
        }
        let n = indices.len();
        Ok((
            Tensor::from_vec(pet, (n, h, w), device)?.to_dtype(dtype)?,
            Tensor::from_vec(mri, (n, h, w), device)?.to_dtype(dtype)?,
        ))
    }
}

impl BatchSource for Vec<PairedSlice> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<(Tensor, Tensor)> {
        self.as_slice().batch(indices, dtype, device)
    }
}

/// Converts an `(h, w)` array into a tensor of the given dtype.
pub fn array_to_tensor(a: &Array2<f32>, dtype: DType, device: &Device) -> Result<Tensor> {
    let (h, w) = a.dim();
    Ok(Tensor::from_iter(a.iter().copied(), device)?
        .reshape((h, w))?
        .to_dtype(dtype)?)
}

pub fn tensor_to_array(t: &Tensor) -> Result<Array2<f32>> {
    let (h, w) = t.dims2()?;
    let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    Ok(Array2::from_shape_vec((h, w), values).expect("tensor shape matches"))
}
