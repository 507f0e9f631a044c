//! Slice extraction, normalization, cropping and patient-level splitting.

mod batch;
mod phantom;

pub use batch::{batch_images, make_batches, Batch, BatchTensors};
pub use phantom::{generate_phantom, generate_phantom_detailed, PhantomCase, PhantomSpec};

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{cst, to_f64, Scalar};
use crate::volume_io::{self, VolumeError};

/// Standard deviation below which a slice is treated as constant.
pub const NORMALIZE_MIN_STD: f64 = 1e-8;
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("volume {0} has no label array")]
    MissingLabel(String),
    #[error("crop {crop:?} larger than image {image:?}")]
    CropLargerThanImage {
        crop: (usize, usize),
        image: (usize, usize),
    },
    #[error("need at least 2 patients, got {0}")]
    TooFewPatients(usize),
    #[error("split would leave the {0} set empty")]
    EmptySplit(&'static str),
    #[error("label fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("labeled set is empty")]
    EmptyLabeledSet,
    #[error("batch sizes must be at least 1")]
    InvalidBatchSize,
    #[error("volume {0}: {1}")]
    InvalidVolume(String, String),
    #[error("duplicate patient id {0}")]
    DuplicatePatient(String),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T> = std::result::Result<T, PipelineError>;

/// One patient's co-registered modality pair and optional whole-tumor label.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiModalVolume {
    pub patient_id: String,
    pub modality_a: Array3<f32>,
    pub modality_b: Array3<f32>,
    pub label: Option<Array3<u8>>,
}

impl MultiModalVolume {
    pub fn new(
        patient_id: impl Into<String>,
        modality_a: Array3<f32>,
        modality_b: Array3<f32>,
        label: Option<Array3<u8>>,
    ) -> Result<Self> {
        let patient_id = patient_id.into();
        if modality_a.dim() != modality_b.dim() {
            return Err(PipelineError::InvalidVolume(
                patient_id,
                format!(
                    "modality shapes differ: {:?} vs {:?}",
                    modality_a.dim(),
                    modality_b.dim()
                ),
            ));
        }
        if let Some(label) = &label {
            if label.dim() != modality_a.dim() {
                return Err(PipelineError::InvalidVolume(
                    patient_id,
                    format!("label shape {:?} vs {:?}", label.dim(), modality_a.dim()),
                ));
            }
            if label.iter().any(|&v| v > 1) {
                return Err(PipelineError::InvalidVolume(
                    patient_id,
                    "label is not binary".into(),
                ));
            }
        }
        Ok(Self {
            patient_id,
            modality_a,
            modality_b,
            label,
        })
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.modality_a.dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SliceRecord {
    pub patient_id: String,
    pub slice_index: usize,
    pub image_a: Array2<f32>,
    pub image_b: Array2<f32>,
    pub mask: Option<Array2<u8>>,
    pub labeled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub labeled: Vec<SliceRecord>,
    pub unlabeled: Vec<SliceRecord>,
    pub test: Vec<SliceRecord>,
    pub label_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub patient_id: String,
    pub slice_index: usize,
    pub labeled: bool,
}

/// Serializable record of which slices went where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub label_fraction: f64,
    pub seed: u64,
    pub train_patients: Vec<String>,
    pub labeled_patients: Vec<String>,
    pub test_patients: Vec<String>,
    pub labeled: Vec<ManifestEntry>,
    pub unlabeled: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

fn entries(records: &[SliceRecord]) -> Vec<ManifestEntry> {
    records
        .iter()
        .map(|r| ManifestEntry {
            patient_id: r.patient_id.clone(),
            slice_index: r.slice_index,
            labeled: r.labeled,
        })
        .collect()
}

fn patients(records: &[SliceRecord]) -> Vec<String> {
    let mut seen = Vec::new();
    for r in records {
        if seen.last() != Some(&r.patient_id) && !seen.contains(&r.patient_id) {
            seen.push(r.patient_id.clone());
        }
    }
    seen
}

impl DatasetSplit {
    pub fn manifest(&self) -> SplitManifest {
        let labeled_patients = patients(&self.labeled);
        let mut train_patients = labeled_patients.clone();
        train_patients.extend(patients(&self.unlabeled));
        SplitManifest {
            label_fraction: self.label_fraction,
            seed: self.seed,
            train_patients,
            labeled_patients,
            test_patients: patients(&self.test),
            labeled: entries(&self.labeled),
            unlabeled: entries(&self.unlabeled),
            test: entries(&self.test),
        }
    }

    pub fn train_patient_ids(&self) -> BTreeSet<&str> {
        self.labeled
            .iter()
            .chain(&self.unlabeled)
            .map(|r| r.patient_id.as_str())
            .collect()
    }

    pub fn test_patient_ids(&self) -> BTreeSet<&str> {
        self.test.iter().map(|r| r.patient_id.as_str()).collect()
    }
}

/// Axial slices containing at least one lesion voxel, ascending by index.
pub fn slice_and_filter(
    volume: &MultiModalVolume,
) -> Result<Vec<(usize, Array2<f32>, Array2<f32>, Array2<u8>)>> {
    let label = volume
        .label
        .as_ref()
        .ok_or_else(|| PipelineError::MissingLabel(volume.patient_id.clone()))?;
    let mut out = Vec::new();
    for (d, mask) in label.axis_iter(Axis(0)).enumerate() {
        if mask.iter().any(|&v| v != 0) {
            out.push((
                d,
                volume.modality_a.index_axis(Axis(0), d).to_owned(),
                volume.modality_b.index_axis(Axis(0), d).to_owned(),
                mask.to_owned(),
            ));
        }
    }
    Ok(out)
}

/// Zero-mean, unit-variance (population std) normalization of one slice.
/// Constant slices map to all zeros.
pub fn normalize_slice<T: Scalar>(image: ArrayView2<T>) -> Array2<T> {
    let n = image.len().max(1) as f64;
    let mean = image.iter().map(|&v| to_f64(v)).sum::<f64>() / n;
    let var = image
        .iter()
        .map(|&v| {
            let d = to_f64(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let std = var.sqrt();
    if std < NORMALIZE_MIN_STD {
        return Array2::zeros(image.raw_dim());
    }
    image.mapv(|v| cst((to_f64(v) - mean) / std))
}

/// Centered `size` window; odd remainders drop the extra row/column at the
/// bottom/right.
pub fn center_crop<A: Clone>(image: ArrayView2<A>, size: (usize, usize)) -> Result<Array2<A>> {
    let (h, w) = image.dim();
    let (ch, cw) = size;
    if ch > h || cw > w {
        return Err(PipelineError::CropLargerThanImage {
            crop: size,
            image: (h, w),
        });
    }
    let top = (h - ch) / 2;
    let left = (w - cw) / 2;
    Ok(image.slice(s![top..top + ch, left..left + cw]).to_owned())
}

fn preprocess(image: &Array2<f32>, crop: (usize, usize)) -> Result<Array2<f32>> {
    center_crop(normalize_slice(image.view()).view(), crop)
}

fn patient_records(
    volume: &MultiModalVolume,
    crop: (usize, usize),
    keep_mask: bool,
) -> Result<Vec<SliceRecord>> {
    slice_and_filter(volume)?
        .into_iter()
        .map(|(d, a, b, m)| {
            Ok(SliceRecord {
                patient_id: volume.patient_id.clone(),
                slice_index: d,
                image_a: preprocess(&a, crop)?,
                image_b: preprocess(&b, crop)?,
                mask: if keep_mask {
                    Some(center_crop(m.view(), crop)?)
                } else {
                    None
                },
                labeled: keep_mask,
            })
        })
        .collect()
}

/// Number of labeled train patients for a fraction, `ceil(fraction * n)`.
pub fn labeled_patient_count(label_fraction: f64, n_train: usize) -> usize {
    ((label_fraction * n_train as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Patient-level 80/20 train/test split with a seeded labeled subset of the
/// train patients. Test slices keep their masks; unlabeled slices lose them.
pub fn make_split(
    volumes: &[MultiModalVolume],
    label_fraction: f64,
    seed: u64,
    crop: (usize, usize),
) -> Result<DatasetSplit> {
    if volumes.len() < 2 {
        return Err(PipelineError::TooFewPatients(volumes.len()));
    }
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(PipelineError::InvalidFraction(label_fraction));
    }
    let mut order: Vec<&MultiModalVolume> = volumes.iter().collect();
    order.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
    for pair in order.windows(2) {
        if pair[0].patient_id == pair[1].patient_id {
            return Err(PipelineError::DuplicatePatient(pair[0].patient_id.clone()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_train = (TRAIN_FRACTION * order.len() as f64).floor() as usize;
    let (train, test) = order.split_at(n_train);
    let n_labeled = labeled_patient_count(label_fraction, train.len()).min(train.len());

    let mut split = DatasetSplit {
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        test: Vec::new(),
        label_fraction,
        seed,
    };
    for (i, v) in train.iter().enumerate() {
        if i < n_labeled {
            split.labeled.extend(patient_records(v, crop, true)?);
        } else {
            split.unlabeled.extend(patient_records(v, crop, false)?);
        }
    }
    for v in test {
        split.test.extend(patient_records(v, crop, true)?);
    }
    if split.labeled.is_empty() {
        return Err(PipelineError::EmptySplit("labeled"));
    }
    if split.test.is_empty() {
        return Err(PipelineError::EmptySplit("test"));
    }
    Ok(split)
}

/// Loads `<pid>_a`, `<pid>_b` and optional `<pid>_label` volumes from a
/// directory. Portable pairs (`.json` + `.f32`) take precedence over `.nii`.
pub fn load_volume_dir(dir: impl AsRef<Path>) -> Result<Vec<MultiModalVolume>> {
    let dir = dir.as_ref();
    let listing = fs::read_dir(dir).map_err(|source| VolumeError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let mut ids = BTreeSet::new();
    for entry in listing {
        let entry = entry.map_err(|source| VolumeError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        for ext in [".json", ".nii"] {
            if let Some(pid) = name.strip_suffix(&format!("_a{ext}")) {
                ids.insert(pid.to_string());
            }
        }
    }
    let read = |stem: String| -> Result<Option<Array3<f32>>> {
        let portable = dir.join(format!("{stem}.json"));
        let nifti = dir.join(format!("{stem}.nii"));
        if portable.is_file() {
            Ok(Some(volume_io::read_portable(&portable)?.voxels))
        } else if nifti.is_file() {
            Ok(Some(volume_io::read_nifti1(&nifti)?.voxels))
        } else {
            Ok(None)
        }
    };
    let mut out = Vec::with_capacity(ids.len());
    for pid in ids {
        let a = read(format!("{pid}_a"))?.expect("listed above");
        let b = read(format!("{pid}_b"))?.ok_or_else(|| {
            PipelineError::InvalidVolume(pid.clone(), "missing modality b".into())
        })?;
        let label = read(format!("{pid}_label"))?
            .map(|l| l.mapv(|v| u8::from(v > 0.5)));
        out.push(MultiModalVolume::new(pid, a, b, label)?);
    }
    Ok(out)
}

/// Writes a volume as `<pid>_a`, `<pid>_b` and `<pid>_label` portable files.
pub fn write_volume_dir(volume: &MultiModalVolume, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let pid = &volume.patient_id;
    volume_io::write_portable(volume.modality_a.view(), dir.join(format!("{pid}_a")))?;
    volume_io::write_portable(volume.modality_b.view(), dir.join(format!("{pid}_b")))?;
    if let Some(label) = &volume.label {
        let as_f32 = label.mapv(f32::from);
        volume_io::write_portable(as_f32.view(), dir.join(format!("{pid}_label")))?;
    }
    Ok(())
}
