//! Dice and sensitivity, per-patient pooled evaluation, the component
//! ablation and mask export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayView, ArrayView2, Axis, Dimension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{batch_images, DatasetSplit, SliceRecord};
use crate::network::{DualBranchNet, NetworkConfig, NetworkError};
use crate::nn::Mode;
use crate::scalar::Scalar;
use crate::trainer::{fit, History, TrainConfig, TrainError};
use crate::volume_io::{write_mask_pgm, VolumeError};

/// Slices per inference forward pass.
pub const EVAL_BATCH: usize = 8;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("mask shapes differ: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("mask value {0} is not binary")]
    NonBinary(u8),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("record {0}/{1} has no ground-truth mask")]
    MissingMask(String, usize),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error("ablation run failed: {0}")]
    Training(Box<TrainError>),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Pixel counts of a binary prediction against binary ground truth.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn count<D: Dimension>(pred: ArrayView<u8, D>, gt: ArrayView<u8, D>) -> Result<Self> {
        if pred.shape() != gt.shape() {
            return Err(EvalError::ShapeMismatch(pred.shape().to_vec(), gt.shape().to_vec()));
        }
        let mut c = Confusion::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (p, g) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fn_ += 1,
                (0, 0) => c.tn += 1,
                (v, 0 | 1) | (_, v) => return Err(EvalError::NonBinary(v)),
            }
        }
        Ok(c)
    }

    pub fn add(&mut self, other: Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }

    /// `2TP / (2TP + FP + FN)`; 1 when both masks are empty.
    pub fn dice(&self) -> f64 {
        let den = 2 * self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            (2 * self.tp) as f64 / den as f64
        }
    }

    /// `TP / (TP + FN)`; 1 when the ground truth is empty.
    pub fn sensitivity(&self) -> f64 {
        let den = self.tp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }
}

pub fn dice_score(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<f64> {
    Confusion::count(pred, gt).map(|c| c.dice())
}

pub fn sensitivity(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<f64> {
    Confusion::count(pred, gt).map(|c| c.sensitivity())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub dice: f64,
    pub sens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_patient: BTreeMap<String, PatientMetrics>,
    pub mean_dice: f64,
    pub mean_sens: f64,
    pub n_patients: usize,
}

impl MetricReport {
    /// One pooled score per patient, then unweighted means.
    pub fn from_confusions(per_patient: BTreeMap<String, Confusion>) -> Result<Self> {
        if per_patient.is_empty() {
            return Err(EvalError::EmptyTestSet);
        }
        let per_patient: BTreeMap<String, PatientMetrics> = per_patient
            .into_iter()
            .map(|(pid, c)| {
                (
                    pid,
                    PatientMetrics {
                        dice: c.dice(),
                        sens: c.sensitivity(),
                    },
                )
            })
            .collect();
        let n = per_patient.len();
        let mean_dice = per_patient.values().map(|m| m.dice).sum::<f64>() / n as f64;
        let mean_sens = per_patient.values().map(|m| m.sens).sum::<f64>() / n as f64;
        Ok(Self {
            per_patient,
            mean_dice,
            mean_sens,
            n_patients: n,
        })
    }

    pub fn to_table(&self) -> String {
        let width = self.per_patient.keys().map(String::len).max().unwrap_or(0).max(7);
        let mut out = format!("{:<width$}  {:>6}  {:>6}\n", "patient", "DSC", "Sens");
        for (pid, m) in &self.per_patient {
            let _ = writeln!(out, "{pid:<width$}  {:>6.4}  {:>6.4}", m.dice, m.sens);
        }
        let _ = writeln!(out, "{:<width$}  {:>6.4}  {:>6.4}", "mean", self.mean_dice, self.mean_sens);
        out
    }
}

/// Binary masks predicted by averaging both branches' probabilities and
/// taking the arg-max class; any non-background class counts as
/// foreground. Runs in inference mode.
pub fn predict_masks<T: Scalar>(model: &mut DualBranchNet<T>, records: &[SliceRecord]) -> Result<Vec<Array2<u8>>> {
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(EVAL_BATCH) {
        let (image_a, image_b) = batch_images::<T>(chunk);
        let pred = model.forward(image_a.view(), image_b.view(), Mode::Eval)?;
        let avg = (&pred.probs_a + &pred.probs_b).mapv(|v| v * T::from(0.5).unwrap());
        for sample in avg.axis_iter(Axis(0)) {
            let (_, h, w) = sample.dim();
            out.push(Array2::from_shape_fn((h, w), |(y, x)| {
                let mut best = 0;
                for c in 1..sample.dim().0 {
                    if sample[[c, y, x]] > sample[[best, y, x]] {
                        best = c;
                    }
                }
                u8::from(best != 0)
            }));
        }
    }
    Ok(out)
}

/// Per-patient pooled Dice and sensitivity over `records`.
pub fn evaluate<T: Scalar>(model: &mut DualBranchNet<T>, records: &[SliceRecord]) -> Result<MetricReport> {
    if records.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    for r in records {
        if r.mask.is_none() {
            return Err(EvalError::MissingMask(r.patient_id.clone(), r.slice_index));
        }
    }
    let preds = predict_masks(model, records)?;
    let mut pooled: BTreeMap<String, Confusion> = BTreeMap::new();
    for (r, p) in records.iter().zip(&preds) {
        let gt = r.mask.as_ref().expect("checked above");
        pooled.entry(r.patient_id.clone()).or_default().add(Confusion::count(p.view(), gt.view())?);
    }
    MetricReport::from_confusions(pooled)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub enable_mem: bool,
    pub enable_cif: bool,
    pub dice: f64,
    pub sens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
}

/// Row order of the ablation table: baseline, +MEM, +CIF, full model.
pub const ABLATION_ROWS: [(bool, bool); 4] = [(false, false), (true, false), (false, true), (true, true)];

impl AblationResult {
    pub fn row(&self, enable_mem: bool, enable_cif: bool) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.enable_mem == enable_mem && r.enable_cif == enable_cif)
    }

    /// Check-mark grid of enabled components with Dice and sensitivity.
    pub fn to_table(&self) -> String {
        let mark = |on: bool| if on { "✓" } else { " " };
        let mut out = String::from("MEM  CIF  DSC     Sens\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                " {}    {}   {:.4}  {:.4}",
                mark(r.enable_mem),
                mark(r.enable_cif),
                r.dice,
                r.sens
            );
        }
        out
    }
}

/// Trains and tests the four component configurations on the same split,
/// seed and budget. Each row reports the final model on `split.test`.
pub fn run_ablation(split: &DatasetSplit, net: &NetworkConfig, train: &TrainConfig) -> Result<AblationResult> {
    run_ablation_with(split, net, train, |_, _| {})
}

/// As [`run_ablation`], calling `progress` after each finished row.
pub fn run_ablation_with(
    split: &DatasetSplit,
    net: &NetworkConfig,
    train: &TrainConfig,
    mut progress: impl FnMut(usize, &AblationRow),
) -> Result<AblationResult> {
    if split.test.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    // the row metric comes from the final model only
    let train = TrainConfig {
        eval_every: 0,
        ..train.clone()
    };
    let mut rows = Vec::with_capacity(4);
    for (i, (enable_mem, enable_cif)) in ABLATION_ROWS.into_iter().enumerate() {
        let (row, _) = ablation_row(split, net, &train, enable_mem, enable_cif)?;
        progress(i, &row);
        rows.push(row);
    }
    Ok(AblationResult { rows })
}

/// Trains one component configuration from scratch and scores its final
/// model on `split.test`.
pub fn ablation_row(
    split: &DatasetSplit,
    net: &NetworkConfig,
    train: &TrainConfig,
    enable_mem: bool,
    enable_cif: bool,
) -> Result<(AblationRow, History)> {
    let config = NetworkConfig {
        enable_mem,
        enable_cif,
        ..net.clone()
    };
    let (mut state, history) = fit::<f32>(split, &config, train, None).map_err(|e| EvalError::Training(Box::new(e)))?;
    let report = evaluate(&mut state.model, &split.test)?;
    let row = AblationRow {
        enable_mem,
        enable_cif,
        dice: report.mean_dice,
        sens: report.mean_sens,
    };
    Ok((row, history))
}

/// Writes `<pid>_<idx>_pred.pgm` and `<pid>_<idx>_gt.pgm` for every record
/// that has a ground-truth mask; returns the written paths.
pub fn predict_patient<T: Scalar>(
    model: &mut DualBranchNet<T>,
    records: &[SliceRecord],
    out_dir: impl AsRef<Path>,
) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    if records.is_empty() {
        return Ok(Vec::new());
    }
    std::fs::create_dir_all(dir).map_err(|source| VolumeError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let preds = predict_masks(model, records)?;
    let mut written = Vec::new();
    for (r, p) in records.iter().zip(&preds) {
        let stem = format!("{}_{}", r.patient_id, r.slice_index);
        let pred_path = dir.join(format!("{stem}_pred.pgm"));
        write_mask_pgm(p.view(), &pred_path)?;
        written.push(pred_path);
        if let Some(gt) = &r.mask {
            let gt_path = dir.join(format!("{stem}_gt.pgm"));
            write_mask_pgm(gt.view(), &gt_path)?;
            written.push(gt_path);
        }
    }
    Ok(written)
}

/// Records grouped by patient id.
pub fn group_by_patient(records: &[SliceRecord]) -> BTreeMap<&str, Vec<SliceRecord>> {
    let mut groups: BTreeMap<&str, Vec<SliceRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.patient_id.as_str()).or_default().push(r.clone());
    }
    groups
}

/// Published whole-tumour results on the full brain-tumour benchmark.
/// They need the real dataset and GPU-scale training, so nothing here is
/// expected to reproduce them; they document the ordering the phantom
/// ablation mirrors.
pub mod reference {
    /// `(enable_mem, enable_cif, dice, sens)` at 10% labels, T2 with T1CE.
    pub const ABLATION: [(bool, bool, f64, f64); 4] = [
        (false, false, 0.6076, 0.6012),
        (true, false, 0.6371, 0.5637),
        (false, true, 0.7031, 0.7754),
        (true, true, 0.7203, 0.7282),
    ];

    /// Full model `(label fraction, dice, sens)` with T1 and FLAIR.
    pub const FULL_T1_FLAIR: [(f64, f64, f64); 3] = [(0.01, 0.7232, 0.6699), (0.05, 0.7728, 0.8214), (0.10, 0.7970, 0.8579)];

    /// Full model `(label fraction, dice, sens)` with T2 and T1CE.
    pub const FULL_T2_T1CE: [(f64, f64, f64); 3] = [(0.01, 0.4989, 0.5100), (0.05, 0.6359, 0.6929), (0.10, 0.7203, 0.7282)];

    /// Lesion-bearing training slices after slicing and filtering.
    pub const TRAIN_SLICES: usize = 13_598;
}
