//! Supervised (cross-entropy + soft Dice) and cross-modal consistency
//! losses, each with its gradient w.r.t. the class probabilities.
//!
//! Probabilities are `(B, n_classes, H, W)`; masks are `(B, H, W)` class
//! indices (0 = background, 1 = foreground).

use ndarray::{s, Array4, ArrayView3, ArrayView4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::network::DualPrediction;
use crate::scalar::{cst, to_f64, Scalar};

pub const PROB_CLAMP: f64 = 1e-7;
pub const DICE_SMOOTH: f64 = 1e-5;
const FOREGROUND: usize = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("labeled part of the batch is empty")]
    EmptyLabeledBatch,
    #[error("mask value {0} is not a valid class index")]
    InvalidLabel(u8),
    #[error("non-finite loss term {term} = {value}")]
    NonFiniteLoss { term: &'static str, value: f64 },
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Cross-entropy weight.
    pub beta: f64,
    /// Dice weight.
    pub gamma_dice: f64,
    /// Consistency weight in the final objective.
    pub lambda_cons: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma_dice: 1.0,
            lambda_cons: 0.01,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_ce_a: f64,
    pub l_ce_b: f64,
    pub l_dice_a: f64,
    pub l_dice_b: f64,
    pub l_sup_total: f64,
    pub l_cons: f64,
    pub l_final: f64,
}

fn check_pair<T: Scalar>(probs: &ArrayView4<T>, mask: &ArrayView3<u8>) -> Result<()> {
    let (b, c, h, w) = probs.dim();
    if (b, h, w) != mask.dim() {
        return Err(LossError::ShapeMismatch(format!(
            "probs {:?} vs mask {:?}",
            probs.dim(),
            mask.dim()
        )));
    }
    if let Some(&bad) = mask.iter().find(|&&v| v as usize >= c) {
        return Err(LossError::InvalidLabel(bad));
    }
    if c <= FOREGROUND {
        return Err(LossError::ShapeMismatch(format!("need ≥ 2 classes, got {c}")));
    }
    Ok(())
}

/// Mean `−log p(true class)` with probabilities clamped to
/// `[1e-7, 1 − 1e-7]`.
pub fn cross_entropy<T: Scalar>(probs: ArrayView4<T>, mask: ArrayView3<u8>) -> Result<T> {
    cross_entropy_with_grad(probs, mask).map(|(v, _)| v)
}

pub fn cross_entropy_with_grad<T: Scalar>(
    probs: ArrayView4<T>,
    mask: ArrayView3<u8>,
) -> Result<(T, Array4<T>)> {
    check_pair(&probs, &mask)?;
    let (b, _, h, w) = probs.dim();
    let n = (b * h * w).max(1) as f64;
    let lo: T = cst(PROB_CLAMP);
    let hi: T = cst(1.0 - PROB_CLAMP);
    let inv_n: T = cst(1.0 / n);
    let mut grad = Array4::<T>::zeros(probs.raw_dim());
    let mut total = 0.0f64;
    for ((bi, y, x), &label) in mask.indexed_iter() {
        let cls = label as usize;
        let p = probs[[bi, cls, y, x]];
        let clamped = p.max(lo).min(hi);
        total -= to_f64(clamped).ln();
        if p > lo && p < hi {
            grad[[bi, cls, y, x]] = -inv_n / p;
        }
    }
    Ok((cst(total / n), grad))
}

/// `1 − (2·Σp·y + ε) / (Σp + Σy + ε)` over the foreground channel, pooled
/// over the whole batch.
pub fn dice_loss<T: Scalar>(probs: ArrayView4<T>, mask: ArrayView3<u8>) -> Result<T> {
    dice_loss_with_grad(probs, mask).map(|(v, _)| v)
}

pub fn dice_loss_with_grad<T: Scalar>(
    probs: ArrayView4<T>,
    mask: ArrayView3<u8>,
) -> Result<(T, Array4<T>)> {
    check_pair(&probs, &mask)?;
    let fg = probs.index_axis(Axis(1), FOREGROUND);
    let (mut inter, mut sum_p, mut sum_y) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &y) in fg.iter().zip(mask.iter()) {
        let p = to_f64(p);
        let y = f64::from(u8::from(y == FOREGROUND as u8));
        inter += p * y;
        sum_p += p;
        sum_y += y;
    }
    let num = 2.0 * inter + DICE_SMOOTH;
    let den = sum_p + sum_y + DICE_SMOOTH;
    let loss = 1.0 - num / den;
    let mut grad = Array4::<T>::zeros(probs.raw_dim());
    let mut g_fg = grad.index_axis_mut(Axis(1), FOREGROUND);
    for (g, &y) in g_fg.iter_mut().zip(mask.iter()) {
        let y = f64::from(u8::from(y == FOREGROUND as u8));
        *g = cst(-(2.0 * y * den - num) / (den * den));
    }
    Ok((cst(loss), grad))
}

/// Mean squared difference over every element; 0 for an empty batch.
pub fn consistency_loss<T: Scalar>(probs_a: ArrayView4<T>, probs_b: ArrayView4<T>) -> Result<T> {
    consistency_loss_with_grad(probs_a, probs_b).map(|(v, _, _)| v)
}

pub fn consistency_loss_with_grad<T: Scalar>(
    probs_a: ArrayView4<T>,
    probs_b: ArrayView4<T>,
) -> Result<(T, Array4<T>, Array4<T>)> {
    if probs_a.dim() != probs_b.dim() {
        return Err(LossError::ShapeMismatch(format!(
            "{:?} vs {:?}",
            probs_a.dim(),
            probs_b.dim()
        )));
    }
    let n = probs_a.len();
    if n == 0 {
        return Ok((T::zero(), Array4::zeros(probs_a.raw_dim()), Array4::zeros(probs_b.raw_dim())));
    }
    let diff = &probs_a - &probs_b;
    let total: f64 = diff.iter().map(|&d| to_f64(d) * to_f64(d)).sum();
    let scale: T = cst(2.0 / n as f64);
    let grad_a = diff.mapv(|d| d * scale);
    let grad_b = grad_a.mapv(|g| -g);
    Ok((cst(total / n as f64), grad_a, grad_b))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisedLoss {
    pub ce_a: f64,
    pub ce_b: f64,
    pub dice_a: f64,
    pub dice_b: f64,
    pub sup_a: f64,
    pub sup_b: f64,
    pub total: f64,
}

/// `β·CE + γ·Dice` per branch, summed over both branches.
pub fn supervised_loss<T: Scalar>(
    pred: &DualPrediction<T>,
    mask: ArrayView3<u8>,
    w: &LossWeights,
) -> Result<SupervisedLoss> {
    supervised_loss_with_grad(pred.probs_a.view(), pred.probs_b.view(), mask, w).map(|r| r.0)
}

fn supervised_loss_with_grad<T: Scalar>(
    probs_a: ArrayView4<T>,
    probs_b: ArrayView4<T>,
    mask: ArrayView3<u8>,
    w: &LossWeights,
) -> Result<(SupervisedLoss, Array4<T>, Array4<T>)> {
    if mask.dim().0 == 0 || probs_a.dim().0 == 0 {
        return Err(LossError::EmptyLabeledBatch);
    }
    let (ce_a, g_ce_a) = cross_entropy_with_grad(probs_a, mask)?;
    let (ce_b, g_ce_b) = cross_entropy_with_grad(probs_b, mask)?;
    let (dice_a, g_dice_a) = dice_loss_with_grad(probs_a, mask)?;
    let (dice_b, g_dice_b) = dice_loss_with_grad(probs_b, mask)?;
    let (beta, gamma): (T, T) = (cst(w.beta), cst(w.gamma_dice));
    let grad_a = g_ce_a * beta + g_dice_a * gamma;
    let grad_b = g_ce_b * beta + g_dice_b * gamma;
    let (ce_a, ce_b, dice_a, dice_b) = (to_f64(ce_a), to_f64(ce_b), to_f64(dice_a), to_f64(dice_b));
    let sup_a = w.beta * ce_a + w.gamma_dice * dice_a;
    let sup_b = w.beta * ce_b + w.gamma_dice * dice_b;
    Ok((
        SupervisedLoss {
            ce_a,
            ce_b,
            dice_a,
            dice_b,
            sup_a,
            sup_b,
            total: sup_a + sup_b,
        },
        grad_a,
        grad_b,
    ))
}

/// `sup_total + λ·cons`.
pub fn final_loss(sup_total: f64, cons: f64, w: &LossWeights) -> Result<f64> {
    for (term, value) in [("l_sup_total", sup_total), ("l_cons", cons)] {
        if !value.is_finite() {
            return Err(LossError::NonFiniteLoss { term, value });
        }
    }
    let value = sup_total + w.lambda_cons * cons;
    if !value.is_finite() {
        return Err(LossError::NonFiniteLoss { term: "l_final", value });
    }
    Ok(value)
}

/// Full semi-supervised objective for a mixed batch whose first `n_labeled`
/// rows are labeled. Returns the report and the gradients w.r.t. both
/// branches' probabilities over the whole batch.
pub fn objective_with_grad<T: Scalar>(
    pred: &DualPrediction<T>,
    mask: ArrayView3<u8>,
    n_labeled: usize,
    w: &LossWeights,
) -> Result<(LossReport, Array4<T>, Array4<T>)> {
    let pa = pred.probs_a.view();
    let pb = pred.probs_b.view();
    if pa.dim() != pb.dim() || n_labeled > pa.dim().0 {
        return Err(LossError::ShapeMismatch(format!(
            "branches {:?} / {:?} with {n_labeled} labeled rows",
            pa.dim(),
            pb.dim()
        )));
    }
    let (sup, gsa, gsb) = supervised_loss_with_grad(
        pa.slice(s![..n_labeled, .., .., ..]),
        pb.slice(s![..n_labeled, .., .., ..]),
        mask,
        w,
    )?;
    let (cons, gca, gcb) = consistency_loss_with_grad(
        pa.slice(s![n_labeled.., .., .., ..]),
        pb.slice(s![n_labeled.., .., .., ..]),
    )?;
    let l_cons = to_f64(cons);
    let l_final = final_loss(sup.total, l_cons, w)?;
    let lambda: T = cst(w.lambda_cons);
    let mut grad_a = Array4::<T>::zeros(pa.raw_dim());
    let mut grad_b = Array4::<T>::zeros(pb.raw_dim());
    grad_a.slice_mut(s![..n_labeled, .., .., ..]).assign(&gsa);
    grad_b.slice_mut(s![..n_labeled, .., .., ..]).assign(&gsb);
    grad_a
        .slice_mut(s![n_labeled.., .., .., ..])
        .assign(&(gca * lambda));
    grad_b
        .slice_mut(s![n_labeled.., .., .., ..])
        .assign(&(gcb * lambda));
    let report = LossReport {
        l_ce_a: sup.ce_a,
        l_ce_b: sup.ce_b,
        l_dice_a: sup.dice_a,
        l_dice_b: sup.dice_b,
        l_sup_total: sup.total,
        l_cons,
        l_final,
    };
    Ok((report, grad_a, grad_b))
}
