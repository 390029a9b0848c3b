//! Dice score and the CE + Dice segmentation objective.

use super::SegError;
use crate::image::BinaryMask;

/// Smoothing term in the soft Dice loss.
pub const DICE_EPS: f64 = 1e-6;
/// Probability clip used by the cross-entropy.
pub const PROB_CLIP: f64 = 1e-7;

/// Dice similarity 2|P∩G| / (|P|+|G|); 1.0 when both masks are empty.
pub fn dsc(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64, SegError> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(SegError::ShapeMismatch);
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.pixels().iter().zip(gt.pixels()) {
        p += usize::from(a);
        g += usize::from(b);
        inter += usize::from(a & b);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

fn check(pred: &[f64], gt: &[f64]) -> Result<(), SegError> {
    if pred.len() != gt.len() {
        return Err(SegError::ShapeMismatch);
    }
    Ok(())
}

/// Soft Dice loss over all elements.
pub fn dice_loss(probs: &[f64], gt: &[f64]) -> Result<f64, SegError> {
    check(probs, gt)?;
    let (mut inter, mut sp, mut sg) = (0.0, 0.0, 0.0);
    for (&p, &g) in probs.iter().zip(gt) {
        inter += p * g;
        sp += p;
        sg += g;
    }
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (sp + sg + DICE_EPS))
}

/// Mean binary cross-entropy with probabilities clipped to [1e-7, 1-1e-7].
pub fn ce_loss(probs: &[f64], gt: &[f64]) -> Result<f64, SegError> {
    check(probs, gt)?;
    if probs.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = probs
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(g * libm::log(p) + (1.0 - g) * libm::log(1.0 - p))
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamLoss {
    pub total: f64,
    pub real: f64,
    pub synthetic: f64,
}

fn arm(pred: &[f64], gt: &[f64]) -> Result<f64, SegError> {
    if pred.is_empty() && gt.is_empty() {
        return Ok(0.0);
    }
    Ok(ce_loss(pred, gt)? + dice_loss(pred, gt)?)
}

/// CE + Dice on the real arm plus CE + Dice on the synthetic arm. Either arm
/// may be empty (contributing zero) but not both.
pub fn sam_loss(pred_r: &[f64], gt_r: &[f64], pred_s: &[f64], gt_s: &[f64]) -> Result<SamLoss, SegError> {
    if pred_r.is_empty() && pred_s.is_empty() {
        return Err(SegError::BothBatchesEmpty);
    }
    let real = arm(pred_r, gt_r)?;
    let synthetic = arm(pred_s, gt_s)?;
    Ok(SamLoss {
        total: real + synthetic,
        real,
        synthetic,
    })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + libm::exp(-z))
    } else {
        let e = libm::exp(z);
        e / (1.0 + e)
    }
}

/// CE + Dice of one arm evaluated on logits, with the gradient of that loss
/// with respect to every logit written into `grad` (accumulated, not assigned).
pub fn arm_loss_and_grad(logits: &[f32], gt: &[f32], grad: &mut [f32]) -> f64 {
    debug_assert_eq!(logits.len(), gt.len());
    let n = logits.len();
    if n == 0 {
        return 0.0;
    }
    let probs: alloc::vec::Vec<f64> = logits.iter().map(|&z| sigmoid(f64::from(z))).collect();
    let (mut inter, mut s) = (0.0, 0.0);
    let mut ce = 0.0;
    for (&p, &g) in probs.iter().zip(gt) {
        let g = f64::from(g);
        inter += p * g;
        s += p + g;
        let pc = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
        ce -= g * libm::log(pc) + (1.0 - g) * libm::log(1.0 - pc);
    }
    let ce = ce / n as f64;
    let num = 2.0 * inter + DICE_EPS;
    let den = s + DICE_EPS;
    let dice = 1.0 - num / den;
    for ((gr, &p), &g) in grad.iter_mut().zip(&probs).zip(gt) {
        let g = f64::from(g);
        let d_dice_dp = -(2.0 * g * den - num) / (den * den);
        let d = (p - g) / n as f64 + d_dice_dp * p * (1.0 - p);
        *gr += d as f32;
    }
    ce + dice
}
