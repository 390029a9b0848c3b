//! Decoder-only fine-tuning with the two-arm CE + Dice objective.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::metrics::{arm_loss_and_grad, dsc};
use super::model::{ImageFeatures, SegModel};
use super::prompt::{perturb_box, BoxPrompt, DEFAULT_Q_MAX};
use super::SegError;
use crate::image::AnnotatedPair;
use crate::nn::optim::Adam;
use crate::nn::{Module, Tensor};
use crate::rng;

/// Box seeds for validation and test items depend only on the item index,
/// so every arm of an experiment is scored against the same prompts.
pub const EVAL_BOX_SEED: u64 = 0xE7A1_B0C5;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub validate_every_epoch: bool,
    pub q_max: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 5,
            learning_rate: 1e-5,
            weight_decay: 0.0,
            seed: 0,
            validate_every_epoch: true,
            q_max: DEFAULT_Q_MAX,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SegError> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(SegError::BadConfig("epochs and batch size must be positive"));
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return Err(SegError::BadConfig("learning rate and weight decay must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-batch total loss.
    pub train_loss: f64,
    pub real_loss: f64,
    pub synthetic_loss: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct FineTuneOutcome {
    /// Weights from the epoch with the best validation DSC.
    pub best: SegModel,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub history: Vec<EpochRecord>,
    pub steps: u64,
    pub encoder_checksum: u64,
    pub prompt_checksum: u64,
}

/// Per-step augmentation hook: `(pair, seed) -> pair`.
pub type AugmentFn<'a> = &'a dyn Fn(&AnnotatedPair, u64) -> AnnotatedPair;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub per_item: Vec<f64>,
    pub mean: f64,
}

pub fn eval_box(pair: &AnnotatedPair, index: usize, q_max: u32) -> Result<BoxPrompt, SegError> {
    perturb_box(&pair.mask, q_max, rng::derive(EVAL_BOX_SEED, index as u64))
}

/// Mean DSC over `pairs`, each prompted with its fixed evaluation box.
pub fn evaluate(model: &SegModel, pairs: &[AnnotatedPair], q_max: u32) -> Result<EvalReport, SegError> {
    let feats = pairs.iter().map(|p| model.encode(&p.image)).collect::<Result<Vec<_>, _>>()?;
    evaluate_cached(model, pairs, &feats, q_max)
}

fn evaluate_cached(
    model: &SegModel,
    pairs: &[AnnotatedPair],
    feats: &[ImageFeatures],
    q_max: u32,
) -> Result<EvalReport, SegError> {
    if pairs.is_empty() {
        return Err(SegError::EmptyDataset);
    }
    let mut per_item = Vec::with_capacity(pairs.len());
    for (i, (p, f)) in pairs.iter().zip(feats).enumerate() {
        let pred = model.predict_features(f, &eval_box(p, i, q_max)?)?;
        per_item.push(dsc(&pred.mask, &p.mask)?);
    }
    let mean = per_item.iter().sum::<f64>() / per_item.len() as f64;
    Ok(EvalReport { per_item, mean })
}

/// Fine-tune the decoder on `train`, validating every epoch and keeping the
/// best-scoring weights. Real and synthetic items in a batch form the two
/// loss arms. With `augment`, each draw is transformed on the fly with a seed
/// derived from (cfg.seed, epoch, position).
pub fn fine_tune(
    model: &SegModel,
    train: &[AnnotatedPair],
    val: &[AnnotatedPair],
    cfg: &TrainConfig,
    augment: Option<AugmentFn<'_>>,
) -> Result<FineTuneOutcome, SegError> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(SegError::EmptyDataset);
    }
    let mut net = model.clone();
    let (h, w) = (train[0].height(), train[0].width());
    if train.iter().chain(val).any(|p| p.height() != h || p.width() != w) {
        return Err(SegError::ShapeMismatch);
    }
    // the encoder is frozen, so un-augmented features never change
    let cached: Option<Vec<ImageFeatures>> = match augment {
        None => Some(train.iter().map(|p| net.encode(&p.image)).collect::<Result<_, _>>()?),
        Some(_) => None,
    };
    let val_feats = val.iter().map(|p| net.encode(&p.image)).collect::<Result<Vec<_>, _>>()?;

    let mut opt = Adam::new(cfg.learning_rate, cfg.weight_decay);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, 0x5E6);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, SegModel)> = None;
    let hw = h * w;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let epoch_seed = rng::derive(cfg.seed, epoch as u64);
        let (mut sum, mut sum_r, mut sum_s, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut owned: Vec<ImageFeatures> = Vec::new();
            let mut kept: Vec<usize> = Vec::with_capacity(batch.len());
            let mut masks: Vec<Vec<f32>> = Vec::with_capacity(batch.len());
            let mut boxes = Vec::with_capacity(batch.len());
            let mut synthetic = Vec::with_capacity(batch.len());
            for (k, &idx) in batch.iter().enumerate() {
                let draw_seed = rng::derive(epoch_seed, (bi * cfg.batch_size + k) as u64);
                let pair = match augment {
                    Some(f) => f(&train[idx], draw_seed),
                    None => train[idx].clone(),
                };
                // an augmentation can push the structure out of frame
                if pair.mask.is_empty() {
                    continue;
                }
                if augment.is_some() {
                    owned.push(net.encode(&pair.image)?);
                }
                kept.push(idx);
                boxes.push(perturb_box(&pair.mask, cfg.q_max, rng::derive(draw_seed, 0xB0))?);
                masks.push(pair.mask.to_unit());
                synthetic.push(pair.provenance.is_synthetic());
            }
            if boxes.is_empty() {
                continue;
            }
            let feats: Vec<&ImageFeatures> = match &cached {
                Some(c) => kept.iter().map(|&i| &c[i]).collect(),
                None => owned.iter().collect(),
            };
            net.zero_grad();
            let logits = net.forward_train(&feats, &boxes)?;
            let mut grad = Tensor::zeros_like(&logits);
            let (mut real_l, mut syn_l) = (0.0, 0.0);
            for arm in [false, true] {
                let idx: Vec<usize> = (0..boxes.len()).filter(|&i| synthetic[i] == arm).collect();
                if idx.is_empty() {
                    continue;
                }
                let mut z = Vec::with_capacity(idx.len() * hw);
                let mut g = Vec::with_capacity(idx.len() * hw);
                for &i in &idx {
                    z.extend_from_slice(logits.item(i));
                    g.extend_from_slice(&masks[i]);
                }
                let mut dz = vec![0.0f32; z.len()];
                let l = arm_loss_and_grad(&z, &g, &mut dz);
                for (j, &i) in idx.iter().enumerate() {
                    grad.item_mut(i).copy_from_slice(&dz[j * hw..(j + 1) * hw]);
                }
                if arm {
                    syn_l = l;
                } else {
                    real_l = l;
                }
            }
            let loss = real_l + syn_l;
            if !loss.is_finite() {
                return Err(SegError::NonFiniteLoss(epoch));
            }
            net.backward(&grad);
            opt.step(&mut net);
            sum += loss;
            sum_r += real_l;
            sum_s += syn_l;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let val_dsc = if cfg.validate_every_epoch || epoch + 1 == cfg.epochs {
            Some(evaluate_cached(&net, val, &val_feats, cfg.q_max)?.mean)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            train_loss: sum / nb,
            real_loss: sum_r / nb,
            synthetic_loss: sum_s / nb,
            val_dsc,
        });
        if let Some(v) = val_dsc {
            if best.as_ref().is_none_or(|(_, b, _)| v > *b) {
                best = Some((epoch, v, net.clone()));
            }
        }
    }
    let (best_epoch, best_val_dsc, best) = best.expect("final epoch is always validated");
    Ok(FineTuneOutcome {
        encoder_checksum: best.encoder_checksum(),
        prompt_checksum: best.prompt_checksum(),
        best,
        best_epoch,
        best_val_dsc,
        history,
        steps: opt.steps(),
    })
}
