//! Generation side of the pipeline: train the denoiser on tri-channel pairs,
//! sample per trimester, extract ellipse masks, route through the review gate.

use maskdiff_core::diffusion::{
    sample_batch, train_denoiser, Denoiser, DenoiserConfig, DiffusionError, DiffusionTrainConfig, NoiseSchedule,
    SamplerConfig, TrainLog, TrainMode,
};
use maskdiff_core::extraction::{extract, ExtractionStatus, QualityGate};
use maskdiff_core::image::{compose_tri_channel, decompose_tri_channel};
use maskdiff_core::{AnnotatedPair, TriChannelImage, TrimesterLabel};
use serde::{Deserialize, Serialize};

use crate::review::Submission;

/// Model, schedule and trainer settings for from-scratch training at desk scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionPreset {
    pub model: DenoiserConfig,
    pub train: DiffusionTrainConfig,
    /// Length T of the linear β schedule (1e-4 → 0.02).
    pub timesteps: usize,
}

impl Default for DiffusionPreset {
    fn default() -> Self {
        Self::desk(64)
    }
}

pub const DESK_TIMESTEPS: usize = 1000;

impl DiffusionPreset {
    pub fn desk(image_size: usize) -> Self {
        Self {
            model: DenoiserConfig {
                image_size,
                channels: vec![8, 16, 32, 64],
                attn_from_level: 2,
                groups: 4,
                ..DenoiserConfig::default()
            },
            train: DiffusionTrainConfig {
                mode: TrainMode::FromScratch,
                epochs: 900,
                batch_size: 8,
                learning_rate: 1e-3,
                lora_rank: 8,
                seed: 0,
                grad_clip: Some(1.0),
                hflip: true,
                ema_decay: Some(0.998),
            },
            timesteps: DESK_TIMESTEPS,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, DiffusionError> {
        NoiseSchedule::linear(self.timesteps, 1e-4, 0.02)
    }
}

pub fn tri_dataset(pairs: &[AnnotatedPair]) -> Vec<(TriChannelImage, TrimesterLabel)> {
    pairs
        .iter()
        .map(|p| (compose_tri_channel(&p.image, &p.mask).expect("pairs are validated"), p.trimester))
        .collect()
}

/// Train a fresh denoiser from the preset.
pub fn train_base(
    pairs: &[AnnotatedPair],
    preset: &DiffusionPreset,
) -> Result<(Denoiser, NoiseSchedule, TrainLog), DiffusionError> {
    let schedule = preset.schedule()?;
    let mut model = Denoiser::new(preset.model.clone())?;
    let log = train_denoiser(&mut model, &tri_dataset(pairs), &schedule, &preset.train)?;
    Ok((model, schedule, log))
}

/// `(id, trimester, sample)`; ids are `syn-<trimester>-<seed>-<index>`.
pub fn generate(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    trimester: TrimesterLabel,
    count: usize,
    sampler: &SamplerConfig,
) -> Result<Vec<(String, TrimesterLabel, TriChannelImage)>, DiffusionError> {
    let out = sample_batch(model, schedule, &vec![trimester; count], sampler)?;
    Ok(out
        .into_iter()
        .enumerate()
        .map(|(i, tri)| (format!("syn-{trimester}-{:x}-{i:05}", sampler.seed), trimester, tri))
        .collect())
}

pub fn extract_all(samples: &[(String, TrimesterLabel, TriChannelImage)], gate: &QualityGate) -> Vec<Submission> {
    samples
        .iter()
        .map(|(id, t, tri)| Submission {
            id: id.clone(),
            trimester: *t,
            image: decompose_tri_channel(tri).0,
            extraction: extract(tri, gate),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateCounts {
    pub accepted_auto: usize,
    pub needs_review: usize,
    pub rejected_auto: usize,
}

impl GateCounts {
    pub fn of(subs: &[Submission]) -> Self {
        let mut c = Self::default();
        for s in subs {
            match s.extraction.status {
                ExtractionStatus::AcceptedAuto => c.accepted_auto += 1,
                ExtractionStatus::NeedsReview => c.needs_review += 1,
                ExtractionStatus::RejectedAuto => c.rejected_auto += 1,
            }
        }
        c
    }

    pub fn total(&self) -> usize {
        self.accepted_auto + self.needs_review + self.rejected_auto
    }

    pub fn pass_rate(&self) -> f64 {
        self.accepted_auto as f64 / self.total().max(1) as f64
    }
}

/// Curated pairs straight from the gate (no human step): accepted_auto only.
pub fn auto_curated(subs: &[Submission]) -> Vec<AnnotatedPair> {
    subs.iter()
        .filter(|s| s.extraction.status == ExtractionStatus::AcceptedAuto)
        .map(|s| {
            AnnotatedPair::new(
                s.id.clone(),
                s.image.clone(),
                s.extraction.filled.clone().expect("accepted results carry a mask"),
                s.trimester,
                maskdiff_core::Provenance::SyntheticCurated,
            )
            .expect("same shape")
        })
        .collect()
}
