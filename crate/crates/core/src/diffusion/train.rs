use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;

use super::schedule::{diffuse_with, NoiseSchedule};
use super::unet::{Denoiser, IMAGE_CHANNELS};
use super::DiffusionError;
use crate::image::{TriChannelImage, TrimesterLabel};
use crate::lora::LoraAdapter;
use crate::nn::optim::Adam;
use crate::nn::{Module, ParamKind, Tensor};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TrainMode {
    FromScratch,
    LoraFinetune,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DiffusionTrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    /// Constant learning rate.
    pub learning_rate: f64,
    pub lora_rank: usize,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    /// Randomly mirror training images left/right.
    pub hflip: bool,
    /// Keep an exponential moving average of the trainable weights and load
    /// it into the model when training ends.
    pub ema_decay: Option<f64>,
}

impl Default for DiffusionTrainConfig {
    /// The published LoRA fine-tuning settings.
    fn default() -> Self {
        Self {
            mode: TrainMode::LoraFinetune,
            epochs: 1,
            batch_size: 4,
            learning_rate: 1e-4,
            lora_rank: 128,
            seed: 0,
            grad_clip: Some(1.0),
            hflip: false,
            ema_decay: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainLog {
    /// Mean-squared noise error per optimizer step.
    pub losses: Vec<f64>,
    pub trainable_params: usize,
}

impl TrainLog {
    /// Mean of the first or last `k` logged losses.
    pub fn head_mean(&self, k: usize) -> f64 {
        mean(&self.losses[..k.min(self.losses.len())])
    }

    pub fn tail_mean(&self, k: usize) -> f64 {
        mean(&self.losses[self.losses.len().saturating_sub(k)..])
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Tri-channel bytes scaled to [−1, 1].
pub fn to_signed_unit(tri: &TriChannelImage) -> Vec<f32> {
    tri.planes().iter().map(|&v| f32::from(v) / 127.5 - 1.0).collect()
}

fn hflip_planes(v: &mut [f32], w: usize) {
    for row in v.chunks_mut(w) {
        row.reverse();
    }
}

/// Fit the denoiser to predict the injected noise (MSE).
///
/// In [`TrainMode::LoraFinetune`] every base parameter is frozen; adapters are
/// created with `cfg.lora_rank` if the model has none yet.
pub fn train_denoiser(
    model: &mut Denoiser,
    data: &[(TriChannelImage, TrimesterLabel)],
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<TrainLog, DiffusionError> {
    if data.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(DiffusionError::BadConfig("batch size must be positive"));
    }
    let size = model.config.image_size;
    if data.iter().any(|(x, _)| x.height() != size || x.width() != size) {
        return Err(DiffusionError::ShapeMismatch);
    }
    match cfg.mode {
        TrainMode::FromScratch => model.set_frozen(ParamKind::Base, false),
        TrainMode::LoraFinetune => {
            if !model.has_adapters() {
                model.init_adapters(cfg.lora_rank, rng::derive(cfg.seed, 0xADA))?;
            }
            model.set_frozen(ParamKind::Base, true);
            model.set_frozen(ParamKind::Adapter, false);
        }
    }
    let inputs: Vec<Vec<f32>> = data.iter().map(|(x, _)| to_signed_unit(x)).collect();
    let per = IMAGE_CHANNELS * size * size;
    let mut log = TrainLog {
        losses: Vec::new(),
        trainable_params: model.trainable_count(),
    };
    let mut opt = Adam::new(cfg.learning_rate, 0.0);
    let mut r = rng::stream(cfg.seed, 0xD1FF);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let t_max = schedule.steps();
    let mut ema: Option<Vec<Vec<f32>>> = cfg.ema_decay.map(|_| trainable_values(model));
    for _epoch in 0..cfg.epochs {
        order.shuffle(&mut r);
        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len();
            let mut x0 = vec![0.0f32; n * per];
            let mut eps = vec![0.0f32; n * per];
            let mut xt = Tensor::zeros(n, IMAGE_CHANNELS, size, size);
            let mut ts = Vec::with_capacity(n);
            let mut classes = Vec::with_capacity(n);
            for (i, &idx) in batch.iter().enumerate() {
                let dst = &mut x0[i * per..(i + 1) * per];
                dst.copy_from_slice(&inputs[idx]);
                if cfg.hflip && r.random_bool(0.5) {
                    hflip_planes(dst, size);
                }
                let t = r.random_range(1..=t_max);
                rng::fill_normal(&mut r, &mut eps[i * per..(i + 1) * per]);
                diffuse_with(schedule.alpha_bar(t)?, dst, &eps[i * per..(i + 1) * per], xt.item_mut(i));
                ts.push(t);
                classes.push(data[idx].1.index());
            }
            model.zero_grad();
            let pred = model.forward(&xt, &ts, &classes);
            let total = pred.data.len() as f64;
            let mut loss = 0.0f64;
            let mut g = Tensor::zeros_like(&pred);
            for ((gv, &p), &e) in g.data.iter_mut().zip(&pred.data).zip(&eps) {
                let d = p - e;
                loss += f64::from(d) * f64::from(d);
                *gv = (2.0 * f64::from(d) / total) as f32;
            }
            loss /= total;
            if !loss.is_finite() {
                return Err(DiffusionError::NonFiniteLoss {
                    step: log.losses.len(),
                    last: log.losses.last().copied().unwrap_or(f64::NAN),
                });
            }
            model.backward(&g);
            if let Some(c) = cfg.grad_clip {
                model.clip_grad_norm(c);
            }
            opt.step(model);
            model.trained_steps += 1;
            log.losses.push(loss);
            if let (Some(shadow), Some(d)) = (ema.as_mut(), cfg.ema_decay) {
                // short warm-up so early weights do not dominate
                let n = log.losses.len() as f64;
                let d = d.min((1.0 + n) / (10.0 + n)) as f32;
                let mut k = 0;
                model.visit(&mut |p| {
                    if p.trainable() {
                        shadow[k].iter_mut().zip(p.value.iter()).for_each(|(s, &v)| *s = d * *s + (1.0 - d) * v);
                        k += 1;
                    }
                });
            }
        }
    }
    if let Some(shadow) = ema {
        let mut k = 0;
        model.visit(&mut |p| {
            if p.trainable() {
                p.value.copy_from_slice(&shadow[k]);
                k += 1;
            }
        });
    }
    Ok(log)
}

fn trainable_values(model: &mut Denoiser) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    model.visit(&mut |p| {
        if p.trainable() {
            out.push(p.value.to_vec());
        }
    });
    out
}

/// One trimester's adapters over the shared base.
#[derive(Debug, Clone, PartialEq)]
pub struct TrimesterAdapters {
    pub trimester: TrimesterLabel,
    /// Identifier recorded in the routing audit log.
    pub adapter_id: String,
    pub adapters: Vec<LoraAdapter<f32>>,
    pub log: TrainLog,
    /// Base checksum observed after this trimester's fine-tune.
    pub base_checksum: u64,
}

/// Fine-tune three independent adapter sets, one per trimester, from the same base.
pub fn train_per_trimester(
    base: &Denoiser,
    datasets: [&[TriChannelImage]; 3],
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<[TrimesterAdapters; 3], DiffusionError> {
    for (label, d) in TrimesterLabel::ALL.iter().zip(datasets) {
        if d.is_empty() {
            return Err(DiffusionError::EmptyTrimester(*label));
        }
    }
    let cfg = DiffusionTrainConfig {
        mode: TrainMode::LoraFinetune,
        ..cfg.clone()
    };
    let mut out = Vec::with_capacity(3);
    for (label, d) in TrimesterLabel::ALL.into_iter().zip(datasets) {
        let mut model = base.clone();
        model.clear_adapters();
        let tagged: Vec<(TriChannelImage, TrimesterLabel)> = d.iter().map(|x| (x.clone(), label)).collect();
        let sub = DiffusionTrainConfig {
            seed: rng::derive(cfg.seed, label.index() as u64 + 1),
            ..cfg.clone()
        };
        let log = train_denoiser(&mut model, &tagged, schedule, &sub)?;
        out.push(TrimesterAdapters {
            trimester: label,
            adapter_id: format!("lora-{}-{:016x}", label.as_str(), sub.seed),
            adapters: model.adapters(),
            log,
            base_checksum: model.checksum(ParamKind::Base),
        });
    }
    Ok(out.try_into().expect("three trimesters"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::unet::DenoiserConfig;
    use crate::image::compose_tri_channel;
    use crate::phantom::{generate_phantom, PhantomSpec};

    fn tiny_model() -> Denoiser {
        let mut m = Denoiser::new(DenoiserConfig {
            image_size: 16,
            channels: alloc::vec![8, 16],
            attn_from_level: 1,
            emb_dim: 16,
            time_freqs: 8,
            groups: 4,
            classes: 3,
            seed: 1,
        })
        .unwrap();
        // stand-in for a pretrained base: zero-initialised outputs would block all gradients
        let mut r = rng::seeded(8);
        m.visit(&mut |p| p.value.iter_mut().for_each(|v| *v += 0.05 * rng::normal_f32(&mut r)));
        m
    }

    fn phantoms(n: usize, label: TrimesterLabel) -> Vec<TriChannelImage> {
        (0..n)
            .map(|i| {
                let p = generate_phantom(&PhantomSpec::random(label, 16, 40 + i as u64)).unwrap();
                compose_tri_channel(&p.image, &p.mask).unwrap()
            })
            .collect()
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let s = NoiseSchedule::desk_default();
        let mut m = tiny_model();
        assert_eq!(
            train_denoiser(&mut m, &[], &s, &DiffusionTrainConfig::default()),
            Err(DiffusionError::EmptyDataset)
        );
        let some = phantoms(1, TrimesterLabel::First);
        assert_eq!(
            train_per_trimester(&m, [&some, &[], &some], &s, &DiffusionTrainConfig::default()).unwrap_err(),
            DiffusionError::EmptyTrimester(TrimesterLabel::Second)
        );
    }

    #[test]
    fn lora_mode_keeps_base_bit_identical() {
        let s = NoiseSchedule::desk_default();
        let mut m = tiny_model();
        let before = m.checksum(ParamKind::Base);
        let snapshot = m.snapshot();
        let data: Vec<_> = phantoms(4, TrimesterLabel::Third).into_iter().map(|x| (x, TrimesterLabel::Third)).collect();
        let cfg = DiffusionTrainConfig {
            epochs: 3,
            lora_rank: 2,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let log = train_denoiser(&mut m, &data, &s, &cfg).unwrap();
        assert_eq!(log.losses.len(), 3);
        assert_eq!(m.checksum(ParamKind::Base), before);
        let slots = m.adapter_slots();
        assert_eq!(log.trainable_params, slots / 6 * (4 * 2 * 32 + 2 * 2 * 48));
        // adapters moved, base snapshot unchanged in every base slot
        assert!(m.adapters().iter().any(|a| !a.b.is_zero()));
        let mut m2 = m.clone();
        m2.clear_adapters();
        assert_eq!(m2.snapshot(), snapshot);
    }

    #[test]
    fn training_is_deterministic() {
        let s = NoiseSchedule::desk_default();
        let data: Vec<_> = phantoms(3, TrimesterLabel::First).into_iter().map(|x| (x, TrimesterLabel::First)).collect();
        let cfg = DiffusionTrainConfig {
            mode: TrainMode::FromScratch,
            epochs: 2,
            batch_size: 2,
            learning_rate: 1e-3,
            seed: 4,
            hflip: true,
            ..Default::default()
        };
        let (mut a, mut b) = (tiny_model(), tiny_model());
        let la = train_denoiser(&mut a, &data, &s, &cfg).unwrap();
        let lb = train_denoiser(&mut b, &data, &s, &cfg).unwrap();
        assert_eq!(la, lb);
        assert_eq!(a.snapshot(), b.snapshot());
        assert_eq!(a.trained_steps, 4);
    }

    #[test]
    fn ema_only_changes_the_final_weights() {
        let s = NoiseSchedule::desk_default();
        let data: Vec<_> = phantoms(4, TrimesterLabel::Second).into_iter().map(|x| (x, TrimesterLabel::Second)).collect();
        let cfg = DiffusionTrainConfig {
            mode: TrainMode::FromScratch,
            epochs: 3,
            batch_size: 2,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let run = |ema_decay| {
            let mut m = tiny_model();
            let log = train_denoiser(&mut m, &data, &s, &DiffusionTrainConfig { ema_decay, ..cfg.clone() }).unwrap();
            (log, m.snapshot())
        };
        let (plain_log, plain) = run(None);
        // decay 0 keeps only the latest weights
        let (log0, w0) = run(Some(0.0));
        assert_eq!(log0, plain_log);
        assert_eq!(w0, plain);
        let (log9, w9) = run(Some(0.9));
        assert_eq!(log9.losses, plain_log.losses);
        assert_ne!(w9, plain);
    }

    #[test]
    fn per_trimester_adapters_share_the_base() {
        let s = NoiseSchedule::desk_default();
        let base = tiny_model();
        let sets = [
            phantoms(2, TrimesterLabel::First),
            phantoms(2, TrimesterLabel::Second),
            phantoms(2, TrimesterLabel::Third),
        ];
        let cfg = DiffusionTrainConfig {
            lora_rank: 2,
            learning_rate: 1e-2,
            ..Default::default()
        };
        let out = train_per_trimester(&base, [&sets[0], &sets[1], &sets[2]], &s, &cfg).unwrap();
        let expected = base.clone().checksum(ParamKind::Base);
        for (o, label) in out.iter().zip(TrimesterLabel::ALL) {
            assert_eq!(o.trimester, label);
            assert_eq!(o.base_checksum, expected);
            assert!(o.adapter_id.contains(label.as_str()));
        }
        assert_ne!(out[0].adapters, out[1].adapters);
    }
}
