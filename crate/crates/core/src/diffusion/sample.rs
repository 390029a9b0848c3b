use alloc::string::String;
use alloc::vec::Vec;

use super::schedule::NoiseSchedule;
use super::train::TrimesterAdapters;
use super::unet::{Denoiser, IMAGE_CHANNELS};
use super::DiffusionError;
use crate::image::{TriChannelImage, TrimesterLabel, MASK_PLANE_INDEX};
use crate::lora::INFERENCE_ALPHA;
use crate::nn::Tensor;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SamplerConfig {
    pub steps: usize,
    pub seed: u64,
    /// Adapter scale used at generation time.
    pub alpha_merge: f32,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            seed: 0,
            alpha_merge: INFERENCE_ALPHA as f32,
        }
    }
}

fn to_bytes(v: f32) -> u8 {
    libm::roundf(((v.clamp(-1.0, 1.0) + 1.0) * 127.5).clamp(0.0, 255.0)) as u8
}

/// Strided ancestral sampling. Item `i` starts from noise seeded by
/// `derive(cfg.seed, i)`, so results do not depend on the batch split.
pub fn sample_batch(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    trimesters: &[TrimesterLabel],
    cfg: &SamplerConfig,
) -> Result<Vec<TriChannelImage>, DiffusionError> {
    if model.trained_steps == 0 {
        return Err(DiffusionError::UntrainedModel);
    }
    let taus = schedule.strided_timesteps(cfg.steps)?;
    let mut net = model.clone();
    net.set_adapter_alpha(cfg.alpha_merge);
    let size = net.config.image_size;
    let per = IMAGE_CHANNELS * size * size;
    let mut out = Vec::with_capacity(trimesters.len());
    for (i, &label) in trimesters.iter().enumerate() {
        let mut r = rng::stream(rng::derive(cfg.seed, i as u64), 0x5A3B);
        let mut x = Tensor::zeros(1, IMAGE_CHANNELS, size, size);
        rng::fill_normal(&mut r, &mut x.data);
        let class = [label.index()];
        for (k, &t) in taus.iter().enumerate() {
            let s = taus.get(k + 1).copied().unwrap_or(0);
            let ab_t = schedule.alpha_bar(t)?;
            let ab_s = schedule.alpha_bar(s)?;
            let eps = net.forward(&x, &[t], &class);
            let (sa, sn) = (libm::sqrt(ab_t), libm::sqrt(1.0 - ab_t));
            // clipped estimate of the clean image
            let x0: Vec<f64> = x
                .data
                .iter()
                .zip(&eps.data)
                .map(|(&xt, &e)| ((f64::from(xt) - sn * f64::from(e)) / sa).clamp(-1.0, 1.0))
                .collect();
            if s == 0 {
                x.data.iter_mut().zip(&x0).for_each(|(v, &c)| *v = c as f32);
                break;
            }
            let beta = 1.0 - ab_t / ab_s;
            let c0 = libm::sqrt(ab_s) * beta / (1.0 - ab_t);
            let ct = libm::sqrt(1.0 - beta) * (1.0 - ab_s) / (1.0 - ab_t);
            let sigma = libm::sqrt((1.0 - ab_s) / (1.0 - ab_t) * beta);
            for (v, &c) in x.data.iter_mut().zip(&x0) {
                let z = f64::from(rng::normal_f32(&mut r));
                *v = (c0 * c + ct * f64::from(*v) + sigma * z) as f32;
            }
            if !x.is_finite() {
                return Err(DiffusionError::NonFiniteLoss { step: k, last: f64::NAN });
            }
        }
        debug_assert_eq!(x.data.len(), per);
        let planes = x.data.iter().map(|&v| to_bytes(v)).collect();
        out.push(TriChannelImage::from_raw(size, size, MASK_PLANE_INDEX, planes)?);
    }
    Ok(out)
}

/// One sample for `trimester`, seeded by `cfg.seed`.
pub fn sample(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    trimester: TrimesterLabel,
    cfg: &SamplerConfig,
) -> Result<TriChannelImage, DiffusionError> {
    Ok(sample_batch(model, schedule, &[trimester], cfg)?.remove(0))
}

/// Shared base plus one adapter set per trimester; sampling installs the
/// matching set and records which adapter served each request.
#[derive(Debug, Clone)]
pub struct AdapterRouter {
    base: Denoiser,
    sets: Vec<TrimesterAdapters>,
    audit: Vec<(TrimesterLabel, String)>,
}

impl AdapterRouter {
    pub fn new(mut base: Denoiser, sets: Vec<TrimesterAdapters>) -> Self {
        base.clear_adapters();
        Self {
            base,
            sets,
            audit: Vec::new(),
        }
    }

    pub fn base(&self) -> &Denoiser {
        &self.base
    }

    pub fn adapter_id(&self, trimester: TrimesterLabel) -> Option<&str> {
        self.sets.iter().find(|s| s.trimester == trimester).map(|s| s.adapter_id.as_str())
    }

    /// Model with the trimester's adapters attached.
    pub fn model_for(&mut self, trimester: TrimesterLabel) -> Result<Denoiser, DiffusionError> {
        let set = self
            .sets
            .iter()
            .find(|s| s.trimester == trimester)
            .ok_or(DiffusionError::EmptyTrimester(trimester))?;
        let mut m = self.base.clone();
        m.install_adapters(&set.adapters)?;
        self.audit.push((trimester, set.adapter_id.clone()));
        Ok(m)
    }

    pub fn sample_batch(
        &mut self,
        schedule: &NoiseSchedule,
        trimester: TrimesterLabel,
        count: usize,
        cfg: &SamplerConfig,
    ) -> Result<Vec<TriChannelImage>, DiffusionError> {
        let m = self.model_for(trimester)?;
        sample_batch(&m, schedule, &alloc::vec![trimester; count], cfg)
    }

    /// (requested trimester, adapter id) per routed request.
    pub fn audit(&self) -> &[(TrimesterLabel, String)] {
        &self.audit
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::unet::DenoiserConfig;
    use crate::nn::Module;

    fn model() -> Denoiser {
        let mut m = Denoiser::new(DenoiserConfig {
            image_size: 16,
            channels: alloc::vec![8, 16],
            attn_from_level: 1,
            emb_dim: 16,
            time_freqs: 8,
            groups: 4,
            classes: 3,
            seed: 2,
        })
        .unwrap();
        let mut r = rng::seeded(8);
        m.visit(&mut |p| p.value.iter_mut().for_each(|v| *v += 0.05 * rng::normal_f32(&mut r)));
        m.trained_steps = 1;
        m
    }

    #[test]
    fn untrained_model_is_refused() {
        let mut m = model();
        m.trained_steps = 0;
        let s = NoiseSchedule::desk_default();
        assert_eq!(
            sample(&m, &s, TrimesterLabel::First, &SamplerConfig::default()),
            Err(DiffusionError::UntrainedModel)
        );
    }

    #[test]
    fn deterministic_and_in_range() {
        let m = model();
        let s = NoiseSchedule::desk_default();
        let cfg = SamplerConfig { seed: 11, ..Default::default() };
        let a = sample(&m, &s, TrimesterLabel::Second, &cfg).unwrap();
        let b = sample(&m, &s, TrimesterLabel::Second, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.planes().len(), 3 * 16 * 16);
        let batch = sample_batch(&m, &s, &[TrimesterLabel::Second, TrimesterLabel::First], &cfg).unwrap();
        assert_eq!(batch[0], a);
        let full = sample(&m, &s, TrimesterLabel::Third, &SamplerConfig { steps: 1000, ..cfg }).unwrap();
        assert_eq!(full.height(), 16);
    }

    #[test]
    fn zero_adapters_match_base_sampling() {
        let m = model();
        let s = NoiseSchedule::desk_default();
        let cfg = SamplerConfig { seed: 3, ..Default::default() };
        let base = sample(&m, &s, TrimesterLabel::First, &cfg).unwrap();
        let mut adapted = m.clone();
        adapted.init_adapters(2, 5).unwrap();
        let mut zeroed = adapted.adapters();
        for a in zeroed.iter_mut() {
            a.a.as_mut_slice().iter_mut().for_each(|v| *v = 0.0);
        }
        adapted.install_adapters(&zeroed).unwrap();
        assert_eq!(sample(&adapted, &s, TrimesterLabel::First, &cfg).unwrap(), base);
    }

    #[test]
    fn router_uses_the_requested_adapter() {
        let m = model();
        let mut base = m.clone();
        let sets: Vec<TrimesterAdapters> = TrimesterLabel::ALL
            .into_iter()
            .map(|t| {
                let mut x = base.clone();
                x.init_adapters(2, t.index() as u64).unwrap();
                TrimesterAdapters {
                    trimester: t,
                    adapter_id: alloc::format!("adapter-{}", t.index() + 1),
                    adapters: x.adapters(),
                    log: Default::default(),
                    base_checksum: 0,
                }
            })
            .collect();
        let mut router = AdapterRouter::new(m, sets.clone());
        let s = NoiseSchedule::desk_default();
        let cfg = SamplerConfig { steps: 2, ..Default::default() };
        router.sample_batch(&s, TrimesterLabel::First, 1, &cfg).unwrap();
        router.sample_batch(&s, TrimesterLabel::Third, 1, &cfg).unwrap();
        assert_eq!(
            router.audit(),
            &[
                (TrimesterLabel::First, "adapter-1".into()),
                (TrimesterLabel::Third, "adapter-3".into())
            ]
        );
        let mut routed = router.model_for(TrimesterLabel::First).unwrap();
        assert_eq!(routed.adapters(), sets[0].adapters);
        base.clear_adapters();
        assert_eq!(router.base().clone().snapshot(), base.snapshot());
    }
}
