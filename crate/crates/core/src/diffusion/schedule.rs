use alloc::vec::Vec;

use super::DiffusionError;

/// Variance schedule. Timesteps are 1-based: `betas[t-1]` is β_t and
/// `alphas_cum[t-1]` is ᾱ_t = ∏_{s≤t}(1−β_s).
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas_cum: Vec<f64>,
}

impl NoiseSchedule {
    /// Linearly spaced betas from `beta_1` to `beta_t`.
    pub fn linear(t: usize, beta_1: f64, beta_t: f64) -> Result<Self, DiffusionError> {
        if t == 0 {
            return Err(DiffusionError::BadSchedule("T must be at least 1"));
        }
        if !(0.0 < beta_1 && beta_1 <= beta_t && beta_t < 1.0) {
            return Err(DiffusionError::BadSchedule("need 0 < beta_1 <= beta_T < 1"));
        }
        let betas = (0..t)
            .map(|i| {
                if t == 1 {
                    beta_1
                } else {
                    beta_1 + (beta_t - beta_1) * i as f64 / (t - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self, DiffusionError> {
        if betas.is_empty() || betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(DiffusionError::BadSchedule("betas must lie in (0,1)"));
        }
        if betas.windows(2).any(|w| w[1] < w[0]) {
            return Err(DiffusionError::BadSchedule("betas must be non-decreasing"));
        }
        let mut acc = 1.0;
        let alphas_cum = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { betas, alphas_cum })
    }

    /// The desk-scale default: T = 1000, β from 1e-4 to 0.02. Shorter
    /// schedules leave visible signal at t = T (ᾱ_400 ≈ 0.018) while sampling
    /// starts from pure noise.
    pub fn desk_default() -> Self {
        Self::linear(1000, 1e-4, 0.02).expect("valid constants")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// ᾱ_t for t in 0..=T, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, DiffusionError> {
        match t {
            0 => Ok(1.0),
            t if t <= self.steps() => Ok(self.alphas_cum[t - 1]),
            t => Err(DiffusionError::BadTimestep { t, max: self.steps() }),
        }
    }

    /// `steps` timesteps spaced uniformly from T down to 1.
    pub fn strided_timesteps(&self, steps: usize) -> Result<Vec<usize>, DiffusionError> {
        let t = self.steps();
        if steps == 0 || steps > t {
            return Err(DiffusionError::BadSampler("steps must be in 1..=T"));
        }
        if steps == 1 {
            return Ok(alloc::vec![t]);
        }
        let mut out: Vec<usize> = (0..steps)
            .map(|i| {
                let f = (t - 1) as f64 * (steps - 1 - i) as f64 / (steps - 1) as f64;
                1 + libm::round(f) as usize
            })
            .collect();
        out.dedup();
        Ok(out)
    }
}

/// `x_t = √ᾱ·x0 + √(1−ᾱ)·eps` for an explicit ᾱ.
pub fn diffuse_with(alpha_bar: f64, x0: &[f32], eps: &[f32], out: &mut [f32]) {
    let (s, n) = (libm::sqrt(alpha_bar) as f32, libm::sqrt(1.0 - alpha_bar) as f32);
    for ((o, &x), &e) in out.iter_mut().zip(x0).zip(eps) {
        *o = s * x + n * e;
    }
}

/// Forward noising to timestep `t` (1 ≤ t ≤ T).
pub fn forward_diffuse(
    x0: &[f32],
    t: usize,
    eps: &[f32],
    schedule: &NoiseSchedule,
) -> Result<Vec<f32>, DiffusionError> {
    if t == 0 || t > schedule.steps() {
        return Err(DiffusionError::BadTimestep { t, max: schedule.steps() });
    }
    if x0.len() != eps.len() {
        return Err(DiffusionError::ShapeMismatch);
    }
    let mut out = alloc::vec![0.0; x0.len()];
    diffuse_with(schedule.alpha_bar(t)?, x0, eps, &mut out);
    Ok(out)
}
