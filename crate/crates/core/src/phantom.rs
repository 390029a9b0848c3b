//! Procedural stand-in for fetal head ultrasound: a speckled background with a
//! bright elliptical skull band, paired with the filled ellipse as mask.

use alloc::format;
use alloc::vec;

use core::f64::consts::PI;
use rand::Rng as _;

use crate::ellipse::{rasterize_band, rasterize_filled_ellipse, EllipseParams};
use crate::image::{AnnotatedPair, BinaryMask, GrayImage, ImageError, Provenance, TrimesterLabel};
use crate::rng;

const BAND_LEVEL: f64 = 225.0;
const INTERIOR_GAIN: f64 = 0.6;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    pub ellipse: EllipseParams,
    /// Multiplicative speckle half-width `s`: noise is uniform in [1-s, 1+s].
    pub speckle_intensity: f64,
    pub band_thickness: f64,
    pub background_level: f64,
    pub trimester: TrimesterLabel,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PhantomError {
    #[error("ellipse plus band does not fit inside the image")]
    EllipseOutOfBounds,
    #[error("invalid phantom parameter: {0}")]
    BadParameter(&'static str),
    #[error(transparent)]
    Image(#[from] ImageError),
}

impl PhantomSpec {
    /// Random spec whose head size grows with the trimester.
    pub fn random(trimester: TrimesterLabel, size: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, 0xFA57);
        let s = size as f64;
        let (lo, hi) = match trimester {
            TrimesterLabel::First => (0.16, 0.22),
            TrimesterLabel::Second => (0.22, 0.30),
            TrimesterLabel::Third => (0.30, 0.36),
        };
        let a = s * r.random_range(lo..hi);
        let b = a * r.random_range(0.72..0.92);
        let theta = r.random_range(0.0..PI);
        let band_thickness = (s / 32.0).max(2.0);
        let mut ellipse = EllipseParams::canonical(s / 2.0, s / 2.0, a, b, theta);
        let (hx, hy) = ellipse.half_extents();
        let pad = band_thickness / 2.0 + 1.0;
        let slack_x = (s / 2.0 - 1.0 - hx - pad).clamp(0.0, s / 16.0);
        let slack_y = (s / 2.0 - 1.0 - hy - pad).clamp(0.0, s / 16.0);
        if slack_x > 0.0 {
            ellipse.cx += r.random_range(-slack_x..slack_x);
        }
        if slack_y > 0.0 {
            ellipse.cy += r.random_range(-slack_y..slack_y);
        }
        Self {
            height: size,
            width: size,
            ellipse,
            speckle_intensity: r.random_range(0.3..0.5),
            band_thickness,
            background_level: r.random_range(50.0..80.0),
            trimester,
            seed: rng::derive(seed, 0x5EED),
        }
    }

    pub fn validate(&self) -> Result<(), PhantomError> {
        if !(self.band_thickness >= 1.0) {
            return Err(PhantomError::BadParameter("band_thickness must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.speckle_intensity) {
            return Err(PhantomError::BadParameter("speckle_intensity must be in [0,1]"));
        }
        if !(0.0..=255.0).contains(&self.background_level) {
            return Err(PhantomError::BadParameter("background_level must be in [0,255]"));
        }
        if self.ellipse.validate().is_err() {
            return Err(PhantomError::BadParameter("ellipse axes"));
        }
        let outer = self.ellipse.offset(self.band_thickness / 2.0);
        let (hx, hy) = outer.half_extents();
        let fits = outer.cx - hx >= 0.0
            && outer.cy - hy >= 0.0
            && outer.cx + hx <= self.width as f64 - 1.0
            && outer.cy + hy <= self.height as f64 - 1.0;
        if fits {
            Ok(())
        } else {
            Err(PhantomError::EllipseOutOfBounds)
        }
    }
}

/// Render a phantom pair. A pure function of the spec.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<AnnotatedPair, PhantomError> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut r = rng::stream(spec.seed, 0xBEEF);
    let s = spec.speckle_intensity;
    let raw: vec::Vec<f64> = (0..h * w).map(|_| 1.0 + s * r.random_range(-1.0..=1.0)).collect();
    let noise = box3(&raw, h, w);
    let band = rasterize_band(&spec.ellipse, spec.band_thickness, h, w);
    let mask = rasterize_filled_ellipse(&spec.ellipse, h, w);
    let mut pixels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let base = if band.get(x, y) {
                BAND_LEVEL
            } else if mask.get(x, y) {
                spec.background_level * INTERIOR_GAIN
            } else {
                spec.background_level
            };
            pixels[i] = libm::round((base * noise[i]).clamp(0.0, 255.0)) as u8;
        }
    }
    let image = GrayImage::new(h, w, pixels)?;
    Ok(AnnotatedPair::new(
        format!("phantom_{:016x}", spec.seed),
        image,
        mask,
        spec.trimester,
        Provenance::Real,
    )?)
}

fn box3(v: &[f64], h: usize, w: usize) -> vec::Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut n) = (0.0, 0.0);
            for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    acc += v[yy * w + xx];
                    n += 1.0;
                }
            }
            out[y * w + x] = acc / n;
        }
    }
    out
}

/// Band pixels of a phantom (for tests and diagnostics).
pub fn band_mask(spec: &PhantomSpec) -> BinaryMask {
    rasterize_band(&spec.ellipse, spec.band_thickness, spec.height, spec.width)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segmentor::metrics::dsc;

    #[test]
    fn deterministic() {
        let spec = PhantomSpec::random(TrimesterLabel::Second, 64, 77);
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a, b);
        let other = generate_phantom(&PhantomSpec::random(TrimesterLabel::Second, 64, 78)).unwrap();
        assert_ne!(a.image, other.image);
    }

    #[test]
    fn band_brighter_than_background() {
        for seed in 0..20 {
            for t in TrimesterLabel::ALL {
                for size in [64, 128] {
                    let spec = PhantomSpec::random(t, size, seed);
                    let pair = generate_phantom(&spec).unwrap();
                    let band = band_mask(&spec);
                    let (mut bs, mut bn, mut os, mut on) = (0.0, 0.0, 0.0, 0.0);
                    for (i, &p) in pair.image.pixels().iter().enumerate() {
                        if band.pixels()[i] == 1 {
                            bs += f64::from(p);
                            bn += 1.0;
                        } else if pair.mask.pixels()[i] == 0 {
                            os += f64::from(p);
                            on += 1.0;
                        }
                    }
                    assert!(bs / bn > os / on + 50.0);
                }
            }
        }
    }

    #[test]
    fn mask_is_the_rasterized_ellipse() {
        let spec = PhantomSpec::random(TrimesterLabel::Third, 128, 5);
        let pair = generate_phantom(&spec).unwrap();
        let oracle = rasterize_filled_ellipse(&spec.ellipse, 128, 128);
        assert_eq!(dsc(&pair.mask, &oracle).unwrap(), 1.0);
    }

    #[test]
    fn out_of_bounds_is_rejected() {
        let mut spec = PhantomSpec::random(TrimesterLabel::Third, 64, 1);
        spec.ellipse.cx = 5.0;
        assert_eq!(generate_phantom(&spec), Err(PhantomError::EllipseOutOfBounds));
        spec = PhantomSpec::random(TrimesterLabel::First, 64, 1);
        spec.band_thickness = 0.5;
        assert!(matches!(generate_phantom(&spec), Err(PhantomError::BadParameter(_))));
    }

    #[test]
    fn random_specs_always_fit() {
        for seed in 0..300 {
            for t in TrimesterLabel::ALL {
                PhantomSpec::random(t, 64, seed).validate().unwrap();
                PhantomSpec::random(t, 128, seed).validate().unwrap();
            }
        }
    }
}
