use rand::Rng as _;

use super::SegError;
use crate::image::BinaryMask;
use crate::rng;

/// Maximum per-edge jitter, in pixels.
pub const DEFAULT_Q_MAX: u32 = 20;
/// Side of the square frame the default jitter is measured in.
pub const PROMPT_FRAME: usize = 1024;

/// `DEFAULT_Q_MAX` rescaled from the prompt frame to a `size`-px image, at least 1.
pub fn scaled_q_max(size: usize) -> u32 {
    (libm::round(f64::from(DEFAULT_Q_MAX) * size as f64 / PROMPT_FRAME as f64) as u32).max(1)
}

/// Axis-aligned box with exclusive upper corners: `0 ≤ x0 < x1 ≤ W`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BoxPrompt {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxPrompt {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    /// Tight box around the mask foreground.
    pub fn tight(mask: &BinaryMask) -> Result<Self, SegError> {
        let (x0, y0, x1, y1) = mask.bounding_box().ok_or(SegError::EmptyMask)?;
        Ok(Self { x0, y0, x1, y1 })
    }

    pub fn is_valid_in(&self, height: usize, width: usize) -> bool {
        self.x0 < self.x1 && self.y0 < self.y1 && self.x1 <= width && self.y1 <= height
    }

    pub fn check_in(&self, height: usize, width: usize) -> Result<(), SegError> {
        if self.is_valid_in(height, width) {
            Ok(())
        } else {
            Err(SegError::BoxOutOfBounds)
        }
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    /// Corners scaled to [0, 1] by the image size.
    pub fn normalized(&self, height: usize, width: usize) -> [f32; 4] {
        let (w, h) = (width as f32, height as f32);
        [self.x0 as f32 / w, self.y0 as f32 / h, self.x1 as f32 / w, self.y1 as f32 / h]
    }

    /// Largest absolute per-edge offset from `other`.
    pub fn max_offset(&self, other: &Self) -> usize {
        [
            self.x0.abs_diff(other.x0),
            self.y0.abs_diff(other.y0),
            self.x1.abs_diff(other.x1),
            self.y1.abs_diff(other.y1),
        ]
        .into_iter()
        .max()
        .unwrap_or(0)
    }
}

fn jitter(r: &mut rng::Rng, q_max: u32) -> i64 {
    let d = i64::from(r.random_range(0..=q_max));
    if r.random_bool(0.5) {
        d
    } else {
        -d
    }
}

/// Simulated manual annotation: start from the tight box and move each edge
/// outward or inward by an independent integer in `[0, q_max]`, then clamp.
/// If two opposite edges cross, the box collapses to the one-pixel band at the
/// tight box's centre, which keeps every edge within `q_max` of the original.
pub fn perturb_box(mask: &BinaryMask, q_max: u32, seed: u64) -> Result<BoxPrompt, SegError> {
    let t = BoxPrompt::tight(mask)?;
    let mut r = rng::stream(seed, 0xB0C5);
    // positive jitter = outward
    let d: [i64; 4] = core::array::from_fn(|_| jitter(&mut r, q_max));
    let (x0, x1) = axis(t.x0, t.x1, d[0], d[2], mask.width());
    let (y0, y1) = axis(t.y0, t.y1, d[1], d[3], mask.height());
    Ok(BoxPrompt { x0, y0, x1, y1 })
}

fn axis(lo: usize, hi: usize, d_lo: i64, d_hi: i64, limit: usize) -> (usize, usize) {
    let a = (lo as i64 - d_lo).clamp(0, limit as i64) as usize;
    let b = (hi as i64 + d_hi).clamp(0, limit as i64) as usize;
    if a < b {
        (a, b)
    } else {
        let c = (lo + hi - 1) / 2;
        (c, c + 1)
    }
}
