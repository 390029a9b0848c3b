//! The ellipse extractor: threshold the raw mask channel of a generated
//! tri-channel image, keep the largest 8-connected component, fit an ellipse to
//! its outer contour, and fill the fitted ellipse as the ground-truth mask.
//!
//! A quality score (DSC between the filled ellipse and the component) routes
//! each sample to automatic acceptance, human review, or rejection.

use alloc::vec;
use alloc::vec::Vec;

use crate::ellipse::{crack_edge_points, fit_ellipse, rasterize_filled_ellipse, EllipseParams};
use crate::image::{decompose_tri_channel, BinaryMask, GrayImage, TriChannelImage};
use crate::segmentor::metrics::dsc;

pub const DEFAULT_THRESHOLD: u8 = 127;
pub const DEFAULT_Q_HI: f64 = 0.90;
pub const DEFAULT_Q_LO: f64 = 0.50;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExtractError {
    #[error("mask has no foreground pixels")]
    EmptyMask,
}

/// Foreground iff `pixel > thr`.
pub fn threshold_channel(channel: &GrayImage, thr: u8) -> BinaryMask {
    let pixels = channel.pixels().iter().map(|&p| u8::from(p > thr)).collect();
    BinaryMask::new(channel.height(), channel.width(), pixels).expect("same dims as a valid image")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Component {
    pub mask: BinaryMask,
    pub size: usize,
    /// (x0, y0, x1, y1), inclusive.
    pub bbox: (usize, usize, usize, usize),
}

/// Largest 8-connected component. Ties go to the component whose bounding box
/// starts at the smaller row, then the smaller column.
pub fn largest_component(mask: &BinaryMask) -> Result<Component, ExtractError> {
    let (h, w) = (mask.height(), mask.width());
    let mut label = vec![0u32; h * w];
    let mut best: Option<(u32, usize, (usize, usize, usize, usize))> = None;
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.pixels()[start] == 0 || label[start] != 0 {
            continue;
        }
        next += 1;
        label[start] = next;
        stack.push(start);
        let mut size = 0;
        let mut bb = (usize::MAX, usize::MAX, 0, 0);
        while let Some(i) = stack.pop() {
            size += 1;
            let (x, y) = (i % w, i / w);
            bb = (bb.0.min(x), bb.1.min(y), bb.2.max(x), bb.3.max(y));
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.pixels()[j] != 0 && label[j] == 0 {
                        label[j] = next;
                        stack.push(j);
                    }
                }
            }
        }
        let better = match best {
            None => true,
            Some((_, bsize, bbb)) => size > bsize || (size == bsize && (bb.1, bb.0) < (bbb.1, bbb.0)),
        };
        if better {
            best = Some((next, size, bb));
        }
    }
    let (id, size, bbox) = best.ok_or(ExtractError::EmptyMask)?;
    let pixels = label.iter().map(|&l| u8::from(l == id)).collect();
    Ok(Component {
        mask: BinaryMask::new(h, w, pixels).expect("valid dims"),
        size,
        bbox,
    })
}

/// Fill enclosed background: every background pixel not 4-connected to the
/// image border becomes foreground.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut outside = vec![false; h * w];
    let mut stack = Vec::new();
    let seed = |x: usize, y: usize, outside: &mut [bool], stack: &mut Vec<usize>| {
        let i = y * w + x;
        if !mask.get(x, y) && !outside[i] {
            outside[i] = true;
            stack.push(i);
        }
    };
    for x in 0..w {
        seed(x, 0, &mut outside, &mut stack);
        seed(x, h - 1, &mut outside, &mut stack);
    }
    for y in 0..h {
        seed(0, y, &mut outside, &mut stack);
        seed(w - 1, y, &mut outside, &mut stack);
    }
    while let Some(i) = stack.pop() {
        let (x, y) = (i % w, i / w);
        let mut visit = |nx: usize, ny: usize| {
            let j = ny * w + nx;
            if !mask.get(nx, ny) && !outside[j] {
                outside[j] = true;
                stack.push(j);
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < w {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < h {
            visit(x, y + 1);
        }
    }
    let pixels = outside.iter().map(|&o| u8::from(!o)).collect();
    BinaryMask::new(h, w, pixels).expect("valid dims")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum ExtractionStatus {
    AcceptedAuto,
    NeedsReview,
    RejectedAuto,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct QualityGate {
    pub threshold: u8,
    pub q_hi: f64,
    pub q_lo: f64,
}

impl Default for QualityGate {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            q_hi: DEFAULT_Q_HI,
            q_lo: DEFAULT_Q_LO,
        }
    }
}

impl QualityGate {
    pub fn status(&self, quality: f64, fitted: bool) -> ExtractionStatus {
        if !fitted || quality < self.q_lo {
            ExtractionStatus::RejectedAuto
        } else if quality >= self.q_hi {
            ExtractionStatus::AcceptedAuto
        } else {
            ExtractionStatus::NeedsReview
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractionResult {
    pub raw_channel: GrayImage,
    pub binary: BinaryMask,
    pub ellipse: Option<EllipseParams>,
    pub filled: Option<BinaryMask>,
    pub quality: f64,
    pub status: ExtractionStatus,
}

/// Run the full extractor. Never fails; failures are encoded in `status`.
pub fn extract(tri: &TriChannelImage, gate: &QualityGate) -> ExtractionResult {
    let (_, raw) = decompose_tri_channel(tri);
    let binary = threshold_channel(&raw, gate.threshold);
    let (h, w) = (raw.height(), raw.width());
    let rejected = |raw: GrayImage, binary: BinaryMask| ExtractionResult {
        raw_channel: raw,
        binary,
        ellipse: None,
        filled: None,
        quality: 0.0,
        status: ExtractionStatus::RejectedAuto,
    };
    let Ok(component) = largest_component(&binary) else {
        return rejected(raw, binary);
    };
    let outer = fill_holes(&component.mask);
    let ellipse = match fit_ellipse(&crack_edge_points(&outer)) {
        Ok(e) if e.validate_in(h, w).is_ok() => e,
        _ => return rejected(raw, binary),
    };
    let filled = rasterize_filled_ellipse(&ellipse, h, w);
    let quality = dsc(&filled, &component.mask).unwrap_or(0.0).clamp(0.0, 1.0);
    ExtractionResult {
        raw_channel: raw,
        binary,
        ellipse: Some(ellipse),
        filled: Some(filled),
        quality,
        status: gate.status(quality, true),
    }
}
