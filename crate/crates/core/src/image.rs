//! Image-level data model and the in-channel mask injection.
//!
//! A [`TriChannelImage`] carries the grayscale content in two planes and the
//! segmentation mask (scaled to 0/255) in the third, so one generative model
//! learns images and masks jointly.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

pub const MIN_SIDE: usize = 16;

/// Plane that carries the mask in tri-channel images.
pub const MASK_PLANE_INDEX: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ImageError {
    #[error("image {height}x{width} is smaller than {MIN_SIDE}x{MIN_SIDE}")]
    TooSmall { height: usize, width: usize },
    #[error("dimension mismatch: {a_h}x{a_w} vs {b_h}x{b_w}")]
    DimensionMismatch {
        a_h: usize,
        a_w: usize,
        b_h: usize,
        b_w: usize,
    },
    #[error("mask is not binary: value {value} at index {index}")]
    NotBinary { value: u8, index: usize },
    #[error("pixel buffer has {got} values, expected {expected}")]
    BadLength { expected: usize, got: usize },
    #[error("mask plane index {0} is not in 0..3")]
    BadPlaneIndex(usize),
    #[error("tri-channel mask plane holds value {0}, expected 0 or 255")]
    MaskPlaneNotBinary(u8),
    #[error("tri-channel content planes differ")]
    ContentPlanesDiffer,
}

fn check_dims(height: usize, width: usize, len: usize) -> Result<(), ImageError> {
    if height < MIN_SIDE || width < MIN_SIDE {
        return Err(ImageError::TooSmall { height, width });
    }
    if len != height * width {
        return Err(ImageError::BadLength {
            expected: height * width,
            got: len,
        });
    }
    Ok(())
}

/// 8-bit grayscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        check_dims(height, width, pixels.len())?;
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Result<Self, ImageError> {
        Self::new(height, width, vec![value; height * width])
    }

    /// Build from normalized intensities, clamping to [0,1] and rounding.
    pub fn from_unit(height: usize, width: usize, values: &[f32]) -> Result<Self, ImageError> {
        let pixels = values.iter().map(|&v| unit_to_u8(v)).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    /// Normalized [0,1] view.
    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| f32::from(p) / 255.0).collect()
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&p| f64::from(p)).sum::<f64>() / self.pixels.len() as f64
    }
}

pub fn unit_to_u8(v: f32) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    libm::roundf(v * 255.0) as u8
}

/// Strictly binary {0,1} mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, ImageError> {
        check_dims(height, width, pixels.len())?;
        if let Some((index, &value)) = pixels.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(ImageError::NotBinary { value, index });
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self, ImageError> {
        Self::new(height, width, vec![0; height * width])
    }

    /// Build from any predicate over (x, y).
    pub fn from_fn(
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self, ImageError> {
        let mut pixels = vec![0u8; height * width];
        for y in 0..height {
            for x in 0..width {
                pixels[y * width + x] = u8::from(f(x, y));
            }
        }
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.pixels[y * self.width + x] != 0
    }

    pub fn set(&mut self, x: usize, y: usize, on: bool) {
        self.pixels[y * self.width + x] = u8::from(on);
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.iter().all(|&p| p == 0)
    }

    pub fn same_shape<T: Shape2>(&self, other: &T) -> bool {
        self.height == other.dims().0 && self.width == other.dims().1
    }

    /// Tight bounding box as (x0, y0, x1, y1) with exclusive upper corners.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x + 1, y + 1),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x + 1), y1.max(y + 1)),
                    });
                }
            }
        }
        bb
    }

    /// Mask scaled to {0,255}.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&p| p * 255).collect(),
        }
    }

    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| f32::from(p)).collect()
    }
}

/// Anything with a (height, width).
pub trait Shape2 {
    fn dims(&self) -> (usize, usize);
}

impl Shape2 for GrayImage {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

impl Shape2 for BinaryMask {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

fn ensure_same<A: Shape2, B: Shape2>(a: &A, b: &B) -> Result<(), ImageError> {
    let (a_h, a_w) = a.dims();
    let (b_h, b_w) = b.dims();
    if a_h != b_h || a_w != b_w {
        return Err(ImageError::DimensionMismatch { a_h, a_w, b_h, b_w });
    }
    Ok(())
}

/// Three planes of H×W, plane-major (`planes[p*H*W + y*W + x]`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TriChannelImage {
    height: usize,
    width: usize,
    mask_plane_index: usize,
    planes: Vec<u8>,
}

impl TriChannelImage {
    /// Wrap raw planes without the content/mask invariants; generated samples
    /// are noisy and only become valid pairs after extraction.
    pub fn from_raw(
        height: usize,
        width: usize,
        mask_plane_index: usize,
        planes: Vec<u8>,
    ) -> Result<Self, ImageError> {
        check_dims(height, width, planes.len() / 3)?;
        if planes.len() != 3 * height * width {
            return Err(ImageError::BadLength {
                expected: 3 * height * width,
                got: planes.len(),
            });
        }
        if mask_plane_index > 2 {
            return Err(ImageError::BadPlaneIndex(mask_plane_index));
        }
        Ok(Self {
            height,
            width,
            mask_plane_index,
            planes,
        })
    }

    /// Check the composed-image invariants: identical content planes, mask plane in {0,255}.
    pub fn validate_composed(&self) -> Result<(), ImageError> {
        let [c0, c1] = self.content_plane_indices();
        if self.plane(c0) != self.plane(c1) {
            return Err(ImageError::ContentPlanesDiffer);
        }
        if let Some(&v) = self.plane(self.mask_plane_index).iter().find(|&&v| v != 0 && v != 255) {
            return Err(ImageError::MaskPlaneNotBinary(v));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mask_plane_index(&self) -> usize {
        self.mask_plane_index
    }

    pub fn planes(&self) -> &[u8] {
        &self.planes
    }

    pub fn plane(&self, p: usize) -> &[u8] {
        let n = self.height * self.width;
        &self.planes[p * n..(p + 1) * n]
    }

    fn content_plane_indices(&self) -> [usize; 2] {
        match self.mask_plane_index {
            0 => [1, 2],
            1 => [0, 2],
            _ => [0, 1],
        }
    }

    /// Interleaved RGB bytes (for 8-bit RGB PNG output).
    pub fn to_interleaved(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(3 * n);
        for i in 0..n {
            for p in 0..3 {
                out.push(self.planes[p * n + i]);
            }
        }
        out
    }

    pub fn from_interleaved(
        height: usize,
        width: usize,
        mask_plane_index: usize,
        rgb: &[u8],
    ) -> Result<Self, ImageError> {
        let n = height * width;
        if rgb.len() != 3 * n {
            return Err(ImageError::BadLength {
                expected: 3 * n,
                got: rgb.len(),
            });
        }
        let mut planes = vec![0u8; 3 * n];
        for i in 0..n {
            for p in 0..3 {
                planes[p * n + i] = rgb[3 * i + p];
            }
        }
        Self::from_raw(height, width, mask_plane_index, planes)
    }
}

/// Inject the mask into one colour plane; the other two planes copy the image.
pub fn compose_tri_channel(image: &GrayImage, mask: &BinaryMask) -> Result<TriChannelImage, ImageError> {
    compose_tri_channel_at(image, mask, MASK_PLANE_INDEX)
}

pub fn compose_tri_channel_at(
    image: &GrayImage,
    mask: &BinaryMask,
    mask_plane_index: usize,
) -> Result<TriChannelImage, ImageError> {
    ensure_same(image, mask)?;
    if mask_plane_index > 2 {
        return Err(ImageError::BadPlaneIndex(mask_plane_index));
    }
    let n = image.height * image.width;
    let mut planes = vec![0u8; 3 * n];
    for p in 0..3 {
        let dst = &mut planes[p * n..(p + 1) * n];
        if p == mask_plane_index {
            for (d, &m) in dst.iter_mut().zip(mask.pixels()) {
                *d = m * 255;
            }
        } else {
            dst.copy_from_slice(image.pixels());
        }
    }
    Ok(TriChannelImage {
        height: image.height,
        width: image.width,
        mask_plane_index,
        planes,
    })
}

/// Split a tri-channel image into its gray content and the raw (unthresholded)
/// mask channel. The gray content is the first non-mask plane.
pub fn decompose_tri_channel(tri: &TriChannelImage) -> (GrayImage, GrayImage) {
    let [content, _] = tri.content_plane_indices();
    let gray = GrayImage {
        height: tri.height,
        width: tri.width,
        pixels: tri.plane(content).to_vec(),
    };
    let mask = GrayImage {
        height: tri.height,
        width: tri.width,
        pixels: tri.plane(tri.mask_plane_index).to_vec(),
    };
    (gray, mask)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum TrimesterLabel {
    First,
    Second,
    Third,
}

pub const PROMPT_TEMPLATE_PREFIX: &str = "An ultrasound image of a fetal head, ";

impl TrimesterLabel {
    pub const ALL: [TrimesterLabel; 3] = [Self::First, Self::Second, Self::Third];

    pub fn index(self) -> usize {
        match self {
            Self::First => 0,
            Self::Second => 1,
            Self::Third => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::First => "first",
            Self::Second => "second",
            Self::Third => "third",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.as_str() == s)
    }
}

impl fmt::Display for TrimesterLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Text prompt for a trimester.
pub fn render_prompt(trimester: TrimesterLabel) -> String {
    let mut s = String::from(PROMPT_TEMPLATE_PREFIX);
    s.push_str(trimester.as_str());
    s.push_str(" trimester");
    s
}

/// Inverse of [`render_prompt`]; prompts map one-to-one onto class ids.
pub fn parse_prompt(prompt: &str) -> Option<TrimesterLabel> {
    let rest = prompt.strip_prefix(PROMPT_TEMPLATE_PREFIX)?;
    let word = rest.strip_suffix(" trimester")?;
    TrimesterLabel::parse(word)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Provenance {
    Real,
    SyntheticRaw,
    SyntheticCurated,
}

impl Provenance {
    pub fn is_synthetic(self) -> bool {
        !matches!(self, Self::Real)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotatedPair {
    pub id: String,
    pub image: GrayImage,
    pub mask: BinaryMask,
    pub trimester: TrimesterLabel,
    pub provenance: Provenance,
}

impl AnnotatedPair {
    pub fn new(
        id: impl Into<String>,
        image: GrayImage,
        mask: BinaryMask,
        trimester: TrimesterLabel,
        provenance: Provenance,
    ) -> Result<Self, ImageError> {
        ensure_same(&image, &mask)?;
        Ok(Self {
            id: id.into(),
            image,
            mask,
            trimester,
            provenance,
        })
    }

    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> GrayImage {
        GrayImage::new(h, w, (0..h * w).map(|i| (i % 251) as u8).collect()).unwrap()
    }

    fn disk(h: usize, w: usize) -> BinaryMask {
        BinaryMask::from_fn(h, w, |x, y| {
            let dx = x as f32 - 32.0;
            let dy = y as f32 - 30.0;
            dx * dx + dy * dy < 200.0
        })
        .unwrap()
    }

    #[test]
    fn compose_places_mask_in_plane_two() {
        let img = ramp(64, 64);
        let mask = disk(64, 64);
        let tri = compose_tri_channel(&img, &mask).unwrap();
        assert_eq!(tri.mask_plane_index(), 2);
        assert_eq!(tri.plane(0), img.pixels());
        assert_eq!(tri.plane(1), img.pixels());
        assert!(tri.plane(2).iter().all(|&v| v == 0 || v == 255));
        assert_eq!(tri.plane(2).iter().filter(|&&v| v == 255).count(), mask.count());
        tri.validate_composed().unwrap();
    }

    #[test]
    fn empty_mask_gives_zero_plane() {
        let img = ramp(64, 64);
        let tri = compose_tri_channel(&img, &BinaryMask::empty(64, 64).unwrap()).unwrap();
        assert!(tri.plane(2).iter().all(|&v| v == 0));
        assert_eq!(tri.plane(0), img.pixels());
    }

    #[test]
    fn compose_decompose_round_trip() {
        let img = ramp(32, 48);
        let mask = BinaryMask::from_fn(32, 48, |x, y| (x + y) % 3 == 0).unwrap();
        let tri = compose_tri_channel(&img, &mask).unwrap();
        let (gray, channel) = decompose_tri_channel(&tri);
        assert_eq!(gray, img);
        let back: Vec<u8> = channel.pixels().iter().map(|&v| v / 255).collect();
        assert_eq!(back, mask.pixels());
        // and the other direction
        let again = compose_tri_channel(&gray, &BinaryMask::new(32, 48, back).unwrap()).unwrap();
        assert_eq!(again, tri);
    }

    #[test]
    fn plane_zero_variant_reads_gray_from_plane_one() {
        let img = ramp(16, 16);
        let mask = BinaryMask::from_fn(16, 16, |x, _| x < 4).unwrap();
        let tri = compose_tri_channel_at(&img, &mask, 0).unwrap();
        let (gray, channel) = decompose_tri_channel(&tri);
        assert_eq!(gray.pixels(), tri.plane(1));
        assert_eq!(channel.pixels(), tri.plane(0));
    }

    #[test]
    fn raw_noisy_channel_passes_through() {
        let n = 16 * 16;
        let mut planes = vec![7u8; 3 * n];
        for (i, v) in planes[2 * n..].iter_mut().enumerate() {
            *v = (i % 256) as u8;
        }
        let tri = TriChannelImage::from_raw(16, 16, 2, planes).unwrap();
        let (_, channel) = decompose_tri_channel(&tri);
        assert_eq!(channel.pixels().iter().min(), Some(&0));
        assert_eq!(channel.pixels().iter().max(), Some(&255));
    }

    #[test]
    fn compose_rejects_bad_inputs() {
        let img = ramp(32, 32);
        let mask = BinaryMask::empty(32, 16).unwrap();
        assert!(matches!(
            compose_tri_channel(&img, &mask),
            Err(ImageError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            BinaryMask::new(16, 16, vec![2; 256]),
            Err(ImageError::NotBinary { value: 2, index: 0 })
        ));
        assert!(matches!(GrayImage::filled(8, 64, 0), Err(ImageError::TooSmall { .. })));
    }

    #[test]
    fn prompts_follow_template() {
        assert_eq!(
            render_prompt(TrimesterLabel::Second),
            "An ultrasound image of a fetal head, second trimester"
        );
        assert_eq!(
            render_prompt(TrimesterLabel::First),
            "An ultrasound image of a fetal head, first trimester"
        );
        assert_eq!(
            render_prompt(TrimesterLabel::Third),
            "An ultrasound image of a fetal head, third trimester"
        );
        for t in TrimesterLabel::ALL {
            assert_eq!(parse_prompt(&render_prompt(t)), Some(t));
        }
        assert_eq!(parse_prompt("An ultrasound image of a fetal head"), None);
    }

    #[test]
    fn interleaved_round_trip() {
        let img = ramp(16, 20);
        let mask = BinaryMask::from_fn(16, 20, |x, y| x > y).unwrap();
        let tri = compose_tri_channel(&img, &mask).unwrap();
        let rgb = tri.to_interleaved();
        assert_eq!(TriChannelImage::from_interleaved(16, 20, 2, &rgb).unwrap(), tri);
    }
}
