//! Classical augmentation baselines: weak (WA) and strong (SA) policies applied
//! jointly to an image and its mask. Geometric transforms move both; the mask
//! is re-binarised at 0.5 after interpolation. Photometric ones touch only the
//! image.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::image::{AnnotatedPair, BinaryMask, GrayImage};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum PolicyKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct AugmentPolicy {
    pub kind: PolicyKind,
    /// Probability of applying each transform.
    pub p: f64,
    pub max_rotation_deg: f64,
    /// Relative brightness change, ±.
    pub brightness: f64,
    /// Relative contrast change, ±.
    pub contrast: f64,
    /// Noise σ range as a fraction of the 0–255 range.
    pub noise_sigma: (f64, f64),
    pub blur_kernels: Vec<usize>,
    pub elastic_alpha: (f64, f64),
    pub elastic_sigma: (f64, f64),
    /// Erased rectangle area as a fraction of the image.
    pub erase_area: (f64, f64),
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        Self::weak()
    }
}

impl AugmentPolicy {
    pub fn weak() -> Self {
        Self {
            kind: PolicyKind::Weak,
            p: 0.5,
            max_rotation_deg: 15.0,
            brightness: 0.2,
            contrast: 0.2,
            noise_sigma: (0.0, 0.03),
            blur_kernels: vec![3, 5],
            elastic_alpha: (10.0, 40.0),
            elastic_sigma: (4.0, 8.0),
            erase_area: (0.02, 0.10),
        }
    }

    pub fn strong() -> Self {
        Self {
            kind: PolicyKind::Strong,
            max_rotation_deg: 30.0,
            ..Self::weak()
        }
    }

    pub fn for_kind(kind: PolicyKind) -> Self {
        match kind {
            PolicyKind::Weak => Self::weak(),
            PolicyKind::Strong => Self::strong(),
        }
    }

    pub fn apply(&self, pair: &AnnotatedPair, seed: u64) -> AnnotatedPair {
        self.apply_traced(pair, seed).0
    }

    /// Apply the policy and report which transforms fired, in order.
    pub fn apply_traced(&self, pair: &AnnotatedPair, seed: u64) -> (AnnotatedPair, Vec<Applied>) {
        let mut r = rng::stream(seed, 0xA06);
        let mut out = pair.clone();
        let mut trace = Vec::new();
        let fire = |r: &mut rng::Rng| r.random_bool(self.p.clamp(0.0, 1.0));
        let rot = self.max_rotation_deg;
        match self.kind {
            PolicyKind::Weak => {
                if fire(&mut r) {
                    out = hflip(&out);
                    trace.push(Applied::HFlip);
                }
                if fire(&mut r) {
                    out = vflip(&out);
                    trace.push(Applied::VFlip);
                }
                if fire(&mut r) {
                    let deg = r.random_range(-rot..=rot);
                    out = rotate(&out, deg);
                    trace.push(Applied::Rotate { deg });
                }
                if fire(&mut r) {
                    let (b, c) = self.draw_bc(&mut r);
                    out.image = brightness_contrast(&out.image, b, c);
                    trace.push(Applied::BrightnessContrast { brightness: b, contrast: c });
                }
                if fire(&mut r) && !self.blur_kernels.is_empty() {
                    let k = self.blur_kernels[r.random_range(0..self.blur_kernels.len())];
                    out.image = gaussian_blur(&out.image, k);
                    trace.push(Applied::Blur { kernel: k });
                }
                if fire(&mut r) {
                    let sigma = r.random_range(self.noise_sigma.0..=self.noise_sigma.1);
                    let s = r.random();
                    out.image = gaussian_noise(&out.image, sigma, s);
                    trace.push(Applied::Noise { sigma });
                }
            }
            PolicyKind::Strong => {
                if fire(&mut r) {
                    let deg = r.random_range(-rot..=rot);
                    out = rotate(&out, deg);
                    trace.push(Applied::Rotate { deg });
                }
                if fire(&mut r) {
                    let (b, c) = self.draw_bc(&mut r);
                    out.image = brightness_contrast(&out.image, b, c);
                    trace.push(Applied::BrightnessContrast { brightness: b, contrast: c });
                }
                if fire(&mut r) {
                    let alpha = r.random_range(self.elastic_alpha.0..=self.elastic_alpha.1);
                    let sigma = r.random_range(self.elastic_sigma.0..=self.elastic_sigma.1);
                    let field = ElasticField::random(out.height(), out.width(), alpha, sigma, r.random());
                    out = field.warp(&out);
                    trace.push(Applied::Elastic { alpha, sigma });
                }
                if fire(&mut r) {
                    let frac = r.random_range(self.erase_area.0..=self.erase_area.1);
                    let rect = erase_rect(out.height(), out.width(), frac, r.random());
                    out.image = erase(&out.image, rect);
                    trace.push(Applied::Erase { rect });
                }
            }
        }
        (out, trace)
    }

    fn draw_bc(&self, r: &mut rng::Rng) -> (f64, f64) {
        (
            r.random_range(-self.brightness..=self.brightness),
            r.random_range(-self.contrast..=self.contrast),
        )
    }
}

/// One fired transform with its drawn parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "op", rename_all = "snake_case"))]
pub enum Applied {
    HFlip,
    VFlip,
    Rotate { deg: f64 },
    BrightnessContrast { brightness: f64, contrast: f64 },
    Blur { kernel: usize },
    Noise { sigma: f64 },
    Elastic { alpha: f64, sigma: f64 },
    /// (x0, y0, x1, y1), exclusive upper corners.
    Erase { rect: (usize, usize, usize, usize) },
}

pub fn weak_augment(pair: &AnnotatedPair, seed: u64) -> AnnotatedPair {
    AugmentPolicy::weak().apply(pair, seed)
}

pub fn strong_augment(pair: &AnnotatedPair, seed: u64) -> AnnotatedPair {
    AugmentPolicy::strong().apply(pair, seed)
}

fn remap_gray(img: &GrayImage, f: impl Fn(usize, usize) -> (usize, usize)) -> GrayImage {
    let (h, w) = (img.height(), img.width());
    let px = (0..h * w).map(|i| {
        let (sx, sy) = f(i % w, i / w);
        img.get(sx, sy)
    });
    GrayImage::new(h, w, px.collect()).expect("same shape")
}

fn remap_mask(m: &BinaryMask, f: impl Fn(usize, usize) -> (usize, usize)) -> BinaryMask {
    BinaryMask::from_fn(m.height(), m.width(), |x, y| {
        let (sx, sy) = f(x, y);
        m.get(sx, sy)
    })
    .expect("same shape")
}

/// Mirror left/right: out(x, y) = in(W−1−x, y).
pub fn hflip(pair: &AnnotatedPair) -> AnnotatedPair {
    let w = pair.width();
    let f = |x: usize, y: usize| (w - 1 - x, y);
    AnnotatedPair {
        image: remap_gray(&pair.image, f),
        mask: remap_mask(&pair.mask, f),
        ..pair.clone()
    }
}

pub fn vflip(pair: &AnnotatedPair) -> AnnotatedPair {
    let h = pair.height();
    let f = |x: usize, y: usize| (x, h - 1 - y);
    AnnotatedPair {
        image: remap_gray(&pair.image, f),
        mask: remap_mask(&pair.mask, f),
        ..pair.clone()
    }
}

/// Bilinear sample, zero outside the grid. Integer positions return the
/// stored value exactly.
fn bilinear(values: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    let (x0, y0) = (libm::floor(x), libm::floor(y));
    let (fx, fy) = ((x - x0) as f32, (y - y0) as f32);
    let at = |xi: f64, yi: f64| -> f32 {
        if xi < 0.0 || yi < 0.0 || xi >= w as f64 || yi >= h as f64 {
            0.0
        } else {
            values[yi as usize * w + xi as usize]
        }
    };
    let top = at(x0, y0) * (1.0 - fx) + if fx > 0.0 { at(x0 + 1.0, y0) * fx } else { 0.0 };
    if fy == 0.0 {
        return top;
    }
    let bot = at(x0, y0 + 1.0) * (1.0 - fx) + if fx > 0.0 { at(x0 + 1.0, y0 + 1.0) * fx } else { 0.0 };
    top * (1.0 - fy) + bot * fy
}

/// Warp an image and mask by an inverse map `(x, y) -> source (x, y)`.
fn warp_pair(pair: &AnnotatedPair, src: impl Fn(usize, usize) -> (f64, f64)) -> AnnotatedPair {
    let (h, w) = (pair.height(), pair.width());
    let img: Vec<f32> = pair.image.pixels().iter().map(|&v| f32::from(v)).collect();
    let msk: Vec<f32> = pair.mask.pixels().iter().map(|&v| f32::from(v)).collect();
    let mut out_img = Vec::with_capacity(h * w);
    let mut out_mask = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x, y);
            out_img.push(libm::roundf(bilinear(&img, h, w, sx, sy)).clamp(0.0, 255.0) as u8);
            out_mask.push(u8::from(bilinear(&msk, h, w, sx, sy) >= 0.5));
        }
    }
    AnnotatedPair {
        image: GrayImage::new(h, w, out_img).expect("same shape"),
        mask: BinaryMask::new(h, w, out_mask).expect("binary"),
        ..pair.clone()
    }
}

/// Inverse rotation map about the pixel-grid centre; `deg` is counter-clockwise
/// in image coordinates (y down).
pub fn rotation_source(h: usize, w: usize, deg: f64) -> impl Fn(usize, usize) -> (f64, f64) {
    let th = deg.to_radians();
    let (s, c) = (libm::sin(th), libm::cos(th));
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    move |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
    }
}

/// Rotate image and mask together. Right-angle rotations of square images
/// take an exact integer path, so masks survive without interpolation loss.
pub fn rotate(pair: &AnnotatedPair, deg: f64) -> AnnotatedPair {
    let (h, w) = (pair.height(), pair.width());
    let quarter = deg / 90.0;
    if h == w && libm::fabs(quarter - libm::round(quarter)) < 1e-12 {
        let k = (libm::round(quarter) as i64).rem_euclid(4);
        let n = w - 1;
        let f = move |x: usize, y: usize| match k {
            0 => (x, y),
            1 => (n - y, x),
            2 => (n - x, n - y),
            _ => (y, n - x),
        };
        return AnnotatedPair {
            image: remap_gray(&pair.image, f),
            mask: remap_mask(&pair.mask, f),
            ..pair.clone()
        };
    }
    warp_pair(pair, rotation_source(h, w, deg))
}

/// `v·(1+b)` followed by contrast `(v−mean)·(1+c)+mean`, clamped.
pub fn brightness_contrast(img: &GrayImage, brightness: f64, contrast: f64) -> GrayImage {
    let mean = img.mean() * (1.0 + brightness);
    let px = img.pixels().iter().map(|&v| {
        let b = f64::from(v) * (1.0 + brightness);
        libm::round((b - mean) * (1.0 + contrast) + mean).clamp(0.0, 255.0) as u8
    });
    GrayImage::new(img.height(), img.width(), px.collect()).expect("same shape")
}

fn gaussian_kernel(sigma: f64, radius: usize) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            libm::exp(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing with mirrored borders.
fn smooth(values: &[f64], h: usize, w: usize, kernel: &[f64]) -> Vec<f64> {
    let r = kernel.len() / 2;
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        if n == 1 {
            return 0;
        }
        while i < 0 || i >= n {
            i = if i < 0 { -i } else { 2 * (n - 1) - i };
        }
        i as usize
    };
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &c)| c * values[y * w + reflect(x as isize + k as isize - r as isize, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, &c)| c * tmp[reflect(y as isize + k as isize - r as isize, h) * w + x])
                .sum();
        }
    }
    out
}

/// Gaussian blur with an odd `kernel` size; σ follows the usual
/// `0.3·((k−1)/2 − 1) + 0.8` rule.
pub fn gaussian_blur(img: &GrayImage, kernel: usize) -> GrayImage {
    let k = kernel.max(1) | 1;
    let sigma = 0.3 * ((k as f64 - 1.0) / 2.0 - 1.0) + 0.8;
    let v: Vec<f64> = img.pixels().iter().map(|&p| f64::from(p)).collect();
    let out = smooth(&v, img.height(), img.width(), &gaussian_kernel(sigma, k / 2));
    GrayImage::new(img.height(), img.width(), out.iter().map(|&p| libm::round(p).clamp(0.0, 255.0) as u8).collect())
        .expect("same shape")
}

/// Additive Gaussian noise with σ given as a fraction of the 0–255 range.
pub fn gaussian_noise(img: &GrayImage, sigma: f64, seed: u64) -> GrayImage {
    let mut r = rng::stream(seed, 0x0153);
    let px = img
        .pixels()
        .iter()
        .map(|&v| libm::round(f64::from(v) + 255.0 * sigma * rng::normal_f64(&mut r)).clamp(0.0, 255.0) as u8);
    GrayImage::new(img.height(), img.width(), px.collect()).expect("same shape")
}

/// Random displacement field shared by image and mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ElasticField {
    pub height: usize,
    pub width: usize,
    pub dx: Vec<f64>,
    pub dy: Vec<f64>,
}

impl ElasticField {
    /// Uniform(−1, 1) noise smoothed by a Gaussian of `sigma` px and scaled by `alpha`.
    pub fn random(height: usize, width: usize, alpha: f64, sigma: f64, seed: u64) -> Self {
        let mut r = rng::stream(seed, 0xE1A5);
        let kernel = gaussian_kernel(sigma, libm::ceil(3.0 * sigma) as usize);
        let mut field = || {
            let raw: Vec<f64> = (0..height * width).map(|_| r.random_range(-1.0..1.0)).collect();
            smooth(&raw, height, width, &kernel).into_iter().map(|v| v * alpha).collect()
        };
        let dx = field();
        let dy = field();
        Self { height, width, dx, dy }
    }

    pub fn source(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (x as f64 + self.dx[i], y as f64 + self.dy[i])
    }

    pub fn warp(&self, pair: &AnnotatedPair) -> AnnotatedPair {
        warp_pair(pair, |x, y| self.source(x, y))
    }
}

/// Rectangle covering about `area_frac` of the image with a random aspect ratio.
pub fn erase_rect(h: usize, w: usize, area_frac: f64, seed: u64) -> (usize, usize, usize, usize) {
    let mut r = rng::stream(seed, 0xE5A5);
    let area = area_frac * (h * w) as f64;
    let aspect = libm::exp(r.random_range(libm::log(0.3)..libm::log(1.0 / 0.3)));
    let rw = (libm::round(libm::sqrt(area * aspect)) as usize).clamp(1, w);
    let rh = (libm::round(libm::sqrt(area / aspect)) as usize).clamp(1, h);
    let x0 = r.random_range(0..=w - rw);
    let y0 = r.random_range(0..=h - rh);
    (x0, y0, x0 + rw, y0 + rh)
}

/// Zero a rectangle of the image.
pub fn erase(img: &GrayImage, rect: (usize, usize, usize, usize)) -> GrayImage {
    let (x0, y0, x1, y1) = rect;
    let w = img.width();
    let mut out = img.clone();
    for y in y0..y1 {
        out.pixels_mut()[y * w + x0..y * w + x1].iter_mut().for_each(|v| *v = 0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ellipse::{rasterize_filled_ellipse, EllipseParams};
    use crate::image::{Provenance, TrimesterLabel};
    use crate::phantom::{generate_phantom, PhantomSpec};
    use crate::segmentor::metrics::dsc;

    fn phantom(seed: u64) -> AnnotatedPair {
        generate_phantom(&PhantomSpec::random(TrimesterLabel::Second, 64, seed)).unwrap()
    }

    fn ellipse_pair(e: &EllipseParams, n: usize) -> AnnotatedPair {
        let mask = rasterize_filled_ellipse(e, n, n);
        AnnotatedPair::new("e", mask.to_gray(), mask, TrimesterLabel::First, Provenance::Real).unwrap()
    }

    #[test]
    fn hflip_definition() {
        let p = phantom(1);
        let f = hflip(&p);
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(f.mask.get(x, y), p.mask.get(63 - x, y));
                assert_eq!(f.image.get(x, y), p.image.get(63 - x, y));
            }
        }
        assert_eq!(hflip(&f), p);
        assert_eq!(vflip(&vflip(&p)), p);
    }

    #[test]
    fn photometric_ops_leave_the_mask_alone() {
        let p = phantom(2);
        let img = brightness_contrast(&p.image, 0.15, -0.1);
        assert_ne!(img, p.image);
        let img = gaussian_blur(&gaussian_noise(&img, 0.03, 4), 5);
        let q = AnnotatedPair { image: img, ..p.clone() };
        assert_eq!(q.mask, p.mask);
        // every WA/SA photometric-only trace keeps the mask bit-identical
        for s in 0..200 {
            for pol in [AugmentPolicy::weak(), AugmentPolicy::strong()] {
                let (out, trace) = pol.apply_traced(&p, s);
                let geometric = trace
                    .iter()
                    .any(|a| matches!(a, Applied::HFlip | Applied::VFlip | Applied::Rotate { .. } | Applied::Elastic { .. }));
                if !geometric {
                    assert_eq!(out.mask, p.mask);
                }
            }
        }
    }

    #[test]
    fn right_angle_rotation_is_exact() {
        let p = phantom(3);
        let r1 = rotate(&p, 90.0);
        assert_ne!(r1.mask, p.mask);
        assert_eq!(rotate(&r1, -90.0), p);
        assert_eq!(rotate(&rotate(&r1, 90.0), 180.0), p);
        assert_eq!(rotate(&p, 360.0), p);
        assert_eq!(rotate(&p, 180.0), vflip(&hflip(&p)));
        // the exact path agrees with the general inverse map at 90°
        let src = rotation_source(64, 64, 90.0);
        for (y, x) in [(0, 0), (5, 17), (63, 2)] {
            let (sx, sy) = src(x, y);
            assert_eq!(r1.mask.get(x, y), p.mask.get(libm::round(sx) as usize, libm::round(sy) as usize));
        }
    }

    #[test]
    fn interpolated_rotation_matches_the_rotated_shape() {
        let e = EllipseParams::canonical(63.5, 63.5, 40.0, 22.0, 0.2);
        let p = ellipse_pair(&e, 128);
        for deg in [-30.0, -12.5, 7.0, 25.0] {
            let r = rotate(&p, deg);
            // a counter-clockwise image rotation (y down) lowers θ
            let oracle = rasterize_filled_ellipse(&EllipseParams::canonical(63.5, 63.5, 40.0, 22.0, 0.2 - f64::to_radians(deg)), 128, 128);
            let d = dsc(&r.mask, &oracle).unwrap();
            assert!(d >= 0.99, "{deg}: {d}");
        }
    }

    #[test]
    fn elastic_uses_one_shared_field() {
        let e = EllipseParams::canonical(60.0, 66.0, 36.0, 24.0, 0.7);
        let p = ellipse_pair(&e, 128);
        for s in 0..5 {
            let field = ElasticField::random(128, 128, 40.0, 4.0, s);
            let out = field.warp(&p);
            let oracle = BinaryMask::from_fn(128, 128, |x, y| {
                let (sx, sy) = field.source(x, y);
                e.contains(sx, sy)
            })
            .unwrap();
            let d = dsc(&out.mask, &oracle).unwrap();
            assert!(d >= 0.99, "{s}: {d}");
            // the image here equals 255·mask, so both planes moved together
            let img_mask = BinaryMask::new(128, 128, out.image.pixels().iter().map(|&v| u8::from(v >= 128)).collect()).unwrap();
            assert!(dsc(&img_mask, &out.mask).unwrap() >= 0.99);
        }
    }

    #[test]
    fn zero_magnitude_elastic_is_identity() {
        let p = phantom(5);
        assert_eq!(ElasticField::random(64, 64, 0.0, 6.0, 9).warp(&p), p);
    }

    #[test]
    fn erasing_changes_one_rectangle_of_the_image() {
        let p = phantom(6);
        let rect = erase_rect(64, 64, 0.05, 3);
        let area = (rect.2 - rect.0) * (rect.3 - rect.1);
        assert!((area as f64 / 4096.0 - 0.05).abs() < 0.02);
        let img = erase(&p.image, rect);
        for y in 0..64 {
            for x in 0..64 {
                let inside = (rect.0..rect.2).contains(&x) && (rect.1..rect.3).contains(&y);
                if inside {
                    assert_eq!(img.get(x, y), 0);
                } else {
                    assert_eq!(img.get(x, y), p.image.get(x, y));
                }
            }
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let p = phantom(7);
        for s in 0..50 {
            let (a, ta) = AugmentPolicy::strong().apply_traced(&p, s);
            let (b, tb) = AugmentPolicy::strong().apply_traced(&p, s);
            assert_eq!((a, ta.clone()), (b, tb));
            let (_, tw) = AugmentPolicy::weak().apply_traced(&p, s);
            for t in ta.iter().chain(&tw) {
                match *t {
                    Applied::Rotate { deg } => assert!(deg.abs() <= 30.0),
                    Applied::BrightnessContrast { brightness, contrast } => {
                        assert!(brightness.abs() <= 0.2 && contrast.abs() <= 0.2)
                    }
                    Applied::Noise { sigma } => assert!((0.0..=0.03).contains(&sigma)),
                    Applied::Blur { kernel } => assert!(kernel == 3 || kernel == 5),
                    Applied::Elastic { alpha, sigma } => {
                        assert!((10.0..=40.0).contains(&alpha) && (4.0..=8.0).contains(&sigma))
                    }
                    Applied::Erase { rect } => assert!(rect.2 <= 64 && rect.3 <= 64),
                    Applied::HFlip | Applied::VFlip => {}
                }
            }
            assert!(tw.iter().all(|t| !matches!(t, Applied::Rotate { deg } if deg.abs() > 15.0)));
        }
    }

    #[test]
    fn each_transform_fires_about_half_the_time() {
        let p = ellipse_pair(&EllipseParams::canonical(20.0, 20.0, 8.0, 5.0, 0.0), 40);
        let mut counts = [0usize; 6];
        for s in 0..400 {
            for t in AugmentPolicy::weak().apply_traced(&p, s).1 {
                let i = match t {
                    Applied::HFlip => 0,
                    Applied::VFlip => 1,
                    Applied::Rotate { .. } => 2,
                    Applied::BrightnessContrast { .. } => 3,
                    Applied::Blur { .. } => 4,
                    _ => 5,
                };
                counts[i] += 1;
            }
        }
        assert!(counts.iter().all(|&c| (150..=250).contains(&c)), "{counts:?}");
    }
}
