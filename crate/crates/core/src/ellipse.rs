//! Ellipse geometry: parameters, rasterization, and the direct least-squares
//! ellipse-specific conic fit (numerically stable Halíř–Flusser form).
//!
//! Pixel `(x, y)` has its center at integer coordinates `(x, y)`.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::image::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EllipseParams {
    pub cx: f64,
    pub cy: f64,
    /// Semi-major axis.
    pub a: f64,
    /// Semi-minor axis.
    pub b: f64,
    /// Rotation of the major axis from +x, radians in [0, π).
    pub theta: f64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FitError {
    #[error("too few points for an ellipse fit: {0} (need 5)")]
    TooFewPoints(usize),
    #[error("fitted conic is not an ellipse")]
    DegenerateFit,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EllipseError {
    #[error("non-finite ellipse parameter")]
    NonFinite,
    #[error("semi-axes must satisfy a >= b > 0 (a={a}, b={b})")]
    BadAxes { a: f64, b: f64 },
    #[error("center ({cx}, {cy}) outside a {width}x{height} image")]
    CenterOutside {
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    },
}

const CIRCLE_REL_TOL: f64 = 1e-6;

impl EllipseParams {
    /// Normalize arbitrary parameters: swap axes so a >= b (rotating by π/2),
    /// wrap θ into [0, π), and pin θ = 0 for circles.
    pub fn canonical(cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Self {
        let (mut a, mut b, mut theta) = (libm::fabs(a), libm::fabs(b), theta);
        if b > a {
            core::mem::swap(&mut a, &mut b);
            theta += PI / 2.0;
        }
        theta = libm::fmod(theta, PI);
        if theta < 0.0 {
            theta += PI;
        }
        if theta >= PI {
            theta -= PI;
        }
        if a > 0.0 && (a - b) / a < CIRCLE_REL_TOL {
            theta = 0.0;
        }
        Self { cx, cy, a, b, theta }
    }

    pub fn validate(&self) -> Result<(), EllipseError> {
        let all = [self.cx, self.cy, self.a, self.b, self.theta];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(EllipseError::NonFinite);
        }
        if !(self.b > 0.0 && self.a >= self.b) {
            return Err(EllipseError::BadAxes { a: self.a, b: self.b });
        }
        Ok(())
    }

    pub fn validate_in(&self, height: usize, width: usize) -> Result<(), EllipseError> {
        self.validate()?;
        let inside = self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx <= (width as f64 - 1.0)
            && self.cy <= (height as f64 - 1.0);
        if !inside {
            return Err(EllipseError::CenterOutside {
                cx: self.cx,
                cy: self.cy,
                width,
                height,
            });
        }
        Ok(())
    }

    /// Normalized radial coordinate: ≤ 1 inside the ellipse.
    pub fn radial(&self, x: f64, y: f64) -> f64 {
        let (s, c) = libm::sincos(self.theta);
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.radial(x, y) <= 1.0
    }

    pub fn area(&self) -> f64 {
        PI * self.a * self.b
    }

    /// Half extents of the axis-aligned bounding box.
    pub fn half_extents(&self) -> (f64, f64) {
        let (s, c) = libm::sincos(self.theta);
        let hx = libm::sqrt(self.a * self.a * c * c + self.b * self.b * s * s);
        let hy = libm::sqrt(self.a * self.a * s * s + self.b * self.b * c * c);
        (hx, hy)
    }

    /// Same center and rotation, semi-axes grown by `d` (negative shrinks).
    pub fn offset(&self, d: f64) -> Self {
        Self {
            a: self.a + d,
            b: self.b + d,
            ..*self
        }
    }

    /// Smallest angular difference between two orientations, modulo π.
    pub fn theta_distance(&self, other: &Self) -> f64 {
        let d = libm::fmod(libm::fabs(self.theta - other.theta), PI);
        d.min(PI - d)
    }
}

fn pixel_range(lo: f64, hi: f64, n: usize) -> (usize, usize) {
    let lo = libm::floor(lo).max(0.0);
    let hi = libm::ceil(hi).min(n as f64 - 1.0);
    if hi < lo {
        return (1, 0);
    }
    (lo as usize, hi as usize)
}

/// Filled ellipse: a pixel is set iff its center lies inside. Clipped at borders.
pub fn rasterize_filled_ellipse(e: &EllipseParams, height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::empty(height, width).expect("caller passes valid dims");
    let (hx, hy) = e.half_extents();
    let (x0, x1) = pixel_range(e.cx - hx, e.cx + hx, width);
    let (y0, y1) = pixel_range(e.cy - hy, e.cy + hy, height);
    if x0 > x1 || y0 > y1 {
        return mask;
    }
    for y in y0..=y1 {
        for x in x0..=x1 {
            if e.contains(x as f64, y as f64) {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

/// Elliptical band of the given thickness centred on the ellipse outline.
pub fn rasterize_band(e: &EllipseParams, thickness: f64, height: usize, width: usize) -> BinaryMask {
    let outer = e.offset(thickness / 2.0);
    let inner_d = (thickness / 2.0).min(e.b - 1e-9);
    let inner = e.offset(-inner_d);
    let mut mask = rasterize_filled_ellipse(&outer, height, width);
    for y in 0..height {
        for x in 0..width {
            if mask.get(x, y) && inner.b > 0.0 && inner.contains(x as f64, y as f64) {
                mask.set(x, y, false);
            }
        }
    }
    mask
}

/// Sub-pixel boundary samples of a mask: midpoints of every pixel edge that
/// separates foreground from background (or from the image border).
pub fn crack_edge_points(mask: &BinaryMask) -> Vec<(f64, f64)> {
    let (h, w) = (mask.height(), mask.width());
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(x, y) {
                continue;
            }
            let (xf, yf) = (x as f64, y as f64);
            if x == 0 || !mask.get(x - 1, y) {
                pts.push((xf - 0.5, yf));
            }
            if x + 1 == w || !mask.get(x + 1, y) {
                pts.push((xf + 0.5, yf));
            }
            if y == 0 || !mask.get(x, y - 1) {
                pts.push((xf, yf - 0.5));
            }
            if y + 1 == h || !mask.get(x, y + 1) {
                pts.push((xf, yf + 0.5));
            }
        }
    }
    pts
}

type M3 = [[f64; 3]; 3];

fn mat3_inv(m: &M3) -> Option<M3> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let scale = m.iter().flatten().fold(0.0f64, |acc, v| acc.max(libm::fabs(*v)));
    if !det.is_finite() || libm::fabs(det) <= 1e-14 * scale * scale * scale {
        return None;
    }
    let inv_det = 1.0 / det;
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let (a1, a2) = ((j + 1) % 3, (j + 2) % 3);
            let (b1, b2) = ((i + 1) % 3, (i + 2) % 3);
            r[i][j] = (m[a1][b1] * m[a2][b2] - m[a1][b2] * m[a2][b1]) * inv_det;
        }
    }
    Some(r)
}

fn mat3_mul(a: &M3, b: &M3) -> M3 {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    r
}

fn transpose(a: &M3) -> M3 {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[j][i];
        }
    }
    r
}

/// Real roots of the monic cubic λ³ + p λ² + q λ + r.
fn real_cubic_roots(p: f64, q: f64, r: f64) -> Vec<f64> {
    // depressed cubic t³ + a t + b with λ = t − p/3
    let a = q - p * p / 3.0;
    let b = 2.0 * p * p * p / 27.0 - p * q / 3.0 + r;
    let shift = -p / 3.0;
    let disc = b * b / 4.0 + a * a * a / 27.0;
    let mut roots = Vec::with_capacity(3);
    if a < 0.0 && disc <= 0.0 {
        let m = 2.0 * libm::sqrt(-a / 3.0);
        let arg = (3.0 * b / (a * m)).clamp(-1.0, 1.0);
        let phi = libm::acos(arg) / 3.0;
        for k in 0..3 {
            roots.push(m * libm::cos(phi - 2.0 * PI * k as f64 / 3.0) + shift);
        }
    } else {
        let s = libm::sqrt(disc.max(0.0));
        let u = libm::cbrt(-b / 2.0 + s);
        let v = libm::cbrt(-b / 2.0 - s);
        roots.push(u + v + shift);
    }
    // polish with Newton on the original cubic
    for x in roots.iter_mut() {
        for _ in 0..3 {
            let f = ((*x + p) * *x + q) * *x + r;
            let df = (3.0 * *x + 2.0 * p) * *x + q;
            if df != 0.0 {
                let step = f / df;
                if step.is_finite() {
                    *x -= step;
                }
            }
        }
    }
    roots
}

fn null_vector(m: &M3, lambda: f64) -> Option<[f64; 3]> {
    let mut a = *m;
    for (i, row) in a.iter_mut().enumerate() {
        row[i] -= lambda;
    }
    let cross = |u: &[f64; 3], v: &[f64; 3]| {
        [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ]
    };
    let cands = [cross(&a[0], &a[1]), cross(&a[0], &a[2]), cross(&a[1], &a[2])];
    let best = cands
        .iter()
        .max_by(|x, y| norm3(x).total_cmp(&norm3(y)))
        .copied()?;
    let n = norm3(&best);
    if n == 0.0 || !n.is_finite() {
        return None;
    }
    Some([best[0] / n, best[1] / n, best[2] / n])
}

fn norm3(v: &[f64; 3]) -> f64 {
    libm::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
}

/// General conic `A x² + B xy + C y² + D x + E y + F = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conic(pub [f64; 6]);

impl Conic {
    pub fn to_ellipse(&self) -> Result<EllipseParams, FitError> {
        let mut c = self.0;
        if c[0] + c[2] < 0.0 {
            c.iter_mut().for_each(|v| *v = -*v);
        }
        let [a, b, cc, d, e, f] = c;
        let det = 4.0 * a * cc - b * b;
        if !(det > 0.0) {
            return Err(FitError::DegenerateFit);
        }
        let x0 = (b * e - 2.0 * cc * d) / det;
        let y0 = (b * d - 2.0 * a * e) / det;
        let f0 = f + (d * x0 + e * y0) / 2.0;
        let mean = (a + cc) / 2.0;
        let rad = libm::hypot((a - cc) / 2.0, b / 2.0);
        let (l_small, l_big) = (mean - rad, mean + rad);
        if !(l_small > 0.0) || !(f0 < 0.0) {
            return Err(FitError::DegenerateFit);
        }
        let major = libm::sqrt(-f0 / l_small);
        let minor = libm::sqrt(-f0 / l_big);
        // eigenvector of [[a, b/2], [b/2, cc]] for the small eigenvalue
        let v1 = (b / 2.0, l_small - a);
        let v2 = (l_small - cc, b / 2.0);
        let (vx, vy) = if libm::hypot(v1.0, v1.1) >= libm::hypot(v2.0, v2.1) {
            v1
        } else {
            v2
        };
        let theta = if vx == 0.0 && vy == 0.0 {
            0.0
        } else {
            libm::atan2(vy, vx)
        };
        let out = EllipseParams::canonical(x0, y0, major, minor, theta);
        if !out.a.is_finite() || !out.b.is_finite() || !out.cx.is_finite() || !out.cy.is_finite() {
            return Err(FitError::DegenerateFit);
        }
        Ok(out)
    }
}

/// Direct least-squares ellipse fit. Coordinates are centred and scaled
/// before building the scatter matrices, and the result is mapped back.
pub fn fit_ellipse(points: &[(f64, f64)]) -> Result<EllipseParams, FitError> {
    if points.len() < 5 {
        return Err(FitError::TooFewPoints(points.len()));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let spread = libm::sqrt(
        points
            .iter()
            .map(|p| (p.0 - mx) * (p.0 - mx) + (p.1 - my) * (p.1 - my))
            .sum::<f64>()
            / n,
    );
    if !(spread > 0.0) || !spread.is_finite() {
        return Err(FitError::DegenerateFit);
    }
    let mut s1 = [[0.0; 3]; 3];
    let mut s2 = [[0.0; 3]; 3];
    let mut s3 = [[0.0; 3]; 3];
    for &(px, py) in points {
        let x = (px - mx) / spread;
        let y = (py - my) / spread;
        let d1 = [x * x, x * y, y * y];
        let d2 = [x, y, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                s1[i][j] += d1[i] * d1[j];
                s2[i][j] += d1[i] * d2[j];
                s3[i][j] += d2[i] * d2[j];
            }
        }
    }
    let s3_inv = mat3_inv(&s3).ok_or(FitError::DegenerateFit)?;
    // T = -S3⁻¹ S2ᵀ
    let mut t = mat3_mul(&s3_inv, &transpose(&s2));
    t.iter_mut().flatten().for_each(|v| *v = -*v);
    let s2t = mat3_mul(&s2, &t);
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = s1[i][j] + s2t[i][j];
        }
    }
    // premultiply by inverse of the ellipse constraint matrix
    let reduced: M3 = [
        [m[2][0] / 2.0, m[2][1] / 2.0, m[2][2] / 2.0],
        [-m[1][0], -m[1][1], -m[1][2]],
        [m[0][0] / 2.0, m[0][1] / 2.0, m[0][2] / 2.0],
    ];
    let tr = reduced[0][0] + reduced[1][1] + reduced[2][2];
    let minor_sum = reduced[0][0] * reduced[1][1] - reduced[0][1] * reduced[1][0]
        + reduced[0][0] * reduced[2][2]
        - reduced[0][2] * reduced[2][0]
        + reduced[1][1] * reduced[2][2]
        - reduced[1][2] * reduced[2][1];
    let det = reduced[0][0] * (reduced[1][1] * reduced[2][2] - reduced[1][2] * reduced[2][1])
        - reduced[0][1] * (reduced[1][0] * reduced[2][2] - reduced[1][2] * reduced[2][0])
        + reduced[0][2] * (reduced[1][0] * reduced[2][1] - reduced[1][1] * reduced[2][0]);
    let mut best: Option<([f64; 3], f64)> = None;
    for lambda in real_cubic_roots(-tr, minor_sum, -det) {
        let Some(v) = null_vector(&reduced, lambda) else {
            continue;
        };
        let cond = 4.0 * v[0] * v[2] - v[1] * v[1];
        if cond > 0.0 && best.is_none_or(|(_, l)| libm::fabs(lambda) < libm::fabs(l)) {
            best = Some((v, lambda));
        }
    }
    let (a1, _) = best.ok_or(FitError::DegenerateFit)?;
    let mut a2 = [0.0; 3];
    for i in 0..3 {
        a2[i] = (0..3).map(|k| t[i][k] * a1[k]).sum();
    }
    let local = Conic([a1[0], a1[1], a1[2], a2[0], a2[1], a2[2]]).to_ellipse()?;
    Ok(EllipseParams::canonical(
        mx + local.cx * spread,
        my + local.cy * spread,
        local.a * spread,
        local.b * spread,
        local.theta,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn ellipse_points(e: &EllipseParams, n: usize) -> Vec<(f64, f64)> {
        let (s, c) = libm::sincos(e.theta);
        (0..n)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / n as f64;
                let (u, v) = (e.a * libm::cos(t), e.b * libm::sin(t));
                (e.cx + u * c - v * s, e.cy + u * s + v * c)
            })
            .collect()
    }

    #[test]
    fn circle_fit_is_exact_and_canonical() {
        let circle = EllipseParams::canonical(32.0, 32.0, 10.0, 10.0, 0.0);
        let fit = fit_ellipse(&ellipse_points(&circle, 40)).unwrap();
        assert!((fit.cx - 32.0).abs() < 0.5 && (fit.cy - 32.0).abs() < 0.5);
        assert!((fit.a - 10.0).abs() < 0.5 && (fit.b - 10.0).abs() < 0.5);
        assert_eq!(fit.theta, 0.0);
    }

    #[test]
    fn exact_points_recover_rotated_ellipse() {
        let e = EllipseParams::canonical(40.3, 51.7, 23.0, 9.5, 2.2);
        let fit = fit_ellipse(&ellipse_points(&e, 7)).unwrap();
        assert!((fit.cx - e.cx).abs() < 1e-6);
        assert!((fit.cy - e.cy).abs() < 1e-6);
        assert!((fit.a - e.a).abs() < 1e-6);
        assert!((fit.b - e.b).abs() < 1e-6);
        assert!(fit.theta_distance(&e) < 1e-6);
    }

    #[test]
    fn too_few_and_collinear_points() {
        let pts = [(0.0, 0.0), (1.0, 1.0), (2.0, 0.5), (3.0, 3.0)];
        assert_eq!(fit_ellipse(&pts), Err(FitError::TooFewPoints(4)));
        let line: Vec<_> = (0..20).map(|i| (i as f64, 2.0 * i as f64 + 1.0)).collect();
        assert_eq!(fit_ellipse(&line), Err(FitError::DegenerateFit));
    }

    #[test]
    fn rasterized_ellipse_round_trip() {
        // a=20, b=10, θ=0.5 at several centres; fit on crack-edge points
        let mut r = rng::seeded(11);
        for _ in 0..50 {
            let e = EllipseParams::canonical(
                r.random_range(40.0..88.0),
                r.random_range(40.0..88.0),
                20.0,
                10.0,
                0.5,
            );
            let mask = rasterize_filled_ellipse(&e, 128, 128);
            let fit = fit_ellipse(&crack_edge_points(&mask)).unwrap();
            assert!((fit.cx - e.cx).abs() <= 1.0, "{fit:?} vs {e:?}");
            assert!((fit.cy - e.cy).abs() <= 1.0);
            assert!((fit.a - e.a).abs() <= 2.0);
            assert!((fit.b - e.b).abs() <= 2.0);
            assert!(fit.theta_distance(&e) <= 0.05);
        }
    }

    #[test]
    fn tiny_disk_and_clipping() {
        let unit = EllipseParams::canonical(10.0, 10.0, 1.0, 1.0, 0.0);
        let n = rasterize_filled_ellipse(&unit, 20, 20).count();
        assert!((3..=5).contains(&n), "{n}");
        let off = EllipseParams::canonical(2.0, 30.0, 12.0, 6.0, 0.3);
        let m = rasterize_filled_ellipse(&off, 32, 32);
        assert!(m.count() > 0);
        assert!(m.count() < (off.area() as usize));
    }

    #[test]
    fn filled_area_matches_analytic() {
        let mut r = rng::seeded(5);
        for _ in 0..40 {
            let b = r.random_range(8.0..30.0);
            let a = b + r.random_range(0.0..12.0);
            let e = EllipseParams::canonical(64.0, 64.0, a, b, r.random_range(0.0..PI));
            let count = rasterize_filled_ellipse(&e, 128, 128).count() as f64;
            assert!((count - e.area()).abs() / e.area() < 0.05);
        }
    }

    #[test]
    fn canonical_swaps_axes() {
        let e = EllipseParams::canonical(0.0, 0.0, 5.0, 9.0, 0.25);
        assert_eq!((e.a, e.b), (9.0, 5.0));
        assert!((e.theta - (0.25 + PI / 2.0)).abs() < 1e-12);
        let w = EllipseParams::canonical(0.0, 0.0, 9.0, 5.0, -0.25);
        assert!((w.theta - (PI - 0.25)).abs() < 1e-12);
    }

    #[test]
    fn cubic_roots() {
        // (x-1)(x-2)(x-3) = x³ - 6x² + 11x - 6
        let mut r = real_cubic_roots(-6.0, 11.0, -6.0);
        r.sort_by(f64::total_cmp);
        for (got, want) in r.iter().zip([1.0, 2.0, 3.0]) {
            assert!((got - want).abs() < 1e-10);
        }
        let single = real_cubic_roots(0.0, 1.0, -2.0); // x³ + x - 2 has root 1
        assert_eq!(single.len(), 1);
        assert!((single[0] - 1.0).abs() < 1e-10);
    }
}
