//! Parameter-free layers.

use alloc::vec::Vec;

use super::{Module, ParamMut, Tensor};

/// `e^x` via a range-reduced polynomial; relative error about 1e-6 (growing with |x|) and
/// written branch-free so slice loops vectorise.
#[inline]
pub fn fast_exp(x: f32) -> f32 {
    const MAGIC: f32 = 12_582_912.0; // 1.5·2^23: adding it rounds to an integer
    let t = x.clamp(-87.0, 88.0) * core::f32::consts::LOG2_E;
    let k = (t + MAGIC) - MAGIC;
    let y = (t - k) * core::f32::consts::LN_2;
    let p = 1.0 + y * (1.0 + y * (0.5 + y * (1.0 / 6.0 + y * (1.0 / 24.0 + y * (1.0 / 120.0 + y * (1.0 / 720.0))))));
    p * f32::from_bits(((k as i32 + 127) as u32) << 23)
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + fast_exp(-x))
}

pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// `x·σ(x)`
#[derive(Debug, Clone, Default)]
pub struct Silu {
    input: Vec<f32>,
}

impl Silu {
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut out = x.clone();
        self.input = self.forward_vec(&mut out.data);
        out
    }

    /// In-place on a flat buffer; returns the pre-activation copy it cached.
    fn forward_vec(&mut self, v: &mut [f32]) -> Vec<f32> {
        let saved = v.to_vec();
        v.iter_mut().for_each(|x| *x = silu(*x));
        saved
    }

    pub fn forward_slice(&mut self, v: &mut [f32]) {
        self.input = self.forward_vec(v);
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let mut g = gout.clone();
        self.backward_slice(&mut g.data);
        g
    }

    pub fn backward_slice(&mut self, g: &mut [f32]) {
        assert_eq!(g.len(), self.input.len(), "silu backward without forward");
        g.iter_mut().zip(&self.input).for_each(|(g, &x)| *g *= silu_grad(x));
    }
}

impl Module for Silu {
    fn visit(&mut self, _f: &mut dyn FnMut(ParamMut<'_>)) {}
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample2x(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut out = Tensor::zeros(x.n, x.c, h2, w2);
    for (src, dst) in x.data.chunks(x.h * x.w).zip(out.data.chunks_mut(h2 * w2)) {
        for y in 0..h2 {
            let row = &src[(y / 2) * x.w..][..x.w];
            for (xx, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                *d = row[xx / 2];
            }
        }
    }
    out
}

/// Adjoint of [`upsample2x`]: sums each 2×2 block.
pub fn upsample2x_backward(g: &Tensor) -> Tensor {
    let (h, w) = (g.h / 2, g.w / 2);
    let mut out = Tensor::zeros(g.n, g.c, h, w);
    for (src, dst) in g.data.chunks(g.h * g.w).zip(out.data.chunks_mut(h * w)) {
        for y in 0..g.h {
            for x in 0..g.w {
                dst[(y / 2) * w + x / 2] += src[y * g.w + x];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests_support::check_input_grad;
    use crate::rng;

    #[test]
    fn fast_exp_accuracy() {
        let mut x = -80.0f32;
        while x < 80.0 {
            let (a, b) = (fast_exp(x), libm::expf(x));
            assert!(((a - b) / b).abs() < 1e-6 * (1.0 + x.abs() / 10.0), "{x}: {a} vs {b}");
            x += 0.0137;
        }
        assert_eq!(fast_exp(-200.0), fast_exp(-87.0));
    }

    #[test]
    fn silu_values() {
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(1.0) - 0.731_058_6).abs() < 1e-6);
        assert!((silu(-20.0)).abs() < 1e-6);
    }

    #[test]
    fn silu_gradient() {
        let mut x = Tensor::zeros(1, 2, 4, 4);
        rng::fill_normal(&mut rng::seeded(5), &mut x.data);
        x.data.iter_mut().for_each(|v| *v *= 3.0);
        check_input_grad(&mut Silu::default(), &x, |m, x| m.forward(x), |m, g| m.backward(g));
    }

    #[test]
    fn upsample_adjoint() {
        let mut x = Tensor::zeros(2, 3, 4, 5);
        rng::fill_normal(&mut rng::seeded(1), &mut x.data);
        let up = upsample2x(&x);
        assert_eq!(up.shape(), [2, 3, 8, 10]);
        assert_eq!(up.data[0], x.data[0]);
        assert_eq!(up.data[2], x.data[1]);
        assert_eq!(up.data[10 + 3], x.data[1]);
        assert_eq!(up.data[20], x.data[5]);
        let mut g = Tensor::zeros_like(&up);
        rng::fill_normal(&mut rng::seeded(2), &mut g.data);
        // <up(x), g> == <x, up^T(g)>
        let lhs: f64 = up.data.iter().zip(&g.data).map(|(a, b)| f64::from(a * b)).sum();
        let back = upsample2x_backward(&g);
        let rhs: f64 = x.data.iter().zip(&back.data).map(|(a, b)| f64::from(a * b)).sum();
        assert!((lhs - rhs).abs() < 1e-3);
    }
}
