//! 2-D convolution via im2col + GEMM.

use alloc::vec;
use alloc::vec::Vec;

use super::{Module, Param, ParamKind, ParamMut, Tensor};

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    /// out_c × (in_c·k·k)
    pub weight: Param,
    pub bias: Param,
    input: Option<Tensor>,
    scratch: Vec<f32>,
}

impl Conv2d {
    pub fn new(in_c: usize, out_c: usize, k: usize, stride: usize, pad: usize, seed: u64) -> Self {
        let fan_in = in_c * k * k;
        Self {
            in_c,
            out_c,
            k,
            stride,
            pad,
            weight: Param::he(out_c * fan_in, fan_in, seed),
            bias: Param::zeros(out_c),
            input: None,
            scratch: Vec::new(),
        }
    }

    /// 3×3, stride 1, same padding.
    pub fn same3(in_c: usize, out_c: usize, seed: u64) -> Self {
        Self::new(in_c, out_c, 3, 1, 1, seed)
    }

    pub fn pointwise(in_c: usize, out_c: usize, seed: u64) -> Self {
        Self::new(in_c, out_c, 1, 1, 0, seed)
    }

    /// Zero weights and bias (used for residual-branch outputs).
    pub fn zero_init(mut self) -> Self {
        self.weight.value.iter_mut().for_each(|v| *v = 0.0);
        self
    }

    /// Scale the initial weights.
    pub fn scaled(mut self, s: f32) -> Self {
        self.weight.value.iter_mut().for_each(|v| *v *= s);
        self
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.weight.frozen = frozen;
        self.bias.frozen = frozen;
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn cols(&self) -> usize {
        self.in_c * self.k * self.k
    }

    /// Forward pass that caches the input for [`Conv2d::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let mut scratch = core::mem::take(&mut self.scratch);
        let out = self.run(x, &mut scratch);
        self.scratch = scratch;
        self.input = Some(x.clone());
        out
    }

    /// Forward pass without caching.
    pub fn infer(&self, x: &Tensor) -> Tensor {
        let mut scratch = Vec::new();
        self.run(x, &mut scratch)
    }

    fn run(&self, x: &Tensor, col: &mut Vec<f32>) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (ho, wo) = self.out_hw(x.h, x.w);
        let hw = ho * wo;
        let mut out = Tensor::zeros(x.n, self.out_c, ho, wo);
        let ckk = self.cols();
        if !self.is_pointwise() {
            col.resize(ckk * hw, 0.0);
        }
        for i in 0..x.n {
            let src: &[f32] = if self.is_pointwise() {
                x.item(i)
            } else {
                im2col(x.item(i), x.c, x.h, x.w, self.k, self.stride, self.pad, ho, wo, col);
                col
            };
            let dst = out.item_mut(i);
            for (oc, row) in dst.chunks_mut(hw).enumerate() {
                row.iter_mut().for_each(|v| *v = self.bias.value[oc]);
            }
            sgemm(
                self.out_c,
                ckk,
                hw,
                &self.weight.value,
                (ckk as isize, 1),
                src,
                (hw as isize, 1),
                1.0,
                dst,
            );
        }
        out
    }

    /// Accumulate parameter gradients (unless frozen) and optionally return
    /// the gradient with respect to the cached input.
    pub fn backward(&mut self, gout: &Tensor, need_input_grad: bool) -> Option<Tensor> {
        let x = self.input.take().expect("conv backward without forward");
        let (ho, wo) = (gout.h, gout.w);
        let hw = ho * wo;
        let ckk = self.cols();
        let mut gin = need_input_grad.then(|| Tensor::zeros_like(&x));
        let train_params = !self.weight.frozen;
        let mut col = core::mem::take(&mut self.scratch);
        let mut gcol = vec![0.0; if self.is_pointwise() { 0 } else { ckk * hw }];
        for i in 0..x.n {
            let g = gout.item(i);
            if train_params {
                let src: &[f32] = if self.is_pointwise() {
                    x.item(i)
                } else {
                    col.resize(ckk * hw, 0.0);
                    im2col(x.item(i), x.c, x.h, x.w, self.k, self.stride, self.pad, ho, wo, &mut col);
                    &col
                };
                // gW += gout · colᵀ
                sgemm(self.out_c, hw, ckk, g, (hw as isize, 1), src, (1, hw as isize), 1.0, &mut self.weight.grad);
                for (oc, row) in g.chunks(hw).enumerate() {
                    self.bias.grad[oc] += row.iter().sum::<f32>();
                }
            }
            if let Some(gin) = gin.as_mut() {
                if self.is_pointwise() {
                    // gin = Wᵀ · gout
                    sgemm(ckk, self.out_c, hw, &self.weight.value, (1, ckk as isize), g, (hw as isize, 1), 0.0, gin.item_mut(i));
                } else {
                    sgemm(ckk, self.out_c, hw, &self.weight.value, (1, ckk as isize), g, (hw as isize, 1), 0.0, &mut gcol);
                    col2im(&gcol, x.c, x.h, x.w, self.k, self.stride, self.pad, ho, wo, gin.item_mut(i));
                }
            }
        }
        self.scratch = col;
        gin
    }
}

impl Module for Conv2d {
    fn visit(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        f(self.weight.view(ParamKind::Base));
        f(self.bias.view(ParamKind::Base));
    }
}

/// Row-major C (m×n) = A·B + beta·C, A and B given with (row, col) strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_strides: (isize, isize),
    b: &[f32],
    b_strides: (isize, isize),
    beta: f32,
    c: &mut [f32],
) {
    use crate::lora::Scalar;
    f32::gemm(m, k, n, 1.0, a, a_strides.0, a_strides.1, b, b_strides.0, b_strides.1, beta, c, n as isize, 1);
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize, col: &mut [f32]) {
    let hw = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut col[((ci * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if s == 1 {
                        // valid ox satisfy 0 <= ox + kx - p < w
                        let lo = p.saturating_sub(kx).min(wo);
                        let hi = (w + p).saturating_sub(kx).min(wo).max(lo);
                        dst[..lo].iter_mut().for_each(|v| *v = 0.0);
                        dst[hi..].iter_mut().for_each(|v| *v = 0.0);
                        if hi > lo {
                            let start = lo + kx - p;
                            dst[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        }
                    } else {
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * s + kx) as isize - p as isize;
                            *d = if ix < 0 || ix >= w as isize { 0.0 } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(col: &[f32], c: usize, h: usize, w: usize, k: usize, s: usize, p: usize, ho: usize, wo: usize, x: &mut [f32]) {
    let hw = ho * wo;
    x.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = &col[((ci * k + ky) * k + kx) * hw..][..hw];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut x[ci * h * w + iy as usize * w..][..w];
                    let src = &row[oy * wo..(oy + 1) * wo];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * s + kx) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}
