//! SAM-lite: frozen conv pyramid encoder, frozen box-prompt encoder and a
//! trainable U-shaped mask decoder.

use alloc::vec;
use alloc::vec::Vec;

use super::prompt::BoxPrompt;
use super::SegError;
use crate::image::{BinaryMask, GrayImage};
use crate::nn::act::{fast_exp, silu, upsample2x, upsample2x_backward, Silu};
use crate::nn::conv::Conv2d;
use crate::nn::{Module, Param, ParamKind, ParamMut, Tensor};
use crate::rng::{self, Fnv64};

/// Per-pixel box-relative features fed to the prompt embedding.
pub const PROMPT_FEATURES: usize = 6;
/// Box-relative coordinates are clamped to this magnitude.
const UV_CLAMP: f32 = 4.0;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SegConfig {
    /// Encoder widths at strides 1, 2 and 4.
    pub enc_channels: [usize; 3],
    pub prompt_dim: usize,
    /// Decoder widths at strides 4, 2 and 1.
    pub dec_channels: [usize; 3],
    /// Initial scale of the box prior logit.
    pub prior_gain: f32,
    pub seed: u64,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            enc_channels: [8, 16, 32],
            prompt_dim: 8,
            dec_channels: [32, 16, 8],
            prior_gain: 4.0,
            seed: 0,
        }
    }
}

fn tanh(x: f32) -> f32 {
    1.0 - 2.0 / (1.0 + fast_exp(2.0 * x))
}

fn silu_in_place(t: &mut Tensor) {
    t.data.iter_mut().for_each(|v| *v = silu(*v));
}

fn concat3(a: &Tensor, b: &Tensor, c: &Tensor) -> Tensor {
    Tensor::concat_channels(&Tensor::concat_channels(a, b), c)
}

#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub c1: Conv2d,
    pub c2: Conv2d,
    pub c3: Conv2d,
}

impl ImageEncoder {
    fn new(ch: [usize; 3], seed: u64) -> Self {
        let mut e = Self {
            c1: Conv2d::same3(1, ch[0], rng::derive(seed, 1)),
            c2: Conv2d::new(ch[0], ch[1], 3, 2, 1, rng::derive(seed, 2)),
            c3: Conv2d::new(ch[1], ch[2], 3, 2, 1, rng::derive(seed, 3)),
        };
        e.c1.bias.value.iter_mut().enumerate().for_each(|(i, b)| *b = 0.1 * (i % 3) as f32 - 0.1);
        e.visit(&mut |p| *p.frozen = true);
        e
    }

    /// Features at strides 1, 2 and 4 for a batch of centred images.
    pub fn encode(&self, x: &Tensor) -> [Tensor; 3] {
        let mut f1 = self.c1.infer(x);
        silu_in_place(&mut f1);
        let mut f2 = self.c2.infer(&f1);
        silu_in_place(&mut f2);
        let mut f3 = self.c3.infer(&f2);
        silu_in_place(&mut f3);
        [f1, f2, f3]
    }
}

impl Module for ImageEncoder {
    fn visit(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.c1.visit(f);
        self.c2.visit(f);
        self.c3.visit(f);
    }
}

/// Box prompt encoder. The box corners (normalised to [0,1]) are expanded per
/// pixel into box-relative coordinates `u, v` (±1 on the box edges), mapped to
/// `[u, v, u², v², u²+v², 1]` and embedded by a seeded linear map + tanh.
/// It also emits the prior logit `gain·(1 − u² − v²)`: the ellipse inscribed
/// in the box.
#[derive(Debug, Clone)]
pub struct PromptEncoder {
    pub dim: usize,
    /// dim × PROMPT_FEATURES
    pub weight: Param,
    pub bias: Param,
    pub prior_gain: Param,
}

impl PromptEncoder {
    fn new(dim: usize, gain: f32, seed: u64) -> Self {
        let mut weight = Param::zeros(dim * PROMPT_FEATURES);
        rng::fill_normal(&mut rng::seeded(seed), &mut weight.value);
        let mut bias = Param::zeros(dim);
        rng::fill_normal(&mut rng::seeded(rng::derive(seed, 1)), &mut bias.value);
        bias.value.iter_mut().for_each(|b| *b *= 0.1);
        let mut p = Self {
            dim,
            weight,
            bias,
            prior_gain: Param::new(vec![gain]),
        };
        p.visit(&mut |q| *q.frozen = true);
        p
    }

    fn uv(b: &BoxPrompt, x: f32, y: f32) -> (f32, f32) {
        let [x0, y0, x1, y1] = [b.x0, b.y0, b.x1, b.y1].map(|v| v as f32);
        let u = (x - 0.5 * (x0 + x1)) / (0.5 * (x1 - x0));
        let v = (y - 0.5 * (y0 + y1)) / (0.5 * (y1 - y0));
        (u.clamp(-UV_CLAMP, UV_CLAMP), v.clamp(-UV_CLAMP, UV_CLAMP))
    }

    /// Dense embedding (dim × h/s × w/s) sampled at the centres of stride-`s` cells.
    pub fn embed(&self, b: &BoxPrompt, height: usize, width: usize, stride: usize, out: &mut [f32]) {
        let (h, w) = (height / stride, width / stride);
        let hw = h * w;
        debug_assert_eq!(out.len(), self.dim * hw);
        let s = stride as f32;
        for yy in 0..h {
            for xx in 0..w {
                let (u, v) = Self::uv(b, (xx as f32 + 0.5) * s, (yy as f32 + 0.5) * s);
                let f = [u, v, u * u, v * v, u * u + v * v, 1.0];
                for d in 0..self.dim {
                    let row = &self.weight.value[d * PROMPT_FEATURES..(d + 1) * PROMPT_FEATURES];
                    let z = self.bias.value[d] + row.iter().zip(&f).map(|(a, b)| a * b).sum::<f32>();
                    out[d * hw + yy * w + xx] = tanh(z);
                }
            }
        }
    }

    /// Prior logit at full resolution.
    pub fn prior(&self, b: &BoxPrompt, height: usize, width: usize, out: &mut [f32]) {
        let g = self.prior_gain.value[0];
        for y in 0..height {
            for x in 0..width {
                let (u, v) = Self::uv(b, x as f32 + 0.5, y as f32 + 0.5);
                out[y * width + x] = g * (1.0 - u * u - v * v);
            }
        }
    }
}

impl Module for PromptEncoder {
    fn visit(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        f(self.weight.view(ParamKind::Base));
        f(self.bias.view(ParamKind::Base));
        f(self.prior_gain.view(ParamKind::Base));
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    pub a1: Conv2d,
    pub a2: Conv2d,
    pub b1: Conv2d,
    pub c1: Conv2d,
    pub head: Conv2d,
    acts: [Silu; 4],
    split: [usize; 2],
}

impl MaskDecoder {
    fn new(enc: [usize; 3], p: usize, dec: [usize; 3], seed: u64) -> Self {
        let s = |t| rng::derive(seed, t);
        Self {
            a1: Conv2d::same3(enc[2] + p, dec[0], s(1)),
            a2: Conv2d::same3(dec[0], dec[0], s(2)),
            b1: Conv2d::same3(dec[0] + enc[1] + p, dec[1], s(3)),
            c1: Conv2d::same3(dec[1] + enc[0] + p, dec[2], s(4)),
            head: Conv2d::pointwise(dec[2], 1, s(5)).zero_init(),
            acts: Default::default(),
            split: [dec[0], dec[1]],
        }
    }

    /// Training forward; caches activations.
    fn forward(&mut self, f: &[Tensor; 3], p: &[Tensor; 3]) -> Tensor {
        let mut a = self.a1.forward(&Tensor::concat_channels(&f[2], &p[2]));
        self.acts[0].forward_slice(&mut a.data);
        let mut a = self.a2.forward(&a);
        self.acts[1].forward_slice(&mut a.data);
        let mut b = self.b1.forward(&concat3(&upsample2x(&a), &f[1], &p[1]));
        self.acts[2].forward_slice(&mut b.data);
        let mut c = self.c1.forward(&concat3(&upsample2x(&b), &f[0], &p[0]));
        self.acts[3].forward_slice(&mut c.data);
        self.head.forward(&c)
    }

    fn infer(&self, f: &[Tensor; 3], p: &[Tensor; 3]) -> Tensor {
        let mut a = self.a1.infer(&Tensor::concat_channels(&f[2], &p[2]));
        silu_in_place(&mut a);
        let mut a = self.a2.infer(&a);
        silu_in_place(&mut a);
        let mut b = self.b1.infer(&concat3(&upsample2x(&a), &f[1], &p[1]));
        silu_in_place(&mut b);
        let mut c = self.c1.infer(&concat3(&upsample2x(&b), &f[0], &p[0]));
        silu_in_place(&mut c);
        self.head.infer(&c)
    }

    fn backward(&mut self, g: &Tensor) {
        let mut g = self.head.backward(g, true).expect("input grad");
        self.acts[3].backward_slice(&mut g.data);
        let g = self.c1.backward(&g, true).expect("input grad");
        let mut g = upsample2x_backward(&g.split_channels(self.split[1]).0);
        self.acts[2].backward_slice(&mut g.data);
        let g = self.b1.backward(&g, true).expect("input grad");
        let mut g = upsample2x_backward(&g.split_channels(self.split[0]).0);
        self.acts[1].backward_slice(&mut g.data);
        let mut g = self.a2.backward(&g, true).expect("input grad");
        self.acts[0].backward_slice(&mut g.data);
        self.a1.backward(&g, false);
    }
}

impl Module for MaskDecoder {
    fn visit(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.a1.visit(f);
        self.a2.visit(f);
        self.b1.visit(f);
        self.c1.visit(f);
        self.head.visit(f);
    }
}

/// Frozen encoder output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    pub height: usize,
    pub width: usize,
    pub levels: [Vec<f32>; 3],
}

#[derive(Debug, Clone)]
pub struct SegModel {
    pub config: SegConfig,
    pub encoder: ImageEncoder,
    pub prompt: PromptEncoder,
    pub decoder: MaskDecoder,
}

/// Logits and the thresholded mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f32>,
    pub mask: BinaryMask,
}

fn component_checksum<M: Module>(m: &mut M) -> u64 {
    let mut h = Fnv64::default();
    m.visit(&mut |p| h.write_f32s(p.value));
    h.finish()
}

impl SegModel {
    pub fn new(config: SegConfig) -> Self {
        let s = config.seed;
        Self {
            encoder: ImageEncoder::new(config.enc_channels, rng::derive(s, 0xE)),
            prompt: PromptEncoder::new(config.prompt_dim, config.prior_gain, rng::derive(s, 0xB)),
            decoder: MaskDecoder::new(config.enc_channels, config.prompt_dim, config.dec_channels, rng::derive(s, 0xD)),
            config,
        }
    }

    pub fn check_size(height: usize, width: usize) -> Result<(), SegError> {
        if height < 8 || width < 8 || height % 4 != 0 || width % 4 != 0 {
            return Err(SegError::UnsupportedSize { height, width });
        }
        Ok(())
    }

    pub fn encoder_checksum(&self) -> u64 {
        component_checksum(&mut self.encoder.clone())
    }

    pub fn prompt_checksum(&self) -> u64 {
        component_checksum(&mut self.prompt.clone())
    }

    pub fn decoder_checksum(&self) -> u64 {
        component_checksum(&mut self.decoder.clone())
    }

    pub fn encode(&self, image: &GrayImage) -> Result<ImageFeatures, SegError> {
        let (h, w) = (image.height(), image.width());
        Self::check_size(h, w)?;
        let mut x = Tensor::from_vec(1, 1, h, w, image.to_unit());
        x.data.iter_mut().for_each(|v| *v -= 0.5);
        let [a, b, c] = self.encoder.encode(&x);
        Ok(ImageFeatures {
            height: h,
            width: w,
            levels: [a.data, b.data, c.data],
        })
    }

    fn stack(&self, feats: &[&ImageFeatures], boxes: &[BoxPrompt]) -> Result<([Tensor; 3], [Tensor; 3], Vec<f32>), SegError> {
        let first = feats.first().ok_or(SegError::EmptyDataset)?;
        let (h, w) = (first.height, first.width);
        let n = feats.len();
        if boxes.len() != n || feats.iter().any(|f| f.height != h || f.width != w) {
            return Err(SegError::ShapeMismatch);
        }
        for b in boxes {
            b.check_in(h, w)?;
        }
        let enc = self.config.enc_channels;
        let pd = self.config.prompt_dim;
        let f: [Tensor; 3] = core::array::from_fn(|l| {
            let s = 1 << l;
            let mut t = Tensor::zeros(n, enc[l], h / s, w / s);
            for (i, ft) in feats.iter().enumerate() {
                t.item_mut(i).copy_from_slice(&ft.levels[l]);
            }
            t
        });
        let p: [Tensor; 3] = core::array::from_fn(|l| {
            let s = 1 << l;
            let mut t = Tensor::zeros(n, pd, h / s, w / s);
            for (i, b) in boxes.iter().enumerate() {
                self.prompt.embed(b, h, w, s, t.item_mut(i));
            }
            t
        });
        let mut prior = vec![0.0; n * h * w];
        for (i, b) in boxes.iter().enumerate() {
            self.prompt.prior(b, h, w, &mut prior[i * h * w..(i + 1) * h * w]);
        }
        Ok((f, p, prior))
    }

    /// Training forward over a batch: logits (n×1×H×W), activations cached.
    pub fn forward_train(&mut self, feats: &[&ImageFeatures], boxes: &[BoxPrompt]) -> Result<Tensor, SegError> {
        let (f, p, prior) = self.stack(feats, boxes)?;
        let mut out = self.decoder.forward(&f, &p);
        out.add_assign(&Tensor::from_vec(out.n, 1, out.h, out.w, prior));
        Ok(out)
    }

    /// Accumulate decoder gradients from d(loss)/d(logits).
    pub fn backward(&mut self, grad_logits: &Tensor) {
        self.decoder.backward(grad_logits);
    }

    pub fn logits_from_features(&self, feats: &ImageFeatures, b: &BoxPrompt) -> Result<Vec<f32>, SegError> {
        let (f, p, prior) = self.stack(&[feats], core::slice::from_ref(b))?;
        let mut out = self.decoder.infer(&f, &p);
        out.data.iter_mut().zip(&prior).for_each(|(o, &q)| *o += q);
        Ok(out.data)
    }

    pub fn predict_features(&self, feats: &ImageFeatures, b: &BoxPrompt) -> Result<Prediction, SegError> {
        let logits = self.logits_from_features(feats, b)?;
        // sigmoid(z) > 0.5 exactly when z > 0
        let mask = BinaryMask::new(feats.height, feats.width, logits.iter().map(|&z| u8::from(z > 0.0)).collect())
            .map_err(|_| SegError::ShapeMismatch)?;
        Ok(Prediction { logits, mask })
    }

    /// Logits for one image and box; mask = sigmoid(logits) > 0.5.
    pub fn predict(&self, image: &GrayImage, b: &BoxPrompt) -> Result<Prediction, SegError> {
        b.check_in(image.height(), image.width())?;
        self.predict_features(&self.encode(image)?, b)
    }
}

impl Module for SegModel {
    fn visit(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.encoder.visit(f);
        self.prompt.visit(f);
        self.decoder.visit(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ellipse::{rasterize_filled_ellipse, EllipseParams};
    use crate::nn::tests_support::check_param_grads;
    use crate::segmentor::metrics::dsc;

    fn image(h: usize, seed: u64) -> GrayImage {
        let mut v = vec![0.0f32; h * h];
        rng::fill_normal(&mut rng::seeded(seed), &mut v);
        GrayImage::from_unit(h, h, &v.iter().map(|x| 0.5 + 0.2 * x).collect::<Vec<_>>()).unwrap()
    }

    fn small() -> SegModel {
        SegModel::new(SegConfig {
            enc_channels: [2, 3, 4],
            prompt_dim: 2,
            dec_channels: [4, 3, 2],
            prior_gain: 4.0,
            seed: 3,
        })
    }

    #[test]
    fn output_matches_input_size_and_is_deterministic() {
        let m = SegModel::new(SegConfig::default());
        let img = image(32, 1);
        let b = BoxPrompt::new(4, 6, 20, 30);
        let p = m.predict(&img, &b).unwrap();
        assert_eq!(p.logits.len(), 32 * 32);
        assert_eq!((p.mask.height(), p.mask.width()), (32, 32));
        assert_eq!(p, m.predict(&img, &b).unwrap());
    }

    #[test]
    fn untrained_model_predicts_the_inscribed_ellipse() {
        let m = SegModel::new(SegConfig::default());
        let b = BoxPrompt::new(10, 20, 50, 44);
        let p = m.predict(&image(64, 2), &b).unwrap();
        let e = rasterize_filled_ellipse(&EllipseParams::canonical(29.5, 31.5, 20.0, 12.0, 0.0), 64, 64);
        let d = dsc(&p.mask, &e).unwrap();
        assert!(d > 0.97, "{d}");
    }

    #[test]
    fn bad_inputs() {
        let m = small();
        let img = image(16, 1);
        assert_eq!(m.predict(&img, &BoxPrompt::new(3, 3, 17, 9)), Err(SegError::BoxOutOfBounds));
        assert_eq!(m.predict(&img, &BoxPrompt::new(5, 3, 5, 9)), Err(SegError::BoxOutOfBounds));
        let odd = image(18, 1);
        assert!(matches!(m.predict(&odd, &BoxPrompt::new(1, 1, 4, 4)), Err(SegError::UnsupportedSize { .. })));
    }

    #[test]
    fn only_the_decoder_is_trainable() {
        let mut m = small();
        let dec = m.decoder.param_count();
        assert_eq!(m.trainable_count(), dec);
        assert_eq!(m.encoder.trainable_count(), 0);
        assert_eq!(m.prompt.trainable_count(), 0);
    }

    #[test]
    fn decoder_gradients() {
        let mut m = small();
        rng::fill_normal(&mut rng::seeded(4), &mut m.decoder.head.weight.value);
        let feats = [m.encode(&image(16, 5)).unwrap(), m.encode(&image(16, 6)).unwrap()];
        let boxes = [BoxPrompt::new(2, 3, 12, 14), BoxPrompt::new(0, 0, 9, 16)];
        // the input tensor is a dummy; the closure feeds the cached features
        let x = Tensor::zeros(1, 1, 1, 1);
        check_param_grads(
            &mut m,
            &x,
            |m, _| m.forward_train(&[&feats[0], &feats[1]], &boxes).unwrap(),
            |m, g| m.backward(g),
        );
    }

    #[test]
    fn directional_gradient_relative_error() {
        let mut m = small();
        rng::fill_normal(&mut rng::seeded(4), &mut m.decoder.head.weight.value);
        let feats = m.encode(&image(16, 8)).unwrap();
        let b = [BoxPrompt::new(3, 2, 13, 12)];
        let out = m.forward_train(&[&feats], &b).unwrap();
        let mut probe = vec![0.0f32; out.data.len()];
        rng::fill_normal(&mut rng::seeded(10), &mut probe);
        m.zero_grad();
        m.backward(&Tensor::from_vec(1, 1, 16, 16, probe.clone()));
        let mut dir = Vec::new();
        let mut r = rng::seeded(11);
        let mut analytic = 0.0f64;
        m.decoder.visit(&mut |p| {
            let mut d = vec![0.0f32; p.value.len()];
            rng::fill_normal(&mut r, &mut d);
            analytic += d.iter().zip(p.grad.iter()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>();
            dir.push(d);
        });
        let loss_at = |m: &mut SegModel, h: f32| {
            let mut k = 0;
            m.decoder.visit(&mut |p| {
                p.value.iter_mut().zip(&dir[k]).for_each(|(v, d)| *v += h * d);
                k += 1;
            });
            let o = m.forward_train(&[&feats], &b).unwrap();
            o.data.iter().zip(&probe).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>()
        };
        let h = 1e-3f32;
        let up = loss_at(&mut m, h);
        let dn = loss_at(&mut m, -2.0 * h);
        let fd = (up - dn) / (2.0 * f64::from(h));
        assert!((fd - analytic).abs() / analytic.abs() <= 1e-2, "fd {fd} vs {analytic}");
    }

    #[test]
    fn train_and_infer_paths_agree() {
        let mut m = small();
        rng::fill_normal(&mut rng::seeded(4), &mut m.decoder.head.weight.value);
        let f = m.encode(&image(16, 7)).unwrap();
        let b = BoxPrompt::new(2, 3, 12, 14);
        let a = m.forward_train(&[&f], &[b]).unwrap();
        let c = m.logits_from_features(&f, &b).unwrap();
        for (x, y) in a.data.iter().zip(&c) {
            assert!((x - y).abs() < 1e-5);
        }
    }
}
