//! Compact class-conditional U-Net that predicts the noise in a tri-channel image.

use alloc::vec;
use alloc::vec::Vec;

use super::DiffusionError;
use crate::lora::{LoraAdapter, LoraError};
use crate::nn::act::{upsample2x, upsample2x_backward, Silu};
use crate::nn::attention::AttnBlock;
use crate::nn::conv::Conv2d;
use crate::nn::linear::LoraLinear;
use crate::nn::norm::GroupNorm;
use crate::nn::{Module, Param, ParamKind, ParamMut, Tensor};
use crate::rng;

pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DenoiserConfig {
    pub image_size: usize,
    /// Feature width per resolution level; level `i` runs at `image_size / 2^i`.
    pub channels: Vec<usize>,
    /// Levels at or below this index get no attention.
    pub attn_from_level: usize,
    pub emb_dim: usize,
    pub time_freqs: usize,
    pub groups: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: vec![16, 32, 64, 64],
            attn_from_level: 2,
            emb_dim: 64,
            time_freqs: 32,
            groups: 8,
            classes: 3,
            seed: 0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<(), DiffusionError> {
        let levels = self.channels.len();
        if levels == 0 || self.image_size == 0 {
            return Err(DiffusionError::BadConfig("need at least one level"));
        }
        if self.image_size % (1 << (levels - 1)) != 0 {
            return Err(DiffusionError::BadConfig("image size must halve cleanly at every level"));
        }
        let ok_groups = |c: usize| c % self.groups == 0;
        if self.groups == 0 || !self.channels.iter().all(|&c| ok_groups(c)) {
            return Err(DiffusionError::BadConfig("every channel width must divide into groups"));
        }
        if self.time_freqs % 2 != 0 || self.time_freqs == 0 || self.classes == 0 || self.emb_dim == 0 {
            return Err(DiffusionError::BadConfig("embedding sizes must be positive (freqs even)"));
        }
        Ok(())
    }
}

/// Sinusoidal features of a timestep.
pub fn timestep_features(t: f32, freqs: usize, out: &mut [f32]) {
    let half = freqs / 2;
    for j in 0..half {
        let f = libm::expf(-libm::logf(10_000.0) * j as f32 / half as f32);
        out[j] = libm::sinf(t * f);
        out[half + j] = libm::cosf(t * f);
    }
}

/// GroupNorm → SiLU → conv → +emb → GroupNorm → SiLU → conv, plus a skip path.
#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    act1: Silu,
    conv1: Conv2d,
    proj: LoraLinear,
    norm2: GroupNorm,
    act2: Silu,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    hw: usize,
}

impl ResBlock {
    pub fn new(cin: usize, cout: usize, emb: usize, groups: usize, seed: u64) -> Self {
        let s = |t| rng::derive(seed, t);
        Self {
            norm1: GroupNorm::new(groups, cin),
            act1: Silu::default(),
            conv1: Conv2d::same3(cin, cout, s(1)),
            proj: LoraLinear::new(emb, cout, s(2)),
            norm2: GroupNorm::new(groups, cout),
            act2: Silu::default(),
            conv2: Conv2d::same3(cout, cout, s(3)).zero_init(),
            skip: (cin != cout).then(|| Conv2d::pointwise(cin, cout, s(4))),
            hw: 0,
        }
    }

    pub fn forward(&mut self, x: &Tensor, semb: &[f32]) -> Tensor {
        let h = self.norm1.forward(x);
        let h = self.act1.forward(&h);
        let mut h = self.conv1.forward(&h);
        let e = self.proj.forward(semb);
        self.hw = h.plane_len();
        let (hw, c) = (self.hw, h.c);
        for i in 0..h.n {
            for (ch, plane) in h.item_mut(i).chunks_mut(hw).enumerate() {
                let v = e[i * c + ch];
                plane.iter_mut().for_each(|p| *p += v);
            }
        }
        let h = self.norm2.forward(&h);
        let h = self.act2.forward(&h);
        let mut out = self.conv2.forward(&h);
        match self.skip.as_mut() {
            Some(s) => out.add_assign(&s.forward(x)),
            None => out.add_assign(x),
        }
        out
    }

    /// Returns (dL/dx, dL/dsemb).
    pub fn backward(&mut self, g: &Tensor) -> (Tensor, Vec<f32>) {
        let gh = self.conv2.backward(g, true).expect("input grad");
        let gh = self.act2.backward(&gh);
        let gh = self.norm2.backward(&gh);
        let (hw, c) = (self.hw, gh.c);
        let mut ge = vec![0.0f32; gh.n * c];
        for i in 0..gh.n {
            for (ch, plane) in gh.item(i).chunks(hw).enumerate() {
                ge[i * c + ch] = plane.iter().sum();
            }
        }
        let gsemb = self.proj.backward(&ge);
        let gh = self.conv1.backward(&gh, true).expect("input grad");
        let gh = self.act1.backward(&gh);
        let mut gx = self.norm1.backward(&gh);
        match self.skip.as_mut() {
            Some(s) => gx.add_assign(&s.backward(g, true).expect("input grad")),
            None => gx.add_assign(g),
        }
        (gx, gsemb)
    }
}

impl Module for ResBlock {
    fn visit(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.norm1.visit(f);
        self.conv1.visit(f);
        self.proj.visit(f);
        self.norm2.visit(f);
        self.conv2.visit(f);
        if let Some(s) = self.skip.as_mut() {
            s.visit(f);
        }
    }
}

#[derive(Debug, Clone)]
struct DownLevel {
    res: ResBlock,
    attn: Option<AttnBlock>,
    down: Option<Conv2d>,
}

#[derive(Debug, Clone)]
struct UpLevel {
    level: usize,
    res: ResBlock,
    attn: Option<AttnBlock>,
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    in_conv: Conv2d,
    t1: LoraLinear,
    t_act: Silu,
    t2: LoraLinear,
    class_emb: Param,
    emb_act: Silu,
    down: Vec<DownLevel>,
    up: Vec<UpLevel>,
    out_norm: GroupNorm,
    out_act: Silu,
    out_conv: Conv2d,
    /// Optimizer steps applied so far (0 = untrained).
    pub trained_steps: u64,
    batch_classes: Vec<usize>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self, DiffusionError> {
        config.validate()?;
        let s = |t| rng::derive(config.seed, t);
        let ch = &config.channels;
        let (e, g) = (config.emb_dim, config.groups);
        let levels = ch.len();
        let attn_at = |lvl: usize| lvl >= config.attn_from_level;
        let down = (0..levels)
            .map(|lvl| DownLevel {
                res: ResBlock::new(ch[lvl], ch[lvl], e, g, s(100 + lvl as u64)),
                attn: attn_at(lvl).then(|| AttnBlock::new(ch[lvl], g, s(200 + lvl as u64))),
                down: (lvl + 1 < levels).then(|| Conv2d::new(ch[lvl], ch[lvl + 1], 3, 2, 1, s(300 + lvl as u64))),
            })
            .collect();
        let up = (0..levels.saturating_sub(1))
            .rev()
            .map(|lvl| UpLevel {
                level: lvl,
                res: ResBlock::new(ch[lvl + 1] + ch[lvl], ch[lvl], e, g, s(400 + lvl as u64)),
                attn: attn_at(lvl).then(|| AttnBlock::new(ch[lvl], g, s(500 + lvl as u64))),
            })
            .collect();
        let mut class_emb = vec![0.0f32; config.classes * e];
        rng::fill_normal(&mut rng::stream(config.seed, 6), &mut class_emb);
        Ok(Self {
            in_conv: Conv2d::same3(IMAGE_CHANNELS, ch[0], s(1)),
            t1: LoraLinear::new(config.time_freqs, e, s(2)),
            t_act: Silu::default(),
            t2: LoraLinear::new(e, e, s(3)),
            class_emb: Param::new(class_emb),
            emb_act: Silu::default(),
            down,
            up,
            out_norm: GroupNorm::new(g, ch[0]),
            out_act: Silu::default(),
            out_conv: Conv2d::same3(ch[0], IMAGE_CHANNELS, s(4)).zero_init(),
            trained_steps: 0,
            batch_classes: Vec::new(),
            config,
        })
    }

    fn attn_blocks_mut(&mut self) -> impl Iterator<Item = &mut AttnBlock> {
        self.down
            .iter_mut()
            .filter_map(|l| l.attn.as_mut())
            .chain(self.up.iter_mut().filter_map(|l| l.attn.as_mut()))
    }

    fn adapted_linears_mut(&mut self) -> Vec<&mut LoraLinear> {
        self.attn_blocks_mut().flat_map(|b| b.linears_mut()).collect()
    }

    /// Number of linear layers that carry adapters.
    pub fn adapter_slots(&mut self) -> usize {
        self.adapted_linears_mut().len()
    }

    /// Attach fresh adapters (B = 0) to every attention / feed-forward projection.
    pub fn init_adapters(&mut self, rank: usize, seed: u64) -> Result<(), LoraError> {
        for (i, l) in self.adapted_linears_mut().into_iter().enumerate() {
            l.init_adapter(rank, rng::derive(seed, i as u64))?;
        }
        Ok(())
    }

    pub fn install_adapters(&mut self, adapters: &[LoraAdapter<f32>]) -> Result<(), LoraError> {
        let mut slots = self.adapted_linears_mut();
        if slots.len() != adapters.len() {
            return Err(LoraError::ShapeMismatch("adapter count does not match the model"));
        }
        for (l, a) in slots.iter_mut().zip(adapters) {
            l.install_adapter(a)?;
        }
        Ok(())
    }

    /// Current adapters in slot order; empty if none are attached.
    pub fn adapters(&mut self) -> Vec<LoraAdapter<f32>> {
        self.adapted_linears_mut().iter().filter_map(|l| l.export_adapter()).collect()
    }

    pub fn clear_adapters(&mut self) {
        for l in self.adapted_linears_mut() {
            l.adapter = None;
        }
    }

    pub fn set_adapter_alpha(&mut self, alpha: f32) {
        for l in self.adapted_linears_mut() {
            l.set_alpha(alpha);
        }
    }

    pub fn has_adapters(&mut self) -> bool {
        self.adapted_linears_mut().iter().any(|l| l.adapter.is_some())
    }

    /// Predict the noise for a batch `x` (n×3×H×W) at timesteps `t` with class ids.
    pub fn forward(&mut self, x: &Tensor, t: &[usize], classes: &[usize]) -> Tensor {
        assert_eq!(x.c, IMAGE_CHANNELS, "denoiser expects 3 planes");
        assert!(t.len() == x.n && classes.len() == x.n, "one timestep and class per item");
        let (f, e) = (self.config.time_freqs, self.config.emb_dim);
        let mut feats = vec![0.0f32; x.n * f];
        for (row, &ti) in feats.chunks_mut(f).zip(t) {
            timestep_features(ti as f32, f, row);
        }
        let mut emb = self.t1.forward(&feats);
        self.t_act.forward_slice(&mut emb);
        let mut emb = self.t2.forward(&emb);
        for (row, &c) in emb.chunks_mut(e).zip(classes) {
            assert!(c < self.config.classes, "class id out of range");
            row.iter_mut().zip(&self.class_emb.value[c * e..(c + 1) * e]).for_each(|(a, b)| *a += b);
        }
        self.batch_classes = classes.to_vec();
        self.emb_act.forward_slice(&mut emb);
        let semb = emb;

        let mut h = self.in_conv.forward(x);
        let mut skips = Vec::with_capacity(self.down.len());
        for lvl in self.down.iter_mut() {
            h = lvl.res.forward(&h, &semb);
            if let Some(a) = lvl.attn.as_mut() {
                h = a.forward(&h);
            }
            if let Some(d) = lvl.down.as_mut() {
                skips.push(h.clone());
                h = d.forward(&h);
            }
        }
        for lvl in self.up.iter_mut() {
            h = Tensor::concat_channels(&upsample2x(&h), &skips[lvl.level]);
            h = lvl.res.forward(&h, &semb);
            if let Some(a) = lvl.attn.as_mut() {
                h = a.forward(&h);
            }
        }
        let h = self.out_norm.forward(&h);
        let h = self.out_act.forward(&h);
        self.out_conv.forward(&h)
    }

    /// Backpropagate `dL/d(output)`, accumulating parameter gradients.
    pub fn backward(&mut self, gout: &Tensor) {
        let (e, ch) = (self.config.emb_dim, self.config.channels.clone());
        let n = gout.n;
        let mut gsemb = vec![0.0f32; n * e];
        let mut acc = |gs: Vec<f32>| gsemb.iter_mut().zip(gs).for_each(|(a, b)| *a += b);

        let g = self.out_conv.backward(gout, true).expect("input grad");
        let g = self.out_act.backward(&g);
        let mut g = self.out_norm.backward(&g);
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; ch.len()];
        for lvl in self.up.iter_mut().rev() {
            if let Some(a) = lvl.attn.as_mut() {
                g = a.backward(&g);
            }
            let (gx, gs) = lvl.res.backward(&g);
            acc(gs);
            let (gup, gskip) = gx.split_channels(ch[lvl.level + 1]);
            skip_grads[lvl.level] = Some(gskip);
            g = upsample2x_backward(&gup);
        }
        for (i, lvl) in self.down.iter_mut().enumerate().rev() {
            if let Some(d) = lvl.down.as_mut() {
                g = d.backward(&g, true).expect("input grad");
                g.add_assign(skip_grads[i].as_ref().expect("skip gradient"));
            }
            if let Some(a) = lvl.attn.as_mut() {
                g = a.backward(&g);
            }
            let (gx, gs) = lvl.res.backward(&g);
            acc(gs);
            g = gx;
        }
        self.in_conv.backward(&g, false);

        self.emb_act.backward_slice(&mut gsemb);
        if !self.class_emb.frozen {
            for (row, &c) in gsemb.chunks(e).zip(&self.batch_classes) {
                self.class_emb.grad[c * e..(c + 1) * e].iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }
        let mut gt = self.t2.backward(&gsemb);
        self.t_act.backward_slice(&mut gt);
        self.t1.backward(&gt);
    }
}

impl Module for Denoiser {
    fn visit(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.in_conv.visit(f);
        self.t1.visit(f);
        self.t2.visit(f);
        f(self.class_emb.view(ParamKind::Base));
        for lvl in self.down.iter_mut() {
            lvl.res.visit(f);
            if let Some(a) = lvl.attn.as_mut() {
                a.visit(f);
            }
            if let Some(d) = lvl.down.as_mut() {
                d.visit(f);
            }
        }
        for lvl in self.up.iter_mut() {
            lvl.res.visit(f);
            if let Some(a) = lvl.attn.as_mut() {
                a.visit(f);
            }
        }
        self.out_norm.visit(f);
        self.out_conv.visit(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            channels: vec![4, 8],
            attn_from_level: 1,
            emb_dim: 8,
            time_freqs: 4,
            groups: 2,
            classes: 3,
            seed: 5,
        }
    }

    fn randomise(m: &mut Denoiser) {
        // zero-initialised outputs hide most paths from the gradient check
        let mut r = rng::seeded(3);
        m.visit(&mut |p| {
            for v in p.value.iter_mut() {
                *v += 0.3 * rng::normal_f32(&mut r);
            }
        });
    }

    fn input(n: usize) -> Tensor {
        let mut x = Tensor::zeros(n, 3, 8, 8);
        rng::fill_normal(&mut rng::seeded(4), &mut x.data);
        x
    }

    #[test]
    fn shape_is_preserved() {
        let mut m = Denoiser::new(DenoiserConfig { image_size: 16, ..tiny_config() }).unwrap();
        let mut x = Tensor::zeros(2, 3, 16, 16);
        rng::fill_normal(&mut rng::seeded(1), &mut x.data);
        let y = m.forward(&x, &[3, 50], &[0, 2]);
        assert_eq!(y.shape(), x.shape());
    }

    #[test]
    fn config_validation() {
        assert!(DenoiserConfig::default().validate().is_ok());
        assert!(DenoiserConfig { image_size: 10, channels: vec![8, 8, 8], ..tiny_config() }.validate().is_err());
        assert!(DenoiserConfig { groups: 3, ..tiny_config() }.validate().is_err());
    }

    #[test]
    fn gradients() {
        use crate::nn::tests_support::check_param_grads;
        let mut m = Denoiser::new(tiny_config()).unwrap();
        randomise(&mut m);
        check_param_grads(&mut m, &input(2), |m, x| m.forward(x, &[7, 90], &[1, 2]), |m, g| m.backward(g));
    }

    #[test]
    fn adapter_gradients_and_freezing() {
        use crate::nn::tests_support::check_param_grads;
        let mut m = Denoiser::new(tiny_config()).unwrap();
        randomise(&mut m);
        m.init_adapters(2, 9).unwrap();
        assert_eq!(m.adapter_slots(), 6);
        m.set_frozen(ParamKind::Base, true);
        for l in m.adapted_linears_mut() {
            rng::fill_normal(&mut rng::seeded(2), &mut l.adapter.as_mut().unwrap().b.value);
        }
        // q,k,v,o at width 8 plus ff 8→16→8, rank 2
        assert_eq!(m.trainable_count(), 4 * 2 * 16 + 2 * 2 * 24);
        check_param_grads(&mut m, &input(1), |m, x| m.forward(x, &[30], &[0]), |m, g| m.backward(g));
    }

    #[test]
    fn zero_adapters_do_not_change_output() {
        let mut m = Denoiser::new(tiny_config()).unwrap();
        randomise(&mut m);
        let x = input(1);
        let base = m.forward(&x, &[10], &[1]);
        m.init_adapters(2, 1).unwrap();
        assert_eq!(m.forward(&x, &[10], &[1]), base);
        assert_eq!(m.adapters().len(), 6);
        m.clear_adapters();
        assert!(!m.has_adapters());
    }
}
