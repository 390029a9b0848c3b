//! Single-head spatial self-attention followed by a feed-forward block, both
//! residual and pre-normalised. The q/k/v/o and feed-forward projections are
//! [`LoraLinear`]s, which is where adapters attach.

use alloc::vec;
use alloc::vec::Vec;

use super::act::{fast_exp, Silu};
use super::conv::sgemm;
use super::linear::LoraLinear;
use super::norm::GroupNorm;
use super::{Module, ParamMut, Tensor};
use crate::lora::LoraError;
use crate::rng;

#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub channels: usize,
    pub norm1: GroupNorm,
    pub q: LoraLinear,
    pub k: LoraLinear,
    pub v: LoraLinear,
    pub o: LoraLinear,
    pub norm2: GroupNorm,
    pub ff1: LoraLinear,
    pub ff2: LoraLinear,
    act: Silu,
    cache: Vec<(Vec<f32>, Vec<f32>, Vec<f32>, Vec<f32>)>,
    shape: [usize; 4],
}

impl AttnBlock {
    pub fn new(channels: usize, groups: usize, seed: u64) -> Self {
        let s = |t| rng::derive(seed, t);
        Self {
            channels,
            norm1: GroupNorm::new(groups, channels),
            q: LoraLinear::new(channels, channels, s(1)),
            k: LoraLinear::new(channels, channels, s(2)),
            v: LoraLinear::new(channels, channels, s(3)),
            o: LoraLinear::new(channels, channels, s(4)).zero_init(),
            norm2: GroupNorm::new(groups, channels),
            ff1: LoraLinear::new(channels, 2 * channels, s(5)),
            ff2: LoraLinear::new(2 * channels, channels, s(6)).zero_init(),
            act: Silu::default(),
            cache: Vec::new(),
            shape: [0; 4],
        }
    }

    pub fn linears_mut(&mut self) -> [&mut LoraLinear; 6] {
        [&mut self.q, &mut self.k, &mut self.v, &mut self.o, &mut self.ff1, &mut self.ff2]
    }

    pub fn init_adapters(&mut self, rank: usize, seed: u64) -> Result<(), LoraError> {
        for (i, l) in self.linears_mut().into_iter().enumerate() {
            l.init_adapter(rank, rng::derive(seed, i as u64))?;
        }
        Ok(())
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let [n, c, h, w] = x.shape();
        self.shape = x.shape();
        let l = h * w;
        let scale = 1.0 / libm::sqrtf(c as f32);
        let tok = self.norm1.forward(x).to_tokens();
        let q = self.q.forward(&tok);
        let k = self.k.forward(&tok);
        let v = self.v.forward(&tok);
        let mut att = vec![0.0f32; n * l * c];
        self.cache.clear();
        for i in 0..n {
            let r = i * l * c..(i + 1) * l * c;
            let (qi, ki, vi) = (&q[r.clone()], &k[r.clone()], &v[r.clone()]);
            let mut p = vec![0.0f32; l * l];
            sgemm(l, c, l, qi, (c as isize, 1), ki, (1, c as isize), 0.0, &mut p);
            for row in p.chunks_mut(l) {
                let mx = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) * scale;
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = fast_exp(*s * scale - mx);
                    sum += *s;
                }
                row.iter_mut().for_each(|s| *s /= sum);
            }
            sgemm(l, l, c, &p, (l as isize, 1), vi, (c as isize, 1), 0.0, &mut att[r]);
            self.cache.push((qi.to_vec(), ki.to_vec(), vi.to_vec(), p));
        }
        let proj = self.o.forward(&att);
        let mut y = x.clone();
        y.add_assign(&Tensor::from_tokens(n, c, h, w, &proj));
        let tok2 = self.norm2.forward(&y).to_tokens();
        let mut hdn = self.ff1.forward(&tok2);
        self.act.forward_slice(&mut hdn);
        let ff = self.ff2.forward(&hdn);
        y.add_assign(&Tensor::from_tokens(n, c, h, w, &ff));
        y
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let [n, c, h, w] = self.shape;
        let l = h * w;
        let scale = 1.0 / libm::sqrtf(c as f32);
        // feed-forward branch
        let gt = gout.to_tokens();
        let mut gh = self.ff2.backward(&gt);
        self.act.backward_slice(&mut gh);
        let gtok2 = self.ff1.backward(&gh);
        let mut gy = self.norm2.backward(&Tensor::from_tokens(n, c, h, w, &gtok2));
        gy.add_assign(gout);
        // attention branch
        let gatt = self.o.backward(&gy.to_tokens());
        let mut gq = vec![0.0f32; n * l * c];
        let mut gk = vec![0.0f32; n * l * c];
        let mut gv = vec![0.0f32; n * l * c];
        let cache = core::mem::take(&mut self.cache);
        for (i, (qi, ki, vi, p)) in cache.iter().enumerate() {
            let r = i * l * c..(i + 1) * l * c;
            let go = &gatt[r.clone()];
            // dV = Pᵀ·dO
            sgemm(l, l, c, p, (1, l as isize), go, (c as isize, 1), 0.0, &mut gv[r.clone()]);
            // dP = dO·Vᵀ
            let mut dp = vec![0.0f32; l * l];
            sgemm(l, c, l, go, (c as isize, 1), vi, (1, c as isize), 0.0, &mut dp);
            for (drow, prow) in dp.chunks_mut(l).zip(p.chunks(l)) {
                let dot: f32 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                drow.iter_mut().zip(prow).for_each(|(d, &pv)| *d = pv * (*d - dot) * scale);
            }
            sgemm(l, l, c, &dp, (l as isize, 1), ki, (c as isize, 1), 0.0, &mut gq[r.clone()]);
            sgemm(l, l, c, &dp, (1, l as isize), qi, (c as isize, 1), 0.0, &mut gk[r]);
        }
        let mut gtok = self.q.backward(&gq);
        for (a, b) in gtok.iter_mut().zip(self.k.backward(&gk)) {
            *a += b;
        }
        for (a, b) in gtok.iter_mut().zip(self.v.backward(&gv)) {
            *a += b;
        }
        let mut gx = self.norm1.backward(&Tensor::from_tokens(n, c, h, w, &gtok));
        gx.add_assign(&gy);
        gx
    }
}

impl Module for AttnBlock {
    fn visit(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.norm1.visit(f);
        self.q.visit(f);
        self.k.visit(f);
        self.v.visit(f);
        self.o.visit(f);
        self.norm2.visit(f);
        self.ff1.visit(f);
        self.ff2.visit(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests_support::{check_input_grad, check_param_grads};

    fn block() -> AttnBlock {
        let mut b = AttnBlock::new(4, 2, 17);
        // non-zero output projections so every path carries gradient
        rng::fill_normal(&mut rng::seeded(3), &mut b.o.weight.value);
        rng::fill_normal(&mut rng::seeded(4), &mut b.ff2.weight.value);
        b
    }

    #[test]
    fn gradients() {
        let mut x = Tensor::zeros(2, 4, 3, 3);
        rng::fill_normal(&mut rng::seeded(5), &mut x.data);
        check_param_grads(&mut block(), &x, |m, x| m.forward(x), |m, g| {
            m.backward(g);
        });
        check_input_grad(&mut block(), &x, |m, x| m.forward(x), |m, g| m.backward(g));
    }

    #[test]
    fn adapter_gradients() {
        let mut b = block();
        b.init_adapters(2, 8).unwrap();
        for l in b.linears_mut() {
            l.set_base_frozen(true);
            rng::fill_normal(&mut rng::seeded(6), &mut l.adapter.as_mut().unwrap().b.value);
        }
        b.norm1.set_frozen(true);
        b.norm2.set_frozen(true);
        assert_eq!(b.trainable_count(), 4 * 2 * (4 + 4) + 2 * (4 + 8) + 2 * (8 + 4));
        let mut x = Tensor::zeros(1, 4, 2, 3);
        rng::fill_normal(&mut rng::seeded(7), &mut x.data);
        check_param_grads(&mut b, &x, |m, x| m.forward(x), |m, g| {
            m.backward(g);
        });
    }

    #[test]
    fn zero_init_block_is_identity() {
        let mut b = AttnBlock::new(4, 2, 1);
        let mut x = Tensor::zeros(1, 4, 2, 2);
        rng::fill_normal(&mut rng::seeded(2), &mut x.data);
        assert_eq!(b.forward(&x), x);
    }
}
