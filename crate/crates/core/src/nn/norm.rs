use alloc::vec;
use alloc::vec::Vec;

use super::{Module, Param, ParamKind, ParamMut, Tensor};

pub const GN_EPS: f32 = 1e-5;

/// Group normalisation with a per-channel affine.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub gamma: Param,
    pub beta: Param,
    xhat: Option<Tensor>,
    inv_std: Vec<f32>,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "channels must divide into groups");
        Self {
            groups,
            channels,
            gamma: Param::new(vec![1.0; channels]),
            beta: Param::zeros(channels),
            xhat: None,
            inv_std: Vec::new(),
        }
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.gamma.frozen = frozen;
        self.beta.frozen = frozen;
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.channels, "groupnorm channels");
        let hw = x.plane_len();
        let cpg = self.channels / self.groups;
        let m = cpg * hw;
        let mut xhat = Tensor::zeros_like(x);
        let mut out = Tensor::zeros_like(x);
        self.inv_std.clear();
        for i in 0..x.n {
            for g in 0..self.groups {
                let off = i * x.item_len() + g * m;
                let src = &x.data[off..off + m];
                let mean = src.chunks(hw).map(|c| f64::from(c.iter().sum::<f32>())).sum::<f64>() / m as f64;
                let mf = mean as f32;
                let var = src
                    .chunks(hw)
                    .map(|c| f64::from(c.iter().map(|&v| (v - mf) * (v - mf)).sum::<f32>()))
                    .sum::<f64>()
                    / m as f64;
                let inv = (1.0 / libm::sqrt(var + f64::from(GN_EPS))) as f32;
                self.inv_std.push(inv);
                for (k, c) in (g * cpg..(g + 1) * cpg).enumerate() {
                    let (gm, bt) = (self.gamma.value[c], self.beta.value[c]);
                    let r = off + k * hw..off + (k + 1) * hw;
                    let xs = &x.data[r.clone()];
                    for ((xh, o), &v) in xhat.data[r.clone()].iter_mut().zip(&mut out.data[r]).zip(xs) {
                        *xh = (v - mf) * inv;
                        *o = *xh * gm + bt;
                    }
                }
            }
        }
        self.xhat = Some(xhat);
        out
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        let xhat = self.xhat.take().expect("groupnorm backward without forward");
        let hw = xhat.plane_len();
        let cpg = self.channels / self.groups;
        let m = cpg * hw;
        let train = !self.gamma.frozen;
        let mut gin = Tensor::zeros_like(&xhat);
        let mut dxh = vec![0.0f32; m];
        for i in 0..xhat.n {
            for g in 0..self.groups {
                let off = i * xhat.item_len() + g * m;
                let (mut s1, mut s2) = (0.0f64, 0.0f64);
                for (k, c) in (g * cpg..(g + 1) * cpg).enumerate() {
                    let r = off + k * hw..off + (k + 1) * hw;
                    let (go, xh) = (&gout.data[r.clone()], &xhat.data[r]);
                    if train {
                        self.gamma.grad[c] += go.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>();
                        self.beta.grad[c] += go.iter().sum::<f32>();
                    }
                    let gm = self.gamma.value[c];
                    let d = &mut dxh[k * hw..(k + 1) * hw];
                    let (mut a1, mut a2) = (0.0f32, 0.0f32);
                    for ((dv, &gv), &x) in d.iter_mut().zip(go).zip(xh) {
                        *dv = gv * gm;
                        a1 += *dv;
                        a2 += *dv * x;
                    }
                    s1 += f64::from(a1);
                    s2 += f64::from(a2);
                }
                let inv = self.inv_std[i * self.groups + g];
                let (m1, m2) = ((s1 / m as f64) as f32, (s2 / m as f64) as f32);
                for ((o, &d), &x) in gin.data[off..off + m].iter_mut().zip(&dxh).zip(&xhat.data[off..off + m]) {
                    *o = inv * (d - m1 - x * m2);
                }
            }
        }
        gin
    }
}

impl Module for GroupNorm {
    fn visit(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        f(self.gamma.view(ParamKind::Base));
        f(self.beta.view(ParamKind::Base));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests_support::{check_input_grad, check_param_grads};
    use crate::rng;

    fn input() -> Tensor {
        let mut x = Tensor::zeros(2, 4, 3, 3);
        rng::fill_normal(&mut rng::seeded(8), &mut x.data);
        x.data.iter_mut().enumerate().for_each(|(i, v)| *v = *v * 2.0 + (i % 7) as f32);
        x
    }

    #[test]
    fn normalises_each_group() {
        let mut gn = GroupNorm::new(2, 4);
        let y = gn.forward(&input());
        for chunk in y.data.chunks(18) {
            let mean: f32 = chunk.iter().sum::<f32>() / 18.0;
            let var: f32 = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / 18.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn gradients() {
        let mut gn = GroupNorm::new(2, 4);
        gn.gamma.value = alloc::vec![0.5, 1.5, -1.0, 2.0];
        gn.beta.value = alloc::vec![0.1, 0.2, 0.3, 0.4];
        let x = input();
        check_param_grads(&mut gn.clone(), &x, |m, x| m.forward(x), |m, g| {
            m.backward(g);
        });
        check_input_grad(&mut gn, &x, |m, x| m.forward(x), |m, g| m.backward(g));
    }
}
