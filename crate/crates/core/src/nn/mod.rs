//! Minimal CPU neural-network layers with hand-written backward passes.
//!
//! Layers cache what they need during `forward` and accumulate parameter
//! gradients during `backward`. Tensors are NCHW `f32`. All kernels are
//! single-threaded and deterministic; GEMM goes through `matrixmultiply`.

pub mod act;
pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;
pub mod optim;
pub mod tensor;

use alloc::vec;
use alloc::vec::Vec;

pub use tensor::Tensor;

use crate::rng::{self, Fnv64};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Ordinary model weights.
    Base,
    /// LoRA factors.
    Adapter,
}

/// A learnable buffer with its gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub frozen: bool,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let grad = vec![0.0; value.len()];
        Self {
            value,
            grad,
            frozen: false,
        }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    /// Kaiming-style normal init with the given fan-in.
    pub fn he(len: usize, fan_in: usize, seed: u64) -> Self {
        let mut r = rng::seeded(seed);
        let std = libm::sqrtf(2.0 / fan_in.max(1) as f32);
        let mut v = vec![0.0; len];
        rng::fill_normal(&mut r, &mut v);
        v.iter_mut().for_each(|x| *x *= std);
        Self::new(v)
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn view(&mut self, kind: ParamKind) -> ParamMut<'_> {
        ParamMut {
            value: &mut self.value,
            grad: &mut self.grad,
            frozen: &mut self.frozen,
            kind,
        }
    }
}

pub struct ParamMut<'a> {
    pub value: &'a mut [f32],
    pub grad: &'a mut [f32],
    pub frozen: &'a mut bool,
    pub kind: ParamKind,
}

impl ParamMut<'_> {
    pub fn trainable(&self) -> bool {
        !*self.frozen
    }
}

/// Anything that owns parameters.
pub trait Module {
    /// Visit every parameter in a fixed order.
    fn visit(&mut self, f: &mut dyn FnMut(ParamMut<'_>));

    fn zero_grad(&mut self) {
        self.visit(&mut |p| p.grad.iter_mut().for_each(|g| *g = 0.0));
    }

    fn trainable_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| {
            if p.trainable() {
                n += p.value.len();
            }
        });
        n
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.value.len());
        n
    }

    /// Checksum over all parameters of one kind.
    fn checksum(&mut self, kind: ParamKind) -> u64 {
        let mut h = Fnv64::default();
        self.visit(&mut |p| {
            if p.kind == kind {
                h.write_f32s(p.value);
            }
        });
        h.finish()
    }

    /// Global L2 norm of trainable gradients.
    fn grad_norm(&mut self) -> f64 {
        let mut s = 0.0f64;
        self.visit(&mut |p| {
            if p.trainable() {
                s += p.grad.iter().map(|&g| f64::from(g) * f64::from(g)).sum::<f64>();
            }
        });
        libm::sqrt(s)
    }

    /// Scale gradients so their global norm is at most `max_norm`.
    fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm.is_finite() {
            let s = (max_norm / norm) as f32;
            self.visit(&mut |p| {
                if p.trainable() {
                    p.grad.iter_mut().for_each(|g| *g *= s);
                }
            });
        }
        norm
    }

    /// Freeze or unfreeze every parameter of one kind.
    fn set_frozen(&mut self, kind: ParamKind, frozen: bool) {
        self.visit(&mut |p| {
            if p.kind == kind {
                *p.frozen = frozen;
            }
        });
    }

    /// Copy out every parameter value, in visit order.
    fn snapshot(&mut self) -> Vec<Vec<f32>> {
        let mut out = Vec::new();
        self.visit(&mut |p| out.push(p.value.to_vec()));
        out
    }
}

#[cfg(test)]
pub(crate) mod tests_support {
    use super::*;

    fn probe(seed: u64, like: &Tensor) -> Tensor {
        let mut r = rng::seeded(seed);
        let mut t = Tensor::zeros_like(like);
        rng::fill_normal(&mut r, &mut t.data);
        t
    }

    fn loss(out: &Tensor, w: &Tensor) -> f64 {
        out.data.iter().zip(&w.data).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum()
    }

    fn close(fd: f64, an: f64) -> bool {
        (fd - an).abs() <= 2e-3 + 2e-2 * fd.abs().max(an.abs())
    }

    fn nudge<M: Module>(m: &mut M, which: usize, j: usize, delta: f32) {
        let mut idx = 0;
        m.visit(&mut |p| {
            if idx == which {
                p.value[j] += delta;
            }
            idx += 1;
        });
    }

    /// Finite-difference check of every trainable parameter (sampled entries).
    pub fn check_param_grads<M: Module>(
        m: &mut M,
        x: &Tensor,
        fwd: impl Fn(&mut M, &Tensor) -> Tensor,
        bwd: impl Fn(&mut M, &Tensor),
    ) {
        m.zero_grad();
        let out = fwd(m, x);
        let w = probe(99, &out);
        bwd(m, &w);
        let mut grads: Vec<(bool, Vec<f32>)> = Vec::new();
        m.visit(&mut |p| grads.push((p.trainable(), p.grad.to_vec())));
        let h = 1e-2f32;
        for (pi, (trainable, g)) in grads.iter().enumerate() {
            if !trainable {
                continue;
            }
            let step = (g.len() / 12).max(1);
            for j in (0..g.len()).step_by(step) {
                nudge(m, pi, j, h);
                let up = loss(&fwd(m, x), &w);
                nudge(m, pi, j, -2.0 * h);
                let dn = loss(&fwd(m, x), &w);
                nudge(m, pi, j, h);
                let fd = (up - dn) / (2.0 * f64::from(h));
                let an = f64::from(g[j]);
                assert!(close(fd, an), "param {pi}[{j}]: fd {fd} vs analytic {an}");
            }
        }
    }

    /// Finite-difference check of the input gradient (sampled entries).
    pub fn check_input_grad<M: Module>(
        m: &mut M,
        x: &Tensor,
        fwd: impl Fn(&mut M, &Tensor) -> Tensor,
        bwd: impl Fn(&mut M, &Tensor) -> Tensor,
    ) {
        let out = fwd(m, x);
        let w = probe(98, &out);
        let gin = bwd(m, &w);
        assert_eq!(gin.shape(), x.shape());
        let h = 1e-2f32;
        let step = (x.data.len() / 24).max(1);
        for j in (0..x.data.len()).step_by(step) {
            let mut up = x.clone();
            up.data[j] += h;
            let mut dn = x.clone();
            dn.data[j] -= h;
            let fd = (loss(&fwd(m, &up), &w) - loss(&fwd(m, &dn), &w)) / (2.0 * f64::from(h));
            let an = f64::from(gin.data[j]);
            assert!(close(fd, an), "input[{j}]: fd {fd} vs analytic {an}");
        }
    }
}
