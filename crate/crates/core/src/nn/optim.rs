use alloc::vec;
use alloc::vec::Vec;

use super::Module;

/// Adam with L2 weight decay added to the gradient.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update over the trainable parameters; returns how many scalars moved.
    pub fn step(&mut self, model: &mut dyn Module) -> usize {
        self.t += 1;
        let bc1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let step = (self.lr * libm::sqrt(bc2) / bc1) as f32;
        let (b1, b2, eps, wd) = (self.beta1 as f32, self.beta2 as f32, self.eps as f32, self.weight_decay as f32);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut slot = 0;
        let mut moved = 0;
        model.visit(&mut |p| {
            if !p.trainable() {
                return;
            }
            if ms.len() <= slot {
                ms.push(vec![0.0; p.value.len()]);
                vs.push(vec![0.0; p.value.len()]);
            }
            let (m, v) = (&mut ms[slot], &mut vs[slot]);
            assert_eq!(m.len(), p.value.len(), "optimizer state does not match parameter layout");
            for i in 0..p.value.len() {
                let g = p.grad[i] + wd * p.value[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                p.value[i] -= step * m[i] / (libm::sqrtf(v[i]) + eps);
            }
            moved += p.value.len();
            slot += 1;
        });
        moved
    }
}
