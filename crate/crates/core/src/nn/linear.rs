//! Row-major linear layer with an optional LoRA adapter.
//!
//! Inputs are token matrices (rows × d). The layer computes
//! `x·W + bias (+ α·(x·A)·B)`, matching the conventions of [`crate::lora`].

use alloc::vec;
use alloc::vec::Vec;

use super::conv::sgemm;
use super::{Module, Param, ParamKind, ParamMut};
use crate::lora::{self, BaseLinear, LoraAdapter, LoraError, Matrix};

#[derive(Debug, Clone)]
pub struct AdapterParams {
    pub rank: usize,
    /// d×r
    pub a: Param,
    /// r×k
    pub b: Param,
    pub alpha: f32,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct LoraLinear {
    pub d: usize,
    pub k: usize,
    /// d×k
    pub weight: Param,
    pub bias: Param,
    pub adapter: Option<AdapterParams>,
    input: Vec<f32>,
    xa: Vec<f32>,
}

impl LoraLinear {
    pub fn new(d: usize, k: usize, seed: u64) -> Self {
        let mut weight = Param::he(d * k, d, seed);
        // keep pre-activations near unit scale for linear (not ReLU) use
        weight.value.iter_mut().for_each(|v| *v *= core::f32::consts::FRAC_1_SQRT_2);
        Self {
            d,
            k,
            weight,
            bias: Param::zeros(k),
            adapter: None,
            input: Vec::new(),
            xa: Vec::new(),
        }
    }

    pub fn zero_init(mut self) -> Self {
        self.weight.value.iter_mut().for_each(|v| *v = 0.0);
        self
    }

    pub fn set_base_frozen(&mut self, frozen: bool) {
        self.weight.frozen = frozen;
        self.bias.frozen = frozen;
    }

    pub fn install_adapter(&mut self, adapter: &LoraAdapter<f32>) -> Result<(), LoraError> {
        if adapter.d() != self.d || adapter.k() != self.k || adapter.a.cols() != adapter.b.rows() {
            return Err(LoraError::ShapeMismatch("adapter does not match layer"));
        }
        self.adapter = Some(AdapterParams {
            rank: adapter.rank(),
            a: Param::new(adapter.a.as_slice().to_vec()),
            b: Param::new(adapter.b.as_slice().to_vec()),
            alpha: adapter.alpha,
            seed: adapter.seed,
        });
        Ok(())
    }

    pub fn init_adapter(&mut self, rank: usize, seed: u64) -> Result<(), LoraError> {
        let a = lora::init_adapter::<f32>(self.d, self.k, rank, seed)?;
        self.install_adapter(&a)
    }

    pub fn export_adapter(&self) -> Option<LoraAdapter<f32>> {
        self.adapter.as_ref().map(|p| LoraAdapter {
            a: Matrix::from_vec(self.d, p.rank, p.a.value.clone()).expect("adapter A shape"),
            b: Matrix::from_vec(p.rank, self.k, p.b.value.clone()).expect("adapter B shape"),
            alpha: p.alpha,
            seed: p.seed,
        })
    }

    pub fn take_adapter(&mut self) -> Option<LoraAdapter<f32>> {
        let out = self.export_adapter();
        self.adapter = None;
        out
    }

    pub fn set_alpha(&mut self, alpha: f32) {
        if let Some(a) = self.adapter.as_mut() {
            a.alpha = alpha;
        }
    }

    pub fn base(&self) -> BaseLinear<f32> {
        BaseLinear::new(
            Matrix::from_vec(self.d, self.k, self.weight.value.clone()).expect("weight shape"),
            Some(self.bias.value.clone()),
        )
        .expect("non-empty layer")
    }

    pub fn forward(&mut self, x: &[f32]) -> Vec<f32> {
        let y = self.run(x, true);
        self.input = x.to_vec();
        y
    }

    pub fn infer(&self, x: &[f32]) -> Vec<f32> {
        let mut tmp = self.clone_light();
        tmp.run(x, false)
    }

    fn clone_light(&self) -> Self {
        Self {
            input: Vec::new(),
            xa: Vec::new(),
            ..self.clone()
        }
    }

    fn run(&mut self, x: &[f32], cache: bool) -> Vec<f32> {
        assert_eq!(x.len() % self.d, 0, "linear input width");
        let rows = x.len() / self.d;
        let mut y = vec![0.0f32; rows * self.k];
        for row in y.chunks_mut(self.k) {
            row.copy_from_slice(&self.bias.value);
        }
        sgemm(rows, self.d, self.k, x, (self.d as isize, 1), &self.weight.value, (self.k as isize, 1), 1.0, &mut y);
        if let Some(ad) = &self.adapter {
            let r = ad.rank;
            let mut xa = vec![0.0f32; rows * r];
            sgemm(rows, self.d, r, x, (self.d as isize, 1), &ad.a.value, (r as isize, 1), 0.0, &mut xa);
            let mut low = vec![0.0f32; rows * self.k];
            sgemm(rows, r, self.k, &xa, (r as isize, 1), &ad.b.value, (self.k as isize, 1), 0.0, &mut low);
            y.iter_mut().zip(&low).for_each(|(y, l)| *y += ad.alpha * l);
            if cache {
                self.xa = xa;
            }
        }
        y
    }

    /// Accumulates gradients and returns `dL/dx`.
    pub fn backward(&mut self, gout: &[f32]) -> Vec<f32> {
        let (d, k) = (self.d, self.k);
        let rows = gout.len() / k;
        assert_eq!(self.input.len(), rows * d, "linear backward without forward");
        let x = core::mem::take(&mut self.input);
        if !self.weight.frozen {
            // gW += xᵀ·g
            sgemm(d, rows, k, &x, (1, d as isize), gout, (k as isize, 1), 1.0, &mut self.weight.grad);
            for row in gout.chunks(k) {
                self.bias.grad.iter_mut().zip(row).for_each(|(b, g)| *b += g);
            }
        }
        let mut gx = vec![0.0f32; rows * d];
        sgemm(rows, k, d, gout, (k as isize, 1), &self.weight.value, (1, k as isize), 0.0, &mut gx);
        if let Some(ad) = self.adapter.as_mut() {
            let r = ad.rank;
            // g·Bᵀ (rows×r)
            let mut gbt = vec![0.0f32; rows * r];
            sgemm(rows, k, r, gout, (k as isize, 1), &ad.b.value, (1, k as isize), 0.0, &mut gbt);
            gbt.iter_mut().for_each(|v| *v *= ad.alpha);
            if !ad.a.frozen {
                sgemm(d, rows, r, &x, (1, d as isize), &gbt, (r as isize, 1), 1.0, &mut ad.a.grad);
            }
            if !ad.b.frozen {
                let mut gb = vec![0.0f32; r * k];
                sgemm(r, rows, k, &self.xa, (1, r as isize), gout, (k as isize, 1), 0.0, &mut gb);
                ad.b.grad.iter_mut().zip(&gb).for_each(|(g, v)| *g += ad.alpha * v);
            }
            sgemm(rows, r, d, &gbt, (r as isize, 1), &ad.a.value, (1, r as isize), 1.0, &mut gx);
        }
        self.input = x;
        gx
    }
}

impl Module for LoraLinear {
    fn visit(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        f(self.weight.view(ParamKind::Base));
        f(self.bias.view(ParamKind::Base));
        if let Some(ad) = self.adapter.as_mut() {
            f(ad.a.view(ParamKind::Adapter));
            f(ad.b.view(ParamKind::Adapter));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::tests_support::{check_input_grad, check_param_grads};
    use crate::nn::Tensor;
    use crate::rng;

    fn layer_with_adapter() -> LoraLinear {
        let mut l = LoraLinear::new(6, 5, 3);
        l.init_adapter(2, 4).unwrap();
        let ad = l.adapter.as_mut().unwrap();
        rng::fill_normal(&mut rng::seeded(9), &mut ad.b.value);
        ad.alpha = 0.9;
        l
    }

    #[test]
    fn matches_reference_lora_forward() {
        let mut l = layer_with_adapter();
        let mut x = alloc::vec![0.0; 4 * 6];
        rng::fill_normal(&mut rng::seeded(1), &mut x);
        let y = l.forward(&x);
        let xm = Matrix::from_vec(4, 6, x).unwrap();
        let expect = lora::lora_forward(&xm, &l.base(), &l.export_adapter().unwrap()).unwrap();
        for (a, b) in y.iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn adapter_only_training_leaves_base_gradients_empty() {
        let mut l = layer_with_adapter();
        l.set_base_frozen(true);
        assert_eq!(l.trainable_count(), 2 * (6 + 5));
        let mut x = alloc::vec![0.0; 3 * 6];
        rng::fill_normal(&mut rng::seeded(2), &mut x);
        l.forward(&x);
        l.backward(&alloc::vec![1.0; 15]);
        assert!(l.weight.grad.iter().all(|&g| g == 0.0));
        assert!(l.adapter.as_ref().unwrap().a.grad.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn gradients() {
        // wrap rows as a 1×d×rows×1 tensor so the generic checker applies
        let mut x = Tensor::zeros(1, 1, 4, 6);
        rng::fill_normal(&mut rng::seeded(3), &mut x.data);
        let fwd = |m: &mut LoraLinear, x: &Tensor| {
            let y = m.forward(&x.data);
            Tensor::from_vec(1, 1, 4, 5, y)
        };
        check_param_grads(&mut layer_with_adapter(), &x, fwd, |m, g| {
            m.backward(&g.data);
        });
        check_input_grad(&mut layer_with_adapter(), &x, fwd, |m, g| {
            Tensor::from_vec(1, 1, 4, 6, m.backward(&g.data))
        });
    }
}
