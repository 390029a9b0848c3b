//! Low-rank adaptation of linear layers.
//!
//! A frozen base weight `W0` (d×k) is adapted by the factorized update
//! `ΔW = A·B` with `A` (d×r) and `B` (r×k). Forward passes compute
//! `y = x·W0 + bias + α·(x·A)·B`; only `A` and `B` receive gradients.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Debug;

use num_traits::Float;

use crate::rng;

/// Merge scale used while training adapters.
pub const TRAIN_ALPHA: f64 = 1.0;
/// Merge scale used at generation time.
pub const INFERENCE_ALPHA: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LoraError {
    #[error("rank must be at least 1, got {0}")]
    BadRank(usize),
    #[error("bad dimension: {0}")]
    BadDimension(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(&'static str),
    #[error("adapter is already merged into this base")]
    AlreadyMerged,
    #[error("base has no merged adapter to remove")]
    NotMerged,
}

/// Floating-point element with a GEMM kernel.
pub trait Scalar: Float + Default + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// `C = alpha·op(A)·op(B) + beta·C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: A too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: C too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: strides are non-negative and every addressed element was
                // bounds-checked above via `span`.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Matrix<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Result<Self, LoraError> {
        if data.len() != rows * cols {
            return Err(LoraError::ShapeMismatch("buffer length does not match rows*cols"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[F]]) -> Result<Self, LoraError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(LoraError::ShapeMismatch("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flat_map(|r| r.iter().copied()).collect(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<F> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| v.is_zero())
    }

    pub fn max_abs_diff(&self, other: &Self) -> F {
        self.data
            .iter()
            .zip(&other.data)
            .fold(F::zero(), |acc, (a, b)| acc.max((*a - *b).abs()))
    }

    /// `self · other`
    pub fn matmul(&self, other: &Self) -> Result<Self, LoraError> {
        if self.cols != other.rows {
            return Err(LoraError::ShapeMismatch("matmul inner dimension"));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        F::gemm(
            self.rows,
            self.cols,
            other.cols,
            F::one(),
            &self.data,
            self.cols as isize,
            1,
            &other.data,
            other.cols as isize,
            1,
            F::zero(),
            &mut out.data,
            other.cols as isize,
            1,
        );
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Self) -> Result<Self, LoraError> {
        if self.rows != other.rows {
            return Err(LoraError::ShapeMismatch("t_matmul shared dimension"));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        F::gemm(
            self.cols,
            self.rows,
            other.cols,
            F::one(),
            &self.data,
            1,
            self.cols as isize,
            &other.data,
            other.cols as isize,
            1,
            F::zero(),
            &mut out.data,
            other.cols as isize,
            1,
        );
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Self) -> Result<Self, LoraError> {
        if self.cols != other.cols {
            return Err(LoraError::ShapeMismatch("matmul_t shared dimension"));
        }
        let mut out = Self::zeros(self.rows, other.rows);
        F::gemm(
            self.rows,
            self.cols,
            other.rows,
            F::one(),
            &self.data,
            self.cols as isize,
            1,
            &other.data,
            1,
            other.cols as isize,
            F::zero(),
            &mut out.data,
            other.rows as isize,
            1,
        );
        Ok(out)
    }

    pub fn scale(&mut self, s: F) {
        self.data.iter_mut().for_each(|v| *v = *v * s);
    }

    pub fn add_scaled(&mut self, other: &Self, s: F) -> Result<(), LoraError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LoraError::ShapeMismatch("add_scaled"));
        }
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a = *a + *b * s);
        Ok(())
    }
}

/// A frozen linear layer `y = x·W0 + bias`, W0 being d×k.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseLinear<F> {
    pub weight: Matrix<F>,
    pub bias: Option<Vec<F>>,
    merged: bool,
}

impl<F: Scalar> BaseLinear<F> {
    pub fn new(weight: Matrix<F>, bias: Option<Vec<F>>) -> Result<Self, LoraError> {
        if let Some(b) = &bias {
            if b.len() != weight.cols() {
                return Err(LoraError::ShapeMismatch("bias length must equal k"));
            }
        }
        if weight.rows() == 0 || weight.cols() == 0 {
            return Err(LoraError::BadDimension("weight must be non-empty"));
        }
        Ok(Self {
            weight,
            bias,
            merged: false,
        })
    }

    pub fn d(&self) -> usize {
        self.weight.rows()
    }

    pub fn k(&self) -> usize {
        self.weight.cols()
    }

    pub fn is_merged(&self) -> bool {
        self.merged
    }

    pub fn forward(&self, x: &Matrix<F>) -> Result<Matrix<F>, LoraError> {
        let mut y = x.matmul(&self.weight)?;
        if let Some(bias) = &self.bias {
            add_bias(&mut y, bias);
        }
        Ok(y)
    }
}

fn add_bias<F: Scalar>(y: &mut Matrix<F>, bias: &[F]) {
    let k = y.cols();
    for row in y.as_mut_slice().chunks_mut(k) {
        row.iter_mut().zip(bias).for_each(|(v, b)| *v = *v + *b);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter<F> {
    /// d×r
    pub a: Matrix<F>,
    /// r×k
    pub b: Matrix<F>,
    pub alpha: F,
    pub seed: u64,
}

impl<F: Scalar> LoraAdapter<F> {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn d(&self) -> usize {
        self.a.rows()
    }

    pub fn k(&self) -> usize {
        self.b.cols()
    }

    /// True when `r >= min(d, k)`, i.e. the factorization saves nothing.
    pub fn rank_exceeds_advisory(&self) -> bool {
        self.rank() >= self.d().min(self.k())
    }

    /// `α·A·B`
    pub fn delta(&self) -> Matrix<F> {
        let mut ab = self.a.matmul(&self.b).expect("adapter factors are conformable");
        ab.scale(self.alpha);
        ab
    }

    pub fn with_alpha(mut self, alpha: F) -> Self {
        self.alpha = alpha;
        self
    }

    fn check(&self, base: &BaseLinear<F>) -> Result<(), LoraError> {
        if self.a.cols() != self.b.rows() {
            return Err(LoraError::ShapeMismatch("A columns must equal B rows"));
        }
        if self.d() != base.d() || self.k() != base.k() {
            return Err(LoraError::ShapeMismatch("adapter does not match base d×k"));
        }
        Ok(())
    }
}

/// Fresh adapter: `A ~ N(0, (1/r)²)` from the seed, `B = 0`, `α = 1`.
pub fn init_adapter<F: Scalar>(d: usize, k: usize, r: usize, seed: u64) -> Result<LoraAdapter<F>, LoraError> {
    if r < 1 {
        return Err(LoraError::BadRank(r));
    }
    if d == 0 || k == 0 {
        return Err(LoraError::BadDimension("d and k must be >= 1"));
    }
    if r >= d.min(k) {
        log::warn!("LoRA rank {r} >= min(d={d}, k={k}); the adapter is not low-rank");
    }
    let mut g = rng::stream(seed, 0x10AA);
    let std = 1.0 / r as f64;
    let a = (0..d * r).map(|_| F::from_f64(rng::normal_f64(&mut g) * std)).collect();
    Ok(LoraAdapter {
        a: Matrix::from_vec(d, r, a)?,
        b: Matrix::zeros(r, k),
        alpha: F::from_f64(TRAIN_ALPHA),
        seed,
    })
}

/// `W0 + α·A·B`
pub fn effective_weight<F: Scalar>(base: &BaseLinear<F>, adapter: &LoraAdapter<F>) -> Result<Matrix<F>, LoraError> {
    adapter.check(base)?;
    let mut w = base.weight.clone();
    w.add_scaled(&adapter.delta(), F::one())?;
    Ok(w)
}

/// Factored forward pass `x·W0 + bias + α·(x·A)·B`.
pub fn lora_forward<F: Scalar>(
    x: &Matrix<F>,
    base: &BaseLinear<F>,
    adapter: &LoraAdapter<F>,
) -> Result<Matrix<F>, LoraError> {
    adapter.check(base)?;
    if base.merged {
        return Err(LoraError::AlreadyMerged);
    }
    if x.cols() != base.d() {
        return Err(LoraError::ShapeMismatch("input width must equal d"));
    }
    let mut y = base.forward(x)?;
    let mut low = x.matmul(&adapter.a)?.matmul(&adapter.b)?;
    low.scale(adapter.alpha);
    y.add_scaled(&low, F::one())?;
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraGrads<F> {
    pub a: Matrix<F>,
    pub b: Matrix<F>,
    pub x: Matrix<F>,
}

/// Gradients of a scalar loss given `dL/dy`. The base weight gets none.
pub fn lora_backward<F: Scalar>(
    x: &Matrix<F>,
    grad_out: &Matrix<F>,
    base: &BaseLinear<F>,
    adapter: &LoraAdapter<F>,
) -> Result<LoraGrads<F>, LoraError> {
    adapter.check(base)?;
    if grad_out.rows() != x.rows() || grad_out.cols() != base.k() {
        return Err(LoraError::ShapeMismatch("grad_out must be batch×k"));
    }
    let xa = x.matmul(&adapter.a)?; // batch×r
    let gbt = grad_out.matmul_t(&adapter.b)?; // batch×r
    let mut ga = x.t_matmul(&gbt)?;
    ga.scale(adapter.alpha);
    let mut gb = xa.t_matmul(grad_out)?;
    gb.scale(adapter.alpha);
    let mut gx = grad_out.matmul_t(&base.weight)?;
    let via_adapter = gbt.matmul_t(&adapter.a)?;
    gx.add_scaled(&via_adapter, adapter.alpha)?;
    Ok(LoraGrads { a: ga, b: gb, x: gx })
}

/// Trainable parameters of an adapter: `r·(d+k)`.
pub fn trainable_param_count<F: Scalar>(adapter: &LoraAdapter<F>) -> usize {
    adapter.rank() * (adapter.d() + adapter.k())
}

/// Fold the adapter into the base weight.
pub fn merge<F: Scalar>(base: &BaseLinear<F>, adapter: &LoraAdapter<F>) -> Result<BaseLinear<F>, LoraError> {
    if base.merged {
        return Err(LoraError::AlreadyMerged);
    }
    let weight = effective_weight(base, adapter)?;
    Ok(BaseLinear {
        weight,
        bias: base.bias.clone(),
        merged: true,
    })
}

/// Remove a previously merged adapter.
pub fn unmerge<F: Scalar>(merged: &BaseLinear<F>, adapter: &LoraAdapter<F>) -> Result<BaseLinear<F>, LoraError> {
    if !merged.merged {
        return Err(LoraError::NotMerged);
    }
    adapter.check(merged)?;
    let mut weight = merged.weight.clone();
    weight.add_scaled(&adapter.delta(), -F::one())?;
    Ok(BaseLinear {
        weight,
        bias: merged.bias.clone(),
        merged: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    fn random_matrix(r: &mut rng::Rng, rows: usize, cols: usize) -> Matrix<f64> {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn random_base(r: &mut rng::Rng, d: usize, k: usize) -> BaseLinear<f64> {
        let bias = (0..k).map(|_| r.random_range(-1.0..1.0)).collect();
        BaseLinear::new(random_matrix(r, d, k), Some(bias)).unwrap()
    }

    #[test]
    fn init_has_zero_update_and_is_seeded() {
        let a = init_adapter::<f64>(12, 7, 3, 99).unwrap();
        assert!(a.b.is_zero());
        assert!(a.delta().is_zero());
        assert_eq!(a, init_adapter::<f64>(12, 7, 3, 99).unwrap());
        assert_ne!(a.a, init_adapter::<f64>(12, 7, 3, 100).unwrap().a);
        assert_eq!(a.alpha, 1.0);
        assert_eq!(init_adapter::<f64>(4, 4, 0, 1), Err(LoraError::BadRank(0)));
        let full = init_adapter::<f64>(6, 4, 4, 1).unwrap();
        assert!(full.rank_exceeds_advisory());
        assert!(!a.rank_exceeds_advisory());
    }

    #[test]
    fn effective_weight_hand_cases() {
        let w0 = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let base = BaseLinear::new(w0.clone(), None).unwrap();
        let adapter = LoraAdapter {
            a: Matrix::from_rows(&[&[1.0], &[0.0]]).unwrap(),
            b: Matrix::from_rows(&[&[0.0, 1.0]]).unwrap(),
            alpha: 1.0,
            seed: 0,
        };
        let w = effective_weight(&base, &adapter).unwrap();
        assert_eq!(w, Matrix::from_rows(&[&[1.0, 3.0], &[3.0, 4.0]]).unwrap());
        let scaled = adapter.clone().with_alpha(INFERENCE_ALPHA);
        let w = effective_weight(&base, &scaled).unwrap();
        let want = Matrix::from_rows(&[&[1.0, 2.9], &[3.0, 4.0]]).unwrap();
        assert!(w.max_abs_diff(&want) < 1e-12);
        let zero = init_adapter::<f64>(2, 2, 1, 5).unwrap();
        assert_eq!(effective_weight(&base, &zero).unwrap(), w0);
    }

    #[test]
    fn param_counts() {
        assert_eq!(trainable_param_count(&init_adapter::<f32>(320, 320, 128, 0).unwrap()), 81_920);
        assert_eq!(320 * 320, 102_400);
        assert_eq!(trainable_param_count(&init_adapter::<f32>(256, 256, 8, 0).unwrap()), 4_096);
    }

    #[test]
    fn factored_and_merged_paths_agree() {
        let mut r = rng::seeded(7);
        let base = random_base(&mut r, 16, 12);
        let mut adapter = init_adapter::<f64>(16, 12, 4, 3).unwrap();
        adapter.b = random_matrix(&mut r, 4, 12);
        let x = random_matrix(&mut r, 9, 16);
        let factored = lora_forward(&x, &base, &adapter).unwrap();
        let merged = merge(&base, &adapter).unwrap().forward(&x).unwrap();
        assert!(factored.max_abs_diff(&merged) <= 1e-6);
        // and in single precision
        let to32 = |m: &Matrix<f64>| Matrix::<f32>::from_vec(m.rows(), m.cols(), m.as_slice().iter().map(|&v| v as f32).collect()).unwrap();
        let base32 = BaseLinear::new(to32(&base.weight), base.bias.as_ref().map(|b| b.iter().map(|&v| v as f32).collect())).unwrap();
        let ad32 = LoraAdapter { a: to32(&adapter.a), b: to32(&adapter.b), alpha: 1.0f32, seed: 3 };
        let f32_factored = lora_forward(&to32(&x), &base32, &ad32).unwrap();
        let f32_merged = merge(&base32, &ad32).unwrap().forward(&to32(&x)).unwrap();
        assert!(f32_factored.max_abs_diff(&f32_merged) <= 1e-5);
    }

    #[test]
    fn merge_state_machine() {
        let mut r = rng::seeded(1);
        let base = random_base(&mut r, 8, 8);
        let mut adapter = init_adapter::<f64>(8, 8, 2, 1).unwrap();
        assert_eq!(merge(&base, &adapter).unwrap().weight, base.weight);
        adapter.b = random_matrix(&mut r, 2, 8);
        let merged = merge(&base, &adapter).unwrap();
        assert_eq!(merge(&merged, &adapter), Err(LoraError::AlreadyMerged));
        assert_eq!(unmerge(&base, &adapter), Err(LoraError::NotMerged));
        let back = unmerge(&merged, &adapter).unwrap();
        assert!(back.weight.max_abs_diff(&base.weight) <= 1e-6);
        assert!(!back.is_merged());
        let x = random_matrix(&mut r, 2, 8);
        assert_eq!(lora_forward(&x, &merged, &adapter), Err(LoraError::AlreadyMerged));
    }

    #[test]
    fn shape_mismatches() {
        let mut r = rng::seeded(1);
        let base = random_base(&mut r, 8, 6);
        let adapter = init_adapter::<f64>(6, 8, 2, 1).unwrap();
        assert!(matches!(effective_weight(&base, &adapter), Err(LoraError::ShapeMismatch(_))));
        let ok = init_adapter::<f64>(8, 6, 2, 1).unwrap();
        let x = random_matrix(&mut r, 3, 5);
        assert!(matches!(lora_forward(&x, &base, &ok), Err(LoraError::ShapeMismatch(_))));
    }

    #[test]
    fn backward_leaves_base_untouched_and_matches_manual() {
        let mut r = rng::seeded(2);
        let base = random_base(&mut r, 5, 4);
        let before = base.clone();
        let mut adapter = init_adapter::<f64>(5, 4, 2, 9).unwrap();
        adapter.b = random_matrix(&mut r, 2, 4);
        let x = random_matrix(&mut r, 3, 5);
        let g = random_matrix(&mut r, 3, 4);
        let grads = lora_backward(&x, &g, &base, &adapter).unwrap();
        assert_eq!(base, before);
        assert_eq!((grads.a.rows(), grads.a.cols()), (5, 2));
        assert_eq!((grads.b.rows(), grads.b.cols()), (2, 4));
        // dL/dx must equal g·W_effᵀ
        let w = effective_weight(&base, &adapter).unwrap();
        let gx = g.matmul_t(&w).unwrap();
        assert!(gx.max_abs_diff(&grads.x) < 1e-12);
    }
}
