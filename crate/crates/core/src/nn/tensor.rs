use alloc::vec;
use alloc::vec::Vec;

/// Dense NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor buffer length");
        Self { n, c, h, w, data }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.n, other.c, other.h, other.w)
    }

    pub fn item_len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn item(&self, i: usize) -> &[f32] {
        let l = self.item_len();
        &self.data[i * l..(i + 1) * l]
    }

    pub fn item_mut(&mut self, i: usize) -> &mut [f32] {
        let l = self.item_len();
        &mut self.data[i * l..(i + 1) * l]
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += *b);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Concatenate along channels.
    pub fn concat_channels(a: &Self, b: &Self) -> Self {
        assert!(a.n == b.n && a.h == b.h && a.w == b.w, "concat shape");
        let mut out = Self::zeros(a.n, a.c + b.c, a.h, a.w);
        for i in 0..a.n {
            let dst = out.item_mut(i);
            let la = a.item_len();
            dst[..la].copy_from_slice(a.item(i));
            dst[la..].copy_from_slice(b.item(i));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`] for gradients.
    pub fn split_channels(&self, c_first: usize) -> (Self, Self) {
        let mut a = Self::zeros(self.n, c_first, self.h, self.w);
        let mut b = Self::zeros(self.n, self.c - c_first, self.h, self.w);
        let la = a.item_len();
        for i in 0..self.n {
            let src = self.item(i);
            a.item_mut(i).copy_from_slice(&src[..la]);
            b.item_mut(i).copy_from_slice(&src[la..]);
        }
        (a, b)
    }

    /// Per-item token matrix (h·w × c) from the channel-major layout.
    pub fn item_tokens(&self, i: usize, out: &mut [f32]) {
        let hw = self.plane_len();
        let src = self.item(i);
        for ch in 0..self.c {
            for p in 0..hw {
                out[p * self.c + ch] = src[ch * hw + p];
            }
        }
    }

    /// Write a token matrix (h·w × c) back into item `i`.
    pub fn set_item_from_tokens(&mut self, i: usize, tokens: &[f32]) {
        let (hw, c) = (self.plane_len(), self.c);
        let dst = self.item_mut(i);
        for ch in 0..c {
            for p in 0..hw {
                dst[ch * hw + p] = tokens[p * c + ch];
            }
        }
    }

    /// All items as one token matrix ((n·h·w) × c).
    pub fn to_tokens(&self) -> Vec<f32> {
        let per = self.item_len();
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.n {
            self.item_tokens(i, &mut out[i * per..(i + 1) * per]);
        }
        out
    }

    pub fn from_tokens(n: usize, c: usize, h: usize, w: usize, tokens: &[f32]) -> Self {
        let mut t = Self::zeros(n, c, h, w);
        let per = c * h * w;
        for i in 0..n {
            t.set_item_from_tokens(i, &tokens[i * per..(i + 1) * per]);
        }
        t
    }
}
