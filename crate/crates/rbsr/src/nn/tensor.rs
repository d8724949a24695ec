//! 4-D tensors in N-C-H-W layout, generic over f32/f64.
//!
//! Training runs in f32; gradient checks run the same code in f64.

use num_traits::{Float, NumAssign};

/// Element type bound for all tensor math.
pub trait Scalar:
    Float + NumAssign + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64_lossy(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn to_f32_lossy(self) -> f32;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), n * c * h * w, "tensor data length");
        Self { n, c, h, w, data }
    }

    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self::new(n, c, h, w, vec![T::zero(); n * c * h * w])
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(other.n, other.c, other.h, other.w)
    }

    pub fn scalar(v: T) -> Self {
        Self::new(1, 1, 1, 1, vec![v])
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[((n * self.c + c) * self.h + h) * self.w + w]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut T {
        &mut self.data[((n * self.c + c) * self.h + h) * self.w + w]
    }

    /// One (n, c) spatial plane as a slice.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let sz = self.h * self.w;
        let off = (n * self.c + c) * sz;
        &self.data[off..off + sz]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let sz = self.h * self.w;
        let off = (n * self.c + c) * sz;
        &mut self.data[off..off + sz]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self::new(self.n, self.c, self.h, self.w, self.data.iter().map(|&x| f(x)).collect())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// Lossy element cast between float widths.
    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4::new(
            self.n,
            self.c,
            self.h,
            self.w,
            self.data.iter().map(|&x| U::from_f64(x.to_f64_lossy())).collect(),
        )
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&self, other: &Self) -> Self {
        assert_eq!(
            (self.n, self.h, self.w),
            (other.n, other.h, other.w),
            "concat spatial/batch shape"
        );
        let mut out = Tensor4::zeros(self.n, self.c + other.c, self.h, self.w);
        for n in 0..self.n {
            for c in 0..self.c {
                out.plane_mut(n, c).copy_from_slice(self.plane(n, c));
            }
            for c in 0..other.c {
                out.plane_mut(n, self.c + c).copy_from_slice(other.plane(n, c));
            }
        }
        out
    }

    /// Split a channel-concatenated tensor back into (first c0 channels, rest).
    pub fn split_channels(&self, c0: usize) -> (Self, Self) {
        assert!(c0 <= self.c, "split point beyond channel count");
        let mut a = Tensor4::zeros(self.n, c0, self.h, self.w);
        let mut b = Tensor4::zeros(self.n, self.c - c0, self.h, self.w);
        for n in 0..self.n {
            for c in 0..c0 {
                a.plane_mut(n, c).copy_from_slice(self.plane(n, c));
            }
            for c in c0..self.c {
                b.plane_mut(n, c - c0).copy_from_slice(self.plane(n, c));
            }
        }
        (a, b)
    }
}
