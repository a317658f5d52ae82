//! Dense rank-4 tensors in NCHW layout.
//!
//! A [`Tensor`] is a plain contiguous buffer plus a [`TensorShape`]; element
//! `(b, c, y, x)` lives at `((b * C + c) * H + y) * W + x`. Binary operations
//! require identical shapes: the only broadcasting is against a scalar.

use std::fmt;
use std::iter::Sum;

use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Floating point precisions the kernels are instantiated for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Element type of a [`Tensor`]: `f32` for training and inference, `f64` for
/// gradient checks.
pub trait Scalar: Float + Sum + Default + fmt::Debug + fmt::Display + Send + Sync + 'static {
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = a * b (+ c if accumulate)` for row-major `a: m x k`, `b: k x n`.
    /// `a_t`/`b_t` mean the stored buffers hold the transposes.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_t: bool,
        b: &[Self],
        b_t: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn gemm_strides(m: usize, k: usize, n: usize, a_t: bool, b_t: bool) -> (isize, isize, isize, isize) {
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    (rsa, csa, rsb, csb)
}

macro_rules! impl_scalar {
    ($t:ty, $prec:expr, $gemm:path) => {
        impl Scalar for $t {
            const PRECISION: Precision = $prec;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_t: bool,
                b: &[Self],
                b_t: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa, rsb, csb) = gemm_strides(m, k, n, a_t, b_t);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the slice lengths checked above cover every index
                // reachable through these dimensions and strides.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, Precision::Single, matrixmultiply::sgemm);
impl_scalar!(f64, Precision::Double, matrixmultiply::dgemm);

/// Extents of a rank-4 NCHW tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub fn new(batch: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        let dims = [batch, channels, height, width];
        if dims.contains(&0) {
            return Err(Error::InvalidShape(dims));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n <= isize::MAX as usize)
            .ok_or(Error::ShapeOverflow(dims))?;
        Ok(Self { batch, channels, height, width })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn offset(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        ((b * self.channels + c) * self.height + y) * self.width + x
    }

    /// Inverse of [`offset`](Self::offset).
    pub fn coords(&self, offset: usize) -> (usize, usize, usize, usize) {
        let x = offset % self.width;
        let rest = offset / self.width;
        let y = rest % self.height;
        let rest = rest / self.height;
        (rest / self.channels, rest % self.channels, y, x)
    }

    pub fn with_channels(&self, channels: usize) -> Self {
        Self { channels, ..*self }
    }

    pub fn with_spatial(&self, height: usize, width: usize) -> Self {
        Self { height, width, ..*self }
    }

    pub fn with_batch(&self, batch: usize) -> Self {
        Self { batch, ..*self }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.batch, self.channels, self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Scalar = f32> {
    shape: TensorShape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn full(shape: TensorShape, value: T) -> Self {
        Self { shape, data: vec![value; shape.numel()] }
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: TensorShape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn from_vec(shape: TensorShape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DataLength { len: data.len(), shape, expected: shape.numel() });
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: TensorShape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let data = (0..shape.numel())
            .map(|i| {
                let (b, c, y, x) = shape.coords(i);
                f(b, c, y, x)
            })
            .collect();
        Self { shape, data }
    }

    /// Zero-mean normal draws with standard deviation `sqrt(2 / fan_in)`.
    pub fn kaiming(shape: TensorShape, fan_in: usize, rng: &mut RngState) -> Self {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        Self::normal(shape, 0.0, std, rng)
    }

    pub fn normal(shape: TensorShape, mean: f64, std: f64, rng: &mut RngState) -> Self {
        let dist = Normal::new(mean, std).expect("standard deviation must be finite and >= 0");
        let data = (0..shape.numel()).map(|_| T::from_f64(dist.sample(rng.inner()))).collect();
        Self { shape, data }
    }

    pub fn uniform(shape: TensorShape, low: f64, high: f64, rng: &mut RngState) -> Self {
        let data = (0..shape.numel()).map(|_| T::from_f64(rng.inner().random_range(low..high))).collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> TensorShape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.shape.offset(b, c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, v: T) {
        let o = self.shape.offset(b, c, y, x);
        self.data[o] = v;
    }

    /// Contiguous `H x W` plane of batch item `b`, channel `c`.
    pub fn plane(&self, b: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (b * self.shape.channels + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, b: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (b * self.shape.channels + c) * p;
        &mut self.data[start..start + p]
    }

    /// All channels of batch item `b`.
    pub fn item(&self, b: usize) -> &[T] {
        let n = self.shape.channels * self.shape.plane();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn reshape(self, shape: TensorShape) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch { op, expected: self.shape, actual: other.shape });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.check_same(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape, data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.map(|v| v + s)
    }

    pub fn relu(&self) -> Self {
        self.map(|v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn abs(&self) -> Self {
        self.map(|v| v.abs())
    }

    pub fn neg(&self) -> Self {
        self.map(|v| -v)
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.map(|v| v.max(lo).min(hi))
    }

    /// In-place `self += other`.
    pub fn add_inplace(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "add_inplace")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    /// In-place `self -= other`.
    pub fn sub_inplace(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "sub_inplace")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a - b;
        }
        Ok(())
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_f64(self.data.len() as f64)
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_same(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(&a, &b)| a * b).sum())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != T::zero()).count()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Errors with `what` in the message if any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::NonFinite(format!("{what}: element {:?} is {}", self.shape.coords(i), self.data[i]))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect() }
    }

    /// Channels `[start, start + count)` of every batch item.
    pub fn select_channels(&self, start: usize, count: usize) -> Result<Self> {
        if count == 0 || start + count > self.shape.channels {
            return Err(Error::Incompatible {
                op: "select_channels",
                detail: format!("channels {start}..{} of {}", start + count, self.shape.channels),
            });
        }
        let shape = self.shape.with_channels(count);
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..self.shape.batch {
            for c in start..start + count {
                data.extend_from_slice(self.plane(b, c));
            }
        }
        Ok(Self { shape, data })
    }

    /// Batch item `b` as a batch-of-one tensor.
    pub fn batch_item(&self, b: usize) -> Self {
        Self { shape: self.shape.with_batch(1), data: self.item(b).to_vec() }
    }

    /// Concatenates tensors along the batch axis.
    pub fn stack(items: &[Self]) -> Result<Self> {
        let first =
            items.first().ok_or_else(|| Error::Incompatible { op: "stack", detail: "no tensors to stack".into() })?;
        let inner = first.shape.with_batch(1);
        let mut data = Vec::with_capacity(inner.numel() * items.len());
        let mut batch = 0;
        for t in items {
            if t.shape.with_batch(1) != inner {
                return Err(Error::ShapeMismatch { op: "stack", expected: inner, actual: t.shape });
            }
            batch += t.shape.batch;
            data.extend_from_slice(&t.data);
        }
        Ok(Self { shape: inner.with_batch(batch), data })
    }

    /// Crops the spatial window `[y0, y0 + h) x [x0, x0 + w)` from every plane.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        let s = self.shape;
        if h == 0 || w == 0 || y0 + h > s.height || x0 + w > s.width {
            return Err(Error::Incompatible {
                op: "crop",
                detail: format!("window {h}x{w} at ({y0}, {x0}) outside {}x{}", s.height, s.width),
            });
        }
        let shape = s.with_spatial(h, w);
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..s.batch {
            for c in 0..s.channels {
                let plane = self.plane(b, c);
                for y in y0..y0 + h {
                    data.extend_from_slice(&plane[y * s.width + x0..y * s.width + x0 + w]);
                }
            }
        }
        Ok(Self { shape, data })
    }
}

/// Deterministic, splittable random stream (ChaCha8 keyed by seed and stream).
///
/// Identical `(seed, stream)` pairs yield identical draws on every platform.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self { seed, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; does not advance `self`.
    pub fn split(&self, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream.wrapping_add(1));
        Self::new(rng.random())
    }

    pub fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.random()
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        if high <= low {
            return low;
        }
        self.rng.random_range(low..high)
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }
}

pub(crate) fn shape4(b: usize, c: usize, h: usize, w: usize) -> TensorShape {
    TensorShape::new(b, c, h, w).expect("statically valid shape")
}
