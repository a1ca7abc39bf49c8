//! Dense containers, activations and the seeded generator shared by every
//! other module.
//!
//! Everything is generic over [`Scalar`]; the crate root exposes `f64`
//! aliases, which is what training and gradient checking use.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Deref, DerefMut};

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{check_dim, JrlError, Result};

/// Floating-point element type for all tensors.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` literal; every supported scalar can represent (a rounding of) any `f64`.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("scalar conversion from f64")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("scalar conversion to f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssign
        + Sum
        + Debug
        + Display
        + Default
        + Send
        + Sync
        + 'static
{
}

/// Dense column vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector<T>(Vec<T>);

impl<T: Scalar> Vector<T> {
    pub fn zeros(len: usize) -> Self {
        Vector(vec![T::zero(); len])
    }

    pub fn filled(len: usize, value: T) -> Self {
        Vector(vec![value; len])
    }

    pub fn from_fn(len: usize, f: impl FnMut(usize) -> T) -> Self {
        Vector((0..len).map(f).collect())
    }

    pub fn from_f64(values: &[f64]) -> Self {
        Vector(values.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.0.iter().map(|v| v.to_f64_lossy()).collect()
    }

    pub fn into_inner(self) -> Vec<T> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn dot(&self, other: &[T]) -> T {
        debug_assert_eq!(self.len(), other.len());
        self.0.iter().zip(other).map(|(&a, &b)| a * b).sum()
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: T, other: &[T]) {
        debug_assert_eq!(self.len(), other.len());
        for (a, &b) in self.0.iter_mut().zip(other) {
            *a += alpha * b;
        }
    }

    pub fn add_assign(&mut self, other: &[T]) {
        debug_assert_eq!(self.len(), other.len());
        for (a, &b) in self.0.iter_mut().zip(other) {
            *a += b;
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for a in self.0.iter_mut() {
            *a *= alpha;
        }
    }

    pub fn squared_norm(&self) -> T {
        self.0.iter().map(|&v| v * v).sum()
    }

    /// Index of the largest entry; first index wins ties. `None` for an empty vector.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<(usize, T)> = None;
        for (i, &v) in self.0.iter().enumerate() {
            match best {
                Some((_, b)) if v <= b => {}
                _ => best = Some((i, v)),
            }
        }
        best.map(|(i, _)| i)
    }
}

impl<T> From<Vec<T>> for Vector<T> {
    fn from(v: Vec<T>) -> Self {
        Vector(v)
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        &self.0
    }
}

impl<T> DerefMut for Vector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.0
    }
}

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        check_dim("matrix storage", rows * cols, data.len())?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_dim("matrix row", cols, r.len())?;
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Checked matrix-vector product.
    pub fn matvec(&self, v: &[T]) -> Result<Vector<T>> {
        check_dim("matvec", self.cols, v.len())?;
        let mut out = Vector::zeros(self.rows);
        self.gemv_acc(v, &mut out);
        Ok(out)
    }

    /// `out += self · x`
    #[inline]
    pub fn gemv_acc(&self, x: &[T], out: &mut [T]) {
        self.gemv_cols_acc(0, x, out);
    }

    /// `out += self[:, offset..offset+x.len()] · x`
    pub fn gemv_cols_acc(&self, offset: usize, x: &[T], out: &mut [T]) {
        debug_assert!(offset + x.len() <= self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols + offset..r * self.cols + offset + x.len()];
            let mut acc = T::zero();
            for (&w, &xi) in row.iter().zip(x) {
                acc += w * xi;
            }
            *o += acc;
        }
    }

    /// `out += selfᵀ · g`
    #[inline]
    pub fn gemv_t_acc(&self, g: &[T], out: &mut [T]) {
        self.gemv_t_cols_acc(0, g, out);
    }

    /// `out += self[:, offset..offset+out.len()]ᵀ · g`
    pub fn gemv_t_cols_acc(&self, offset: usize, g: &[T], out: &mut [T]) {
        debug_assert!(offset + out.len() <= self.cols);
        debug_assert_eq!(g.len(), self.rows);
        for (r, &gr) in g.iter().enumerate() {
            if gr == T::zero() {
                continue;
            }
            let row = &self.data[r * self.cols + offset..r * self.cols + offset + out.len()];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += gr * w;
            }
        }
    }

    /// Rank-one update `self += a · bᵀ`.
    #[inline]
    pub fn rank1_acc(&mut self, a: &[T], b: &[T]) {
        self.rank1_cols_acc(0, a, b);
    }

    /// `self[:, offset..offset+b.len()] += a · bᵀ`
    pub fn rank1_cols_acc(&mut self, offset: usize, a: &[T], b: &[T]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert!(offset + b.len() <= self.cols);
        let cols = self.cols;
        for (r, &ar) in a.iter().enumerate() {
            if ar == T::zero() {
                continue;
            }
            let row = &mut self.data[r * cols + offset..r * cols + offset + b.len()];
            for (w, &bi) in row.iter_mut().zip(b) {
                *w += ar * bi;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    // Split on sign so exp never overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(v: &[T]) -> Vector<T> {
    Vector(v.iter().map(|&x| sigmoid_scalar(x)).collect())
}

pub fn tanh<T: Scalar>(v: &[T]) -> Vector<T> {
    Vector(v.iter().map(|&x| x.tanh()).collect())
}

pub fn hadamard<T: Scalar>(a: &[T], b: &[T]) -> Result<Vector<T>> {
    check_dim("hadamard", a.len(), b.len())?;
    Ok(Vector(a.iter().zip(b).map(|(&x, &y)| x * y).collect()))
}

/// Max-stabilized softmax. Entries equal to `-inf` receive probability zero
/// as long as at least one entry is finite.
pub fn softmax<T: Scalar>(v: &[T]) -> Vector<T> {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    for o in out.iter_mut() {
        *o /= sum;
    }
    Vector(out)
}

/// `log Σ exp(v)`, stabilized.
pub fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = v.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Errors with a labelled message if any entry is NaN or infinite.
pub(crate) fn ensure_finite<T: Scalar>(what: &str, v: &[T]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(JrlError::NonFinite(what.to_string()))
    }
}

/// Deterministic generator: a ChaCha8 stream keyed by a 64-bit seed.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream, reproducible from (seed, stream).
    pub fn fork(&self, stream: u64) -> SeededRng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        SeededRng {
            seed: self.seed,
            inner,
        }
    }

    pub fn uniform<T: Scalar>(&mut self, lo: T, hi: T) -> T {
        let u: f64 = self.inner.random();
        lo + (hi - lo) * T::lit(u)
    }

    pub fn unit(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn normal<T: Scalar>(&mut self) -> T {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        T::lit(z)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<E>(&mut self, items: &mut [E]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn uniform_vector<T: Scalar>(&mut self, len: usize, radius: T) -> Vector<T> {
        Vector::from_fn(len, |_| self.uniform(-radius, radius))
    }

    pub fn uniform_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, radius: T) -> Matrix<T> {
        Matrix::from_fn(rows, cols, |_, _| self.uniform(-radius, radius))
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}
