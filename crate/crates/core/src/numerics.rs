//! Dense numeric building blocks shared by every other module.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

use crate::error::{invalid, Error, Result};

/// Floating point element type of every kernel (`f32` or `f64`).
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Lossy conversion from an `f64` literal.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dot product with eight independent accumulators so the compiler can
/// vectorize the reduction.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

/// `y += alpha * x`
#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major dense matrix with finite entries.
#[derive(Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    /// Builds a matrix from row-major data, rejecting wrong lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(invalid!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows.saturating_mul(cols),
                data.len()
            ));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(rows * cols, data.len());
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![T::zero(); rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { T::one() } else { T::zero() })
    }

    /// Panics if `f` produces a non-finite value.
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let x = f(i, j);
                assert!(x.is_finite(), "non-finite entry at ({i}, {j})");
                data.push(x);
            }
        }
        Self::from_raw(rows, cols, data)
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(invalid!("ragged rows"));
        }
        Self::new(
            rows.len(),
            cols,
            rows.iter().flat_map(|r| r.iter().copied()).collect(),
        )
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, x: T) {
        self.data[i * self.cols + j] = x;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub(crate) fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Converts the element type.
    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        )
    }

    pub fn scale(&self, s: T) -> Self {
        Self::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|&x| x * s).collect(),
        )
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        assert!(start <= end && end <= self.rows);
        Self::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    /// Horizontal concatenation.
    pub fn hcat(parts: &[Matrix<T>]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(invalid!("hcat of matrices with different row counts"));
        }
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        Ok(Self::from_raw(rows, cols, data))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&x| x * x).sum::<T>().sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    /// Largest absolute elementwise difference. Panics on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (&a, &b)| m.max((a - b).abs()))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(invalid!(
                "shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            ));
        }
        Ok(Self::from_raw(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a - b)
                .collect(),
        ))
    }
}

impl<T: Debug> Debug for Matrix<T> {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(16) {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            writeln!(f, "  {:?}", row)?;
        }
        if self.rows > 16 {
            writeln!(f, "  ...")?;
        }
        write!(f, "]")
    }
}

/// Row-major matrix of booleans.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BinaryMatrix {
    pub fn new(rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if rows.checked_mul(cols) != Some(bits.len()) {
            return Err(invalid!(
                "binary matrix {rows}x{cols} needs {} bits",
                rows * cols
            ));
        }
        Ok(Self { rows, cols, bits })
    }

    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        Self {
            rows,
            cols,
            bits: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    /// Lower-triangular (causal) pattern including the diagonal.
    pub fn causal(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| j <= i)
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
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[bool] {
        &self.bits[i * self.cols..(i + 1) * self.cols]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.bits
    }

    /// 0/1 matrix in the given precision.
    pub fn to_matrix<T: Real>(&self) -> Matrix<T> {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.bits
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        )
    }
}

/// Pooling reduction applied along the sequence axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PoolMethod {
    Average,
    Max,
    Min,
}

/// Standard matrix product.
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(invalid!("matmul {:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik != T::zero() {
                axpy(aik, b.row(k), orow);
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ`
pub fn matmul_transb<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(invalid!("matmul_transb {:?} x {:?}ᵀ", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// Row softmax restricted to `allowed` entries; disallowed entries are exactly zero.
pub fn row_softmax_masked<T: Real>(m: &Matrix<T>, allowed: &BinaryMatrix) -> Result<Matrix<T>> {
    if m.rows != allowed.rows || m.cols != allowed.cols {
        return Err(invalid!(
            "softmax mask {}x{} does not match {:?}",
            allowed.rows,
            allowed.cols,
            m.shape()
        ));
    }
    let mut out = Matrix::zeros(m.rows, m.cols);
    for i in 0..m.rows {
        let (x, mask) = (m.row(i), allowed.row(i));
        let max = x
            .iter()
            .zip(mask)
            .filter(|(_, &a)| a)
            .map(|(&v, _)| v)
            .fold(T::neg_infinity(), T::max);
        if max == T::neg_infinity() {
            return Err(Error::DegenerateRow { row: i });
        }
        let orow = out.row_mut(i);
        let mut sum = T::zero();
        for j in 0..x.len() {
            if mask[j] {
                let e = (x[j] - max).exp();
                orow[j] = e;
                sum += e;
            }
        }
        let inv = T::one() / sum;
        for v in orow.iter_mut() {
            *v *= inv;
        }
    }
    Ok(out)
}

/// Pools non-overlapping blocks of `block_size` consecutive rows. A partial
/// final block pools over the rows it actually has.
pub fn seq_pool<T: Real>(
    x: &Matrix<T>,
    block_size: usize,
    method: PoolMethod,
) -> Result<Matrix<T>> {
    if x.rows == 0 || x.cols == 0 {
        return Err(invalid!("cannot pool an empty matrix {:?}", x.shape()));
    }
    if block_size == 0 {
        return Err(invalid!("block size must be at least 1"));
    }
    let nb = crate::num_blocks(x.rows, block_size);
    let mut out = Matrix::zeros(nb, x.cols);
    for b in 0..nb {
        let (start, end) = (b * block_size, ((b + 1) * block_size).min(x.rows));
        let orow = out.row_mut(b);
        orow.copy_from_slice(x.row(start));
        for r in start + 1..end {
            let xr = x.row(r);
            match method {
                PoolMethod::Average => orow.iter_mut().zip(xr).for_each(|(o, &v)| *o += v),
                PoolMethod::Max => orow.iter_mut().zip(xr).for_each(|(o, &v)| *o = o.max(v)),
                PoolMethod::Min => orow.iter_mut().zip(xr).for_each(|(o, &v)| *o = o.min(v)),
            }
        }
        if method == PoolMethod::Average {
            let inv = T::one() / T::lit((end - start) as f64);
            orow.iter_mut().for_each(|o| *o *= inv);
        }
    }
    Ok(out)
}

/// Rotary frequencies `theta^(-2i/d)` for `i in 0..d/2`.
pub(crate) fn rope_frequencies<T: Real>(d: usize, theta: T) -> Vec<T> {
    (0..d / 2)
        .map(|i| theta.powf(-T::lit((2 * i) as f64) / T::lit(d as f64)))
        .collect()
}

/// Rotates each row pairwise: pair `(x[2i], x[2i+1])` of row `r` turns by
/// `positions[r] * theta^(-2i/d)`.
pub fn rope_rotate<T: Real>(x: &Matrix<T>, positions: &[T], theta: T) -> Result<Matrix<T>> {
    let mut out = x.clone();
    rope_rotate_in_place(&mut out, positions, theta)?;
    Ok(out)
}

pub(crate) fn rope_rotate_in_place<T: Real>(
    x: &mut Matrix<T>,
    positions: &[T],
    theta: T,
) -> Result<()> {
    if x.cols % 2 != 0 {
        return Err(invalid!(
            "rotary embedding needs an even width, got {}",
            x.cols
        ));
    }
    if positions.len() != x.rows {
        return Err(invalid!(
            "{} positions for {} rows",
            positions.len(),
            x.rows
        ));
    }
    if !(theta > T::zero()) {
        return Err(invalid!("rope theta must be positive"));
    }
    let freqs = rope_frequencies(x.cols, theta);
    for (r, &pos) in positions.iter().enumerate() {
        if pos == T::zero() {
            continue;
        }
        let row = x.row_mut(r);
        for (i, &w) in freqs.iter().enumerate() {
            let (s, c) = (pos * w).sin_cos();
            let (a, b) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = a * c - b * s;
            row[2 * i + 1] = a * s + b * c;
        }
    }
    Ok(())
}

/// Token positions `0..n` in the requested precision.
pub fn positions<T: Real>(n: usize) -> Vec<T> {
    (0..n).map(|i| T::lit(i as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = [0.0f64; 0].to_vec();
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.push(s);
            }
        }
        Matrix::new(a.rows(), b.cols(), out).unwrap()
    }

    #[test]
    fn matrix_rejects_bad_input() {
        assert!(matches!(
            Matrix::new(2, 2, vec![1.0f64; 3]),
            Err(Error::InvalidArgument(_))
        ));
        assert_eq!(
            Matrix::new(1, 2, vec![1.0f64, f64::NAN]),
            Err(Error::NonFinite { index: 1 })
        );
        assert!(Matrix::new(1, 1, vec![f32::INFINITY]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let m = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_example() {
        let a = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Matrix::from_rows(&[&[1.0], &[1.0]]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.as_slice(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random(7, 5, &mut rng), random(5, 3, &mut rng));
        let fast = matmul(&a, &b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let bt = b.transpose();
        assert!(matmul_transb(&a, &bt).unwrap().max_abs_diff(&fast) < 1e-12);
    }

    #[test]
    fn matmul_dimension_mismatch() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::InvalidArgument(_))));
        assert!(matmul_transb(&a, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn softmax_examples() {
        let all = BinaryMatrix::filled(1, 3, true);
        let u = row_softmax_masked(&Matrix::<f64>::zeros(1, 3), &all).unwrap();
        for &v in u.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let m = Matrix::from_rows(&[&[1.0f64, 2.0, 3.0]]).unwrap();
        let s = row_softmax_masked(&m, &all).unwrap();
        // exp(k) / (e + e^2 + e^3)
        let z = 1f64.exp() + 2f64.exp() + 3f64.exp();
        let expect = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        for (a, b) in s.as_slice().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in s.as_slice().iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((a - b).abs() < 1e-4);
        }

        let one = BinaryMatrix::new(1, 2, vec![true, false]).unwrap();
        let m = Matrix::from_rows(&[&[5.0f64, 1e3]]).unwrap();
        assert_eq!(
            row_softmax_masked(&m, &one).unwrap().as_slice(),
            &[1.0, 0.0]
        );
    }

    #[test]
    fn softmax_degenerate_row() {
        let mask = BinaryMatrix::new(2, 2, vec![true, false, false, false]).unwrap();
        assert_eq!(
            row_softmax_masked(&Matrix::<f32>::zeros(2, 2), &mask),
            Err(Error::DegenerateRow { row: 1 })
        );
    }

    #[test]
    fn softmax_large_logits_are_stable() {
        let m = Matrix::from_rows(&[&[1000.0f32, 999.0]]).unwrap();
        let s = row_softmax_masked(&m, &BinaryMatrix::filled(1, 2, true)).unwrap();
        assert!((s.get(0, 0) + s.get(0, 1) - 1.0).abs() < 1e-6);
        assert!(s.get(0, 0) > s.get(0, 1));
    }

    #[test]
    fn pooling_examples() {
        let x = Matrix::from_rows(&[&[1.0f64, 2.0], &[3.0, 4.0]]).unwrap();
        let avg = seq_pool(&x, 2, PoolMethod::Average).unwrap();
        assert_eq!(avg.as_slice(), &[2.0, 3.0]);
        assert_eq!(
            seq_pool(&x, 2, PoolMethod::Max).unwrap().as_slice(),
            &[3.0, 4.0]
        );
        assert_eq!(
            seq_pool(&x, 2, PoolMethod::Min).unwrap().as_slice(),
            &[1.0, 2.0]
        );

        let c = Matrix::from_fn(10, 3, |_, _| 0.25f64);
        for m in [PoolMethod::Average, PoolMethod::Max, PoolMethod::Min] {
            let p = seq_pool(&c, 4, m).unwrap();
            assert_eq!(p.shape(), (3, 3));
            assert!(p.as_slice().iter().all(|&v| v == 0.25));
        }
    }

    #[test]
    fn pooling_partial_block_uses_actual_count() {
        let x = Matrix::from_rows(&[&[1.0f64], &[3.0], &[-4.0]]).unwrap();
        assert_eq!(
            seq_pool(&x, 2, PoolMethod::Average).unwrap().as_slice(),
            &[2.0, -4.0]
        );
        assert_eq!(
            seq_pool(&x, 2, PoolMethod::Min).unwrap().as_slice(),
            &[1.0, -4.0]
        );
    }

    #[test]
    fn pooling_order_min_avg_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(64, 8, &mut rng);
        let mn = seq_pool(&x, 16, PoolMethod::Min).unwrap();
        let av = seq_pool(&x, 16, PoolMethod::Average).unwrap();
        let mx = seq_pool(&x, 16, PoolMethod::Max).unwrap();
        for i in 0..mn.as_slice().len() {
            assert!(mn.as_slice()[i] <= av.as_slice()[i]);
            assert!(av.as_slice()[i] <= mx.as_slice()[i]);
        }
    }

    #[test]
    fn pooling_rejects_empty() {
        assert!(seq_pool(&Matrix::<f64>::zeros(0, 4), 2, PoolMethod::Max).is_err());
        assert!(seq_pool(&Matrix::<f64>::zeros(2, 4), 0, PoolMethod::Max).is_err());
    }

    #[test]
    fn rope_examples() {
        let x = Matrix::from_rows(&[&[0.3f64, -1.2, 2.0, 0.5]]).unwrap();
        assert_eq!(rope_rotate(&x, &[0.0], 10000.0).unwrap(), x);

        let e = Matrix::from_rows(&[&[1.0f64, 0.0]]).unwrap();
        let r = rope_rotate(&e, &[core::f64::consts::FRAC_PI_2], 1.0).unwrap();
        assert!(r.get(0, 0).abs() < 1e-12);
        assert!((r.get(0, 1) - 1.0).abs() < 1e-12);

        assert!(rope_rotate(&Matrix::<f64>::zeros(1, 3), &[1.0], 1.0).is_err());
        assert!(rope_rotate(&Matrix::<f64>::zeros(2, 2), &[1.0], 1.0).is_err());
    }

    #[test]
    fn rope_relative_position() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let theta = 10000.0;
        for _ in 0..50 {
            let x = random(1, 16, &mut rng);
            let y = random(1, 16, &mut rng);
            let (i, j) = (
                rng.random_range(0..128) as f64,
                rng.random_range(0..128) as f64,
            );
            let lhs = dot(
                rope_rotate(&x, &[i], theta).unwrap().row(0),
                rope_rotate(&y, &[j], theta).unwrap().row(0),
            );
            let rhs = dot(rope_rotate(&x, &[i - j], theta).unwrap().row(0), y.row(0));
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random(n, m, &mut rng), random(m, p, &mut rng), random(p, q, &mut rng));
            let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
            let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
            prop_assert!(left.max_abs_diff(&right) < 1e-9);
        }

        #[test]
        fn softmax_rows_are_distributions(seed in any::<u64>(), rows in 1usize..8, cols in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-30.0..30.0));
            let mask = BinaryMatrix::from_fn(rows, cols, |i, j| j == i % cols || rng.random_bool(0.5));
            let s = row_softmax_masked(&m, &mask).unwrap();
            for i in 0..rows {
                let total: f64 = s.row(i).iter().sum();
                prop_assert!((total - 1.0).abs() < 1e-6);
                for j in 0..cols {
                    if !mask.get(i, j) {
                        prop_assert_eq!(s.get(i, j), 0.0);
                    }
                }
            }
        }

        #[test]
        fn unit_block_pooling_is_identity(seed in any::<u64>(), rows in 1usize..20, cols in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(rows, cols, &mut rng);
            for m in [PoolMethod::Average, PoolMethod::Max, PoolMethod::Min] {
                prop_assert_eq!(&seq_pool(&x, 1, m).unwrap(), &x);
            }
        }

        #[test]
        fn rope_preserves_row_norms(seed in any::<u64>(), rows in 1usize..6, half in 1usize..9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(rows, 2 * half, &mut rng);
            let pos: Vec<f64> = (0..rows).map(|_| rng.random_range(0.0..5000.0)).collect();
            let r = rope_rotate(&x, &pos, 10000.0).unwrap();
            for i in 0..rows {
                let (a, b) = (dot(x.row(i), x.row(i)).sqrt(), dot(r.row(i), r.row(i)).sqrt());
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
