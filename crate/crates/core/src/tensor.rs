//! Dense row-major matrices over `f32`/`f64` plus a seeded RNG.
//!
//! Frames are rows: a length-`T` feature sequence of width `D` is a `T x D`
//! matrix, so a memory-block tap is a strided row read. Training and
//! inference default to `f32`; gradient checking runs the same code in `f64`.

use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Element type of [`Matrix`]: implemented for `f32` and `f64`.
pub trait Scalar:
    Copy
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::ops::Add<Output = Self>
    + std::ops::Sub<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::Div<Output = Self>
    + std::ops::Neg<Output = Self>
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    /// Bytes per element in the on-disk little-endian encoding.
    const BYTES: usize;
    /// Flag value used in checkpoint headers.
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    fn read_le(bytes: &[u8]) -> Self;
    fn write_le(self, out: &mut Vec<u8>);
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BYTES: usize = 4;
    const PRECISION: Precision = Precision::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn exp(self) -> Self {
        f32::exp(self)
    }
    fn ln(self) -> Self {
        f32::ln(self)
    }
    fn abs(self) -> Self {
        f32::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f32::max(self, other)
    }
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BYTES: usize = 8;
    const PRECISION: Precision = Precision::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn abs(self) -> Self {
        f64::abs(self)
    }
    fn maximum(self, other: Self) -> Self {
        f64::max(self, other)
    }
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

/// Numeric precision of a model or checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn flag(self) -> u8 {
        match self {
            Precision::F32 => 1,
            Precision::F64 => 2,
        }
    }

    pub fn from_flag(flag: u8) -> Option<Self> {
        match flag {
            1 => Some(Precision::F32),
            2 => Some(Precision::F64),
            _ => None,
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Precision::F32 => write!(f, "f32"),
            Precision::F64 => write!(f, "f64"),
        }
    }
}

/// Dense 2-D array, row-major, rows = time frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<S: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Scalar> Matrix<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![S::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{rows}x{cols}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Builds from nested rows; for tests and tiny fixtures.
    pub fn from_rows(rows: &[Vec<S>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Matrix { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: S) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: S) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Converts element precision.
    pub fn cast<T: Scalar>(&self) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
        }
    }

    /// Standard matrix product `self * b`.
    pub fn matmul(&self, b: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != b.rows {
            return Err(Error::shape("matmul", self.shape_string(), b.shape_string()));
        }
        let mut out = Matrix::zeros(self.rows, b.cols);
        for i in 0..self.rows {
            accumulate_vec_mat(self.row(i), b, out.row_mut(i));
        }
        Ok(out)
    }

    /// `self^T * b` without materializing the transpose (backprop plumbing).
    pub fn matmul_tn(&self, b: &Matrix<S>) -> Result<Matrix<S>> {
        if self.rows != b.rows {
            return Err(Error::shape("matmul_tn", self.shape_string(), b.shape_string()));
        }
        let mut out = Matrix::zeros(self.cols, b.cols);
        for k in 0..self.rows {
            let arow = self.row(k);
            let brow = b.row(k);
            for i in 0..self.cols {
                let a = arow[i];
                let orow = out.row_mut(i);
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += a * bv;
                }
            }
        }
        Ok(out)
    }

    /// `self * b^T` without materializing the transpose.
    pub fn matmul_nt(&self, b: &Matrix<S>) -> Result<Matrix<S>> {
        if self.cols != b.cols {
            return Err(Error::shape("matmul_nt", self.shape_string(), b.shape_string()));
        }
        let mut out = Matrix::zeros(self.rows, b.rows);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = out.row_mut(i);
            for j in 0..b.rows {
                let mut acc = S::ZERO;
                for (&a, &bv) in arow.iter().zip(b.row(j)) {
                    acc += a * bv;
                }
                orow[j] = acc;
            }
        }
        Ok(out)
    }

    /// Column sums as a `1 x cols` matrix (bias gradients).
    pub fn col_sums(&self) -> Matrix<S> {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            let orow = out.row_mut(0);
            for (o, &v) in orow.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    /// `self += other`, shapes must match.
    pub fn add_in_place(&mut self, other: &Matrix<S>) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_in_place", self.shape_string(), other.shape_string()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += scale * other`, shapes must match.
    pub fn add_scaled_in_place(&mut self, other: &Matrix<S>, scale: S) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_scaled_in_place", self.shape_string(), other.shape_string()));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale_in_place(&mut self, scale: S) {
        for a in self.data.iter_mut() {
            *a *= scale;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|v| {
                let x = v.to_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// `out += x * m` for a single row vector `x`; `out` must be pre-initialized.
///
/// Accumulation runs k-outer / j-inner, so a one-row call produces bit-identical
/// results to the same row of a whole-matrix product. The streaming engine
/// relies on this.
pub fn accumulate_vec_mat<S: Scalar>(x: &[S], m: &Matrix<S>, out: &mut [S]) {
    debug_assert_eq!(x.len(), m.rows());
    debug_assert_eq!(out.len(), m.cols());
    for (k, &xv) in x.iter().enumerate() {
        let mrow = m.row(k);
        for (o, &mv) in out.iter_mut().zip(mrow) {
            *o += xv * mv;
        }
    }
}

/// Pointwise operations of [`elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Mul,
    Relu,
    ReluGradMask,
}

/// Pointwise combinator. `Add`/`Mul` need `b`; `Relu`/`ReluGradMask` ignore it.
///
/// `relu(x) = max(0, x)`; the mask is 1 for `x > 0` and 0 otherwise, fixing
/// the subgradient at the kink to 0.
pub fn elementwise<S: Scalar>(op: ElementwiseOp, a: &Matrix<S>, b: Option<&Matrix<S>>) -> Result<Matrix<S>> {
    let mut out = a.clone();
    match op {
        ElementwiseOp::Add | ElementwiseOp::Mul => {
            let b = b.ok_or_else(|| Error::Config("elementwise add/mul needs a second operand".into()))?;
            if a.shape() != b.shape() {
                return Err(Error::shape("elementwise", a.shape_string(), b.shape_string()));
            }
            for (o, &bv) in out.data_mut().iter_mut().zip(b.data()) {
                match op {
                    ElementwiseOp::Add => *o += bv,
                    ElementwiseOp::Mul => *o *= bv,
                    _ => unreachable!(),
                }
            }
        }
        ElementwiseOp::Relu => {
            for o in out.data_mut() {
                *o = o.maximum(S::ZERO);
            }
        }
        ElementwiseOp::ReluGradMask => {
            for o in out.data_mut() {
                *o = if *o > S::ZERO { S::ONE } else { S::ZERO };
            }
        }
    }
    Ok(out)
}

/// In-place softmax of one row with max subtraction.
pub fn softmax_row<S: Scalar>(row: &mut [S]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maximum(v);
    }
    let mut sum = S::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Row-wise softmax; each output row is nonnegative and sums to 1.
pub fn softmax_rows<S: Scalar>(a: &Matrix<S>) -> Matrix<S> {
    let mut out = a.clone();
    for r in 0..out.rows() {
        softmax_row(out.row_mut(r));
    }
    out
}

/// Initialization schemes for [`rand_init`].
#[derive(Debug, Clone, Copy)]
pub enum InitScheme {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
}

/// Seeded deterministic generator; identical seeds give identical draw
/// sequences on every platform.
#[derive(Debug, Clone)]
pub struct SeedRng {
    inner: ChaCha8Rng,
}

impl SeedRng {
    pub fn new(seed: u64) -> Self {
        SeedRng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for a derived purpose (per-sequence seeds).
    pub fn derive(&self, salt: u64) -> Self {
        let mut base = self.inner.clone();
        let mixed = base.gen::<u64>() ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        SeedRng::new(mixed)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        self.inner.gen_range(lo..hi)
    }

    pub fn gaussian(&mut self, mean: f64, std: f64) -> f64 {
        let normal = Normal::new(mean, std).expect("std must be positive");
        normal.sample(&mut self.inner)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    pub fn gen_range_usize(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn gen_bool(&mut self, p: f64) -> bool {
        self.inner.gen_bool(p)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        // Fisher-Yates, fixed order for determinism.
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// Fresh matrix with entries drawn from `scheme`; deterministic per seed state.
pub fn rand_init<S: Scalar>(rng: &mut SeedRng, rows: usize, cols: usize, scheme: InitScheme) -> Result<Matrix<S>> {
    match scheme {
        InitScheme::Uniform { lo, hi } => {
            if lo > hi {
                return Err(Error::Config(format!("uniform bounds inverted: lo={lo} > hi={hi}")));
            }
        }
        InitScheme::Gaussian { std, .. } => {
            if std <= 0.0 {
                return Err(Error::Config(format!("gaussian std must be > 0, got {std}")));
            }
        }
    }
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        let draw = match scheme {
            InitScheme::Uniform { lo, hi } => rng.uniform(lo, hi),
            InitScheme::Gaussian { mean, std } => rng.gaussian(mean, std),
        };
        *v = S::from_f64(draw);
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct triple-loop product, the independent oracle for matmul.
    fn matmul_oracle(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn max_rel_err(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y).abs() / (x.abs() + y.abs()).max(1e-300))
            .fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity() {
        let i2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let m = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(i2.matmul(&m).unwrap(), m);
    }

    #[test]
    fn matmul_hand_case() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let b = Matrix::from_rows(&[vec![3.0], vec![4.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), (1, 1));
        assert_eq!(c.get(0, 0), 11.0);
    }

    #[test]
    fn matmul_dimension_mismatch_names_shapes() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("4x2"), "got: {msg}");
    }

    #[test]
    fn matmul_matches_oracle_random_5x7_7x3() {
        let mut rng = SeedRng::new(7);
        let a: Matrix<f64> = rand_init(&mut rng, 5, 7, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let b: Matrix<f64> = rand_init(&mut rng, 7, 3, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let got = a.matmul(&b).unwrap();
        let want = matmul_oracle(&a, &b);
        assert!(max_rel_err(&got, &want) <= 1e-12);
    }

    #[test]
    fn matmul_matches_oracle_all_sizes_up_to_16() {
        let mut rng = SeedRng::new(99);
        for m in 1..=16usize {
            for n in (1..=16usize).step_by(3) {
                for k in (1..=16usize).step_by(5) {
                    let a: Matrix<f64> =
                        rand_init(&mut rng, m, k, InitScheme::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
                    let b: Matrix<f64> =
                        rand_init(&mut rng, k, n, InitScheme::Uniform { lo: -1.0, hi: 1.0 }).unwrap();
                    let got = a.matmul(&b).unwrap();
                    let want = matmul_oracle(&a, &b);
                    assert!(max_rel_err(&got, &want) <= 1e-12, "size {m}x{k}x{n}");
                }
            }
        }
    }

    fn transpose(m: &Matrix<f64>) -> Matrix<f64> {
        let mut t = Matrix::zeros(m.cols(), m.rows());
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                t.set(j, i, m.get(i, j));
            }
        }
        t
    }

    #[test]
    fn matmul_transposed_variants_match_oracle() {
        let mut rng = SeedRng::new(31);
        let a: Matrix<f64> = rand_init(&mut rng, 6, 4, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let b: Matrix<f64> = rand_init(&mut rng, 6, 5, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let want_tn = matmul_oracle(&transpose(&a), &b);
        let got_tn = a.matmul_tn(&b).unwrap();
        assert!(max_rel_err(&got_tn, &want_tn) <= 1e-12);

        let c: Matrix<f64> = rand_init(&mut rng, 5, 4, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let want_nt = matmul_oracle(&a, &transpose(&c));
        let got_nt = a.matmul_nt(&c).unwrap();
        assert!(max_rel_err(&got_nt, &want_nt) <= 1e-12);
    }

    #[test]
    fn elementwise_examples() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let b = Matrix::from_rows(&[vec![0.0, 1.0, 2.0]]);
        let mul = elementwise(ElementwiseOp::Mul, &a, Some(&b)).unwrap();
        assert_eq!(mul.row(0), &[0.0, 2.0, 6.0]);

        let x = Matrix::from_rows(&[vec![-1.0, 0.0, 2.0]]);
        let r = elementwise::<f64>(ElementwiseOp::Relu, &x, None).unwrap();
        assert_eq!(r.row(0), &[0.0, 0.0, 2.0]);
        let mask = elementwise::<f64>(ElementwiseOp::ReluGradMask, &x, None).unwrap();
        assert_eq!(mask.row(0), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let a = Matrix::<f32>::zeros(2, 2);
        let b = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(
            elementwise(ElementwiseOp::Add, &a, Some(&b)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn softmax_symmetry_and_overflow() {
        let m = Matrix::from_rows(&[vec![0.0, 0.0], vec![1000.0, 1000.0]]);
        let s = softmax_rows(&m);
        for r in 0..2 {
            assert!((s.get(r, 0) - 0.5f64).abs() <= 1e-12);
            assert!((s.get(r, 1) - 0.5f64).abs() <= 1e-12);
        }
        assert!(s.is_all_finite());
    }

    #[test]
    fn softmax_closed_form() {
        let m = Matrix::from_rows(&[vec![0.0, 3.0f64.ln()]]);
        let s = softmax_rows(&m);
        assert!((s.get(0, 0) - 0.25).abs() <= 1e-12);
        assert!((s.get(0, 1) - 0.75).abs() <= 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_random() {
        let mut rng = SeedRng::new(5);
        let m: Matrix<f64> = rand_init(&mut rng, 20, 9, InitScheme::Uniform { lo: -50.0, hi: 50.0 }).unwrap();
        let s = softmax_rows(&m);
        for r in 0..s.rows() {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn rand_init_determinism_and_degenerate() {
        let mut r1 = SeedRng::new(42);
        let mut r2 = SeedRng::new(42);
        let a: Matrix<f32> = rand_init(&mut r1, 4, 5, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let b: Matrix<f32> = rand_init(&mut r2, 4, 5, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        assert_eq!(a, b);

        let z: Matrix<f32> = rand_init(&mut r1, 3, 3, InitScheme::Uniform { lo: 0.0, hi: 0.0 }).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rand_init_invalid_params() {
        let mut rng = SeedRng::new(1);
        assert!(matches!(
            rand_init::<f32>(&mut rng, 1, 1, InitScheme::Gaussian { mean: 0.0, std: 0.0 }),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            rand_init::<f32>(&mut rng, 1, 1, InitScheme::Uniform { lo: 1.0, hi: 0.0 }),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gaussian_sample_mean_clt_bound() {
        let mut rng = SeedRng::new(2024);
        let m: Matrix<f64> = rand_init(&mut rng, 100, 1000, InitScheme::Gaussian { mean: 0.0, std: 1.0 }).unwrap();
        let mean: f64 = m.data().iter().sum::<f64>() / m.data().len() as f64;
        assert!(mean.abs() < 0.02, "sample mean {mean}");
    }
}
