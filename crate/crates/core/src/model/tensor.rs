//! Dense row-major matrices and the forward kernels shared by training and
//! inference.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

/// Scalar type the model can run in: `f32` for training, `f64` for
/// gradient checking.
pub trait Float:
    Copy
    + Debug
    + Default
    + PartialOrd
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const DTYPE: DType;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn neg_infinity() -> Self;
    fn is_finite(self) -> bool;

    /// `C = alpha * A B + beta * C` over strided views.
    ///
    /// # Safety
    /// The strides and dimensions must keep every access inside the
    /// buffers. Callers go through [`gemm`], which checks this.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

macro_rules! impl_float {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Float for $t {
            const DTYPE: DType = $dtype;

            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            fn neg_infinity() -> Self {
                <$t>::NEG_INFINITY
            }
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            unsafe fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_float!(f32, DType::F32, matrixmultiply::sgemm);
impl_float!(f64, DType::F64, matrixmultiply::dgemm);

/// A strided, read-only 2-D view.
#[derive(Clone, Copy, Debug)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "view out of bounds");
        }
    }
}

/// A strided, writable 2-D view.
#[derive(Debug)]
pub struct ViewMut<'a, T> {
    pub data: &'a mut [T],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

const SMALL_GEMM: usize = 16 * 1024;

fn small_gemm<T: Float>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut row = vec![T::zero(); n];
    for i in 0..m {
        row.iter_mut().for_each(|v| *v = T::zero());
        for p in 0..k {
            let x = a.data[a.offset + i * a.rs + p * a.cs];
            let base = b.offset + p * b.rs;
            if b.cs == 1 {
                for (r, &y) in row.iter_mut().zip(&b.data[base..base + n]) {
                    *r += x * y;
                }
            } else {
                for (j, r) in row.iter_mut().enumerate() {
                    *r += x * b.data[base + j * b.cs];
                }
            }
        }
        for (j, &r) in row.iter().enumerate() {
            let o = &mut c.data[c.offset + i * c.rs + j * c.cs];
            *o = if beta == T::zero() { alpha * r } else { beta * *o + alpha * r };
        }
    }
}

/// `c = alpha * a b + beta * c`.
pub fn gemm<T: Float>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    assert_eq!((a.rows, b.cols), (c.rows, c.cols), "output dimensions");
    a.check();
    b.check();
    if c.rows > 0 && c.cols > 0 {
        let last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "output view out of bounds");
    } else {
        return;
    }
    // Packing dominates for the per-head attention products; a direct loop
    // is faster there.
    if a.rows * a.cols * b.cols <= SMALL_GEMM {
        small_gemm(alpha, a, b, beta, c);
        return;
    }
    // SAFETY: all three views were bounds-checked above and `c` is a unique
    // borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        );
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Float> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn view(&self) -> View<'_, T> {
        View {
            data: &self.data,
            offset: 0,
            rows: self.rows,
            cols: self.cols,
            rs: self.cols,
            cs: 1,
        }
    }

    /// View of rows `start..start + rows`.
    pub fn rows_view(&self, start: usize, rows: usize) -> View<'_, T> {
        View {
            data: &self.data,
            offset: start * self.cols,
            rows,
            cols: self.cols,
            rs: self.cols,
            cs: 1,
        }
    }

    /// View of a rectangular block.
    pub fn block(&self, row: usize, rows: usize, col: usize, cols: usize) -> View<'_, T> {
        View {
            data: &self.data,
            offset: row * self.cols + col,
            rows,
            cols,
            rs: self.cols,
            cs: 1,
        }
    }

    pub fn block_mut(&mut self, row: usize, rows: usize, col: usize, cols: usize) -> ViewMut<'_, T> {
        let rs = self.cols;
        ViewMut {
            data: &mut self.data,
            offset: row * rs + col,
            rows,
            cols,
            rs,
            cs: 1,
        }
    }

    pub fn view_mut(&mut self) -> ViewMut<'_, T> {
        let (rows, cols) = (self.rows, self.cols);
        ViewMut {
            data: &mut self.data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// Appends one row; `row.len()` must equal `cols`.
    pub fn push_row(&mut self, row: &[T]) {
        assert_eq!(row.len(), self.cols, "row width");
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, f: T) {
        for a in &mut self.data {
            *a *= f;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v.to_f64() * v.to_f64()).sum()
    }

    pub fn cast<U: Float>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

pub fn matmul<T: Float>(a: View<'_, T>, b: View<'_, T>) -> Matrix<T> {
    let mut c = Matrix::zeros(a.rows, b.cols);
    gemm(T::one(), a, b, T::zero(), c.view_mut());
    c
}

/// `x w + b`, with `b` a single row broadcast over `x`'s rows.
pub fn linear_forward<T: Float>(x: &Matrix<T>, w: &Matrix<T>, b: Option<&Matrix<T>>) -> Matrix<T> {
    let mut y = matmul(x.view(), w.view());
    if let Some(b) = b {
        assert_eq!(b.len(), y.cols, "bias width");
        for r in 0..y.rows {
            for (v, bias) in y.row_mut(r).iter_mut().zip(&b.data) {
                *v += *bias;
            }
        }
    }
    y
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization. Returns the output together with the
/// normalized input and per-row inverse standard deviations for the backward
/// pass.
pub fn layer_norm_forward<T: Float>(x: &Matrix<T>, gain: &Matrix<T>, bias: &Matrix<T>) -> (Matrix<T>, Matrix<T>, Vec<T>) {
    let n = x.cols;
    let inv_n = T::from_f64(1.0 / n as f64);
    let eps = T::from_f64(LAYER_NORM_EPS);
    let mut y = Matrix::zeros(x.rows, n);
    let mut xhat = Matrix::zeros(x.rows, n);
    let mut inv_std = Vec::with_capacity(x.rows);
    for r in 0..x.rows {
        let row = x.row(r);
        let mut mean = T::zero();
        for &v in row {
            mean += v;
        }
        mean *= inv_n;
        let mut var = T::zero();
        for &v in row {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let xr = xhat.row_mut(r);
        for (o, &v) in xr.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let yr = &mut y.data[r * n..(r + 1) * n];
        for j in 0..n {
            yr[j] = xhat.data[r * n + j] * gain.data[j] + bias.data[j];
        }
    }
    (y, xhat, inv_std)
}

/// In-place softmax over `row[..valid]`; entries from `valid` on are set to
/// exactly zero.
pub fn softmax_prefix<T: Float>(row: &mut [T], valid: usize) {
    let mut max = T::neg_infinity();
    for &v in &row[..valid] {
        max = max.max(v);
    }
    let mut sum = T::zero();
    for v in &mut row[..valid] {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in &mut row[..valid] {
        *v *= inv;
    }
    for v in &mut row[valid..] {
        *v = T::zero();
    }
}

/// Log-softmax of a full row, returned as a new vector.
pub fn log_softmax<T: Float>(row: &[T]) -> Vec<T> {
    let mut max = T::neg_infinity();
    for &v in row {
        max = max.max(v);
    }
    let mut sum = T::zero();
    for &v in row {
        sum += (v - max).exp();
    }
    let lse = max + sum.ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Sinusoidal position encodings: even columns `sin(pos / 10000^(2i/d))`,
/// odd columns the matching cosine.
pub fn positional_encoding<T: Float>(len: usize, dim: usize) -> Matrix<T> {
    let mut pe = Matrix::zeros(len, dim);
    for pos in 0..len {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            pe.data[pos * dim + i] = T::from_f64(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    pe
}
