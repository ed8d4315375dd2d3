//! Scalar abstraction and the dense kernels the model is built from.
//!
//! The whole network is written generically over [`Real`] so the production
//! path runs in `f32` while the finite-difference gradient harness runs the
//! identical code in `f64`. Matrices are row-major; the inner loops are
//! arranged so the compiler can vectorize the unit-stride dimension.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Clone
    + PartialOrd
    + Debug
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
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn abs(self) -> Self;
    fn maximum(self, other: Self) -> Self;
    fn is_finite(self) -> bool;
    /// `self * a + b` with a fused multiply-add where the target supports it.
    fn mul_add(self, a: Self, b: Self) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            #[inline(always)]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline(always)]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline(always)]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline(always)]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline(always)]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            // tanh through exp is noticeably faster than the libm tanh here
            // and saturates exactly for large |x|.
            #[inline(always)]
            fn tanh(self) -> Self {
                if self >= 0.0 {
                    let e = (-2.0 * self).exp();
                    (1.0 - e) / (1.0 + e)
                } else {
                    let e = (2.0 * self).exp();
                    (e - 1.0) / (e + 1.0)
                }
            }
            #[inline(always)]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline(always)]
            fn maximum(self, other: Self) -> Self {
                if self > other {
                    self
                } else {
                    other
                }
            }
            #[inline(always)]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline(always)]
            fn mul_add(self, a: Self, b: Self) -> Self {
                <$t>::mul_add(self, a, b)
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    #[inline(always)]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline(always)]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline(always)]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline(always)]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn map_to_f32(&self) -> Mat<f32> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v.to_f64() as f32).collect(),
        }
    }
}

impl Mat<f32> {
    pub fn map_to<T: Real>(&self) -> Mat<T> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        }
    }
}

/// out[M x N] += x[M x K] . w[K x N]
///
/// The weight is stored input-major so the inner loop is unit stride on both
/// `w` and `out`; four inputs are folded per pass over the output row to
/// amortize its loads and stores.
pub fn matmul_acc<T: Real>(out: &mut Mat<T>, x: &Mat<T>, w: &Mat<T>) {
    assert_eq!(x.cols, w.rows);
    assert_eq!(out.rows, x.rows);
    assert_eq!(out.cols, w.cols);
    let n = w.cols;
    let k_len = x.cols;
    let k_main = k_len / 4 * 4;
    for t in 0..x.rows {
        let xr = x.row(t);
        let or = &mut out.data[t * n..(t + 1) * n];
        let mut k = 0;
        while k < k_main {
            let (x0, x1, x2, x3) = (xr[k], xr[k + 1], xr[k + 2], xr[k + 3]);
            let w0 = &w.data[k * n..(k + 1) * n];
            let w1 = &w.data[(k + 1) * n..(k + 2) * n];
            let w2 = &w.data[(k + 2) * n..(k + 3) * n];
            let w3 = &w.data[(k + 3) * n..(k + 4) * n];
            for j in 0..n {
                let acc = x0.mul_add(w0[j], x1.mul_add(w1[j], x2.mul_add(w2[j], x3 * w3[j])));
                or[j] += acc;
            }
            k += 4;
        }
        while k < k_len {
            let xv = xr[k];
            let wr = &w.data[k * n..(k + 1) * n];
            for j in 0..n {
                or[j] = xv.mul_add(wr[j], or[j]);
            }
            k += 1;
        }
    }
}

/// out[M x K] += dy[M x N] . w^T  (w stored [K x N])
pub fn matmul_acc_wt<T: Real>(out: &mut Mat<T>, dy: &Mat<T>, w: &Mat<T>) {
    assert_eq!(dy.cols, w.cols);
    assert_eq!(out.rows, dy.rows);
    assert_eq!(out.cols, w.rows);
    for t in 0..dy.rows {
        let dr = dy.row(t);
        for k in 0..w.rows {
            let wr = w.row(k);
            out.data[t * w.rows + k] += dot(dr, wr);
        }
    }
}

/// dw[K x N] += x^T . dy   (x is [M x K], dy is [M x N]); four sequence rows
/// are folded per pass over each weight row.
pub fn grad_weight_acc<T: Real>(dw: &mut Mat<T>, x: &Mat<T>, dy: &Mat<T>) {
    assert_eq!(x.rows, dy.rows);
    assert_eq!(dw.rows, x.cols);
    assert_eq!(dw.cols, dy.cols);
    let n = dy.cols;
    let m = x.rows;
    let m_main = m / 4 * 4;
    let mut t = 0;
    while t < m_main {
        let (x0, x1, x2, x3) = (x.row(t), x.row(t + 1), x.row(t + 2), x.row(t + 3));
        let (d0, d1, d2, d3) = (dy.row(t), dy.row(t + 1), dy.row(t + 2), dy.row(t + 3));
        for k in 0..x.cols {
            let (a0, a1, a2, a3) = (x0[k], x1[k], x2[k], x3[k]);
            let wr = &mut dw.data[k * n..(k + 1) * n];
            for j in 0..n {
                let acc = a0.mul_add(d0[j], a1.mul_add(d1[j], a2.mul_add(d2[j], a3 * d3[j])));
                wr[j] += acc;
            }
        }
        t += 4;
    }
    while t < m {
        let xr = x.row(t);
        let dr = dy.row(t);
        for (k, &xv) in xr.iter().enumerate() {
            let wr = &mut dw.data[k * n..(k + 1) * n];
            for j in 0..n {
                wr[j] = xv.mul_add(dr[j], wr[j]);
            }
        }
        t += 1;
    }
}

/// Dot product with eight fixed accumulator lanes. The explicit lanes let the
/// compiler vectorize the reduction while keeping the summation order fixed,
/// so results stay bit-reproducible run to run.
#[inline(always)]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let chunks = n / 8;
    let mut lanes = [T::ZERO; 8];
    for c in 0..chunks {
        let off = c * 8;
        let (av, bv) = (&a[off..off + 8], &b[off..off + 8]);
        for l in 0..8 {
            lanes[l] = av[l].mul_add(bv[l], lanes[l]);
        }
    }
    let mut acc = T::ZERO;
    for l in lanes {
        acc += l;
    }
    for i in chunks * 8..n {
        acc = a[i].mul_add(b[i], acc);
    }
    acc
}

pub fn axpy<T: Real>(y: &mut [T], a: T, x: &[T]) {
    debug_assert_eq!(y.len(), x.len());
    for i in 0..y.len() {
        y[i] = a.mul_add(x[i], y[i]);
    }
}

/// In-place numerically stable softmax over a slice.
pub fn softmax_inplace<T: Real>(xs: &mut [T]) {
    let mut m = xs[0];
    for &x in xs.iter() {
        m = m.maximum(x);
    }
    let mut sum = T::ZERO;
    for x in xs.iter_mut() {
        *x = (*x - m).exp();
        sum += *x;
    }
    let inv = T::ONE / sum;
    for x in xs.iter_mut() {
        *x *= inv;
    }
}

/// log(sum(exp(xs))) without overflow.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let mut m = xs[0];
    for &x in xs.iter() {
        m = m.maximum(x);
    }
    let mut sum = T::ZERO;
    for &x in xs.iter() {
        sum += (x - m).exp();
    }
    m + sum.ln()
}

/// tanh-form GELU.
#[inline(always)]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (T::ONE + inner.tanh())
}

/// d gelu(x) / dx for the tanh form.
#[inline(always)]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044_715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let sech2 = T::ONE - t * t;
    half * (T::ONE + t) + half * x * sech2 * c * (T::ONE + three * k * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_matches_hand_computation() {
        // x = [[1,2],[3,4]], w = [[5,6],[7,8]] -> [[19,22],[43,50]]
        let x = Mat::from_rows(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]);
        let w = Mat::from_rows(2, 2, vec![5.0, 6.0, 7.0, 8.0]);
        let mut out = Mat::zeros(2, 2);
        matmul_acc(&mut out, &x, &w);
        assert_eq!(out.data, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_wt_is_transpose_product() {
        let dy = Mat::from_rows(1, 2, vec![1.0f64, 2.0]);
        let w = Mat::from_rows(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let mut out = Mat::zeros(1, 3);
        matmul_acc_wt(&mut out, &dy, &w);
        assert_eq!(out.data, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn softmax_sums_to_one() {
        let mut xs = [1.0f64, 2.0, 3.0, 4.0];
        softmax_inplace(&mut xs);
        let s: f64 = xs.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(xs.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn gelu_grad_matches_finite_difference() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.3, 1.7, 4.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            let an = gelu_grad(x);
            assert!((fd - an).abs() < 1e-8, "x={x} fd={fd} an={an}");
        }
    }

    #[test]
    fn log_sum_exp_stable() {
        let xs = [1000.0f64, 1000.0];
        let v = log_sum_exp(&xs);
        assert!((v - (1000.0 + 2.0f64.ln())).abs() < 1e-9);
    }
}
