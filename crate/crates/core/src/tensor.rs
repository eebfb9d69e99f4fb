//! Dense f64 matrices and the handful of kernels the model needs.
//!
//! Row-major storage. Weights follow the (out, in) convention, so a linear
//! layer is `linear(x, w) = x w^T` with contiguous dot products on both
//! sides, which the compiler vectorizes well enough for desk-scale models.

use alloc::vec;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            debug_assert_eq!(row.len(), c);
            data.extend_from_slice(row);
        }
        Mat {
            rows: r,
            cols: c,
            data,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&mut self, a: f64) {
        self.data.iter_mut().for_each(|x| *x *= a);
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (x, y) in self.data.iter_mut().zip(&other.data) {
            *x += *y;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|x| x * x).sum())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// y += alpha * x
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for i in 0..x.len() {
        y[i] += alpha * x[i];
    }
}

/// x (m×k) · w^T for w (n×k): the forward pass of a linear layer.
pub fn linear(x: &Mat, w: &Mat) -> Mat {
    debug_assert_eq!(x.cols, w.cols);
    let mut out = Mat::zeros(x.rows, w.rows);
    for r in 0..x.rows {
        let xr = x.row(r);
        let or = out.row_mut(r);
        for (o, wo) in or.iter_mut().zip(0..w.rows) {
            *o = dot(xr, w.row(wo));
        }
    }
    out
}

/// a (m×k) · b (k×n).
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    debug_assert_eq!(a.cols, b.rows);
    let mut out = Mat::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let ar = a.row(i);
        // ikj order: the inner update runs over contiguous rows of b and out.
        for (k, &aik) in ar.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let br = b.row(k);
            let or = out.row_mut(i);
            axpy(aik, br, or);
        }
    }
    out
}

/// dw += dy^T (m×n)·x (m×k) accumulated into dw (n×k): weight gradient of a
/// linear layer whose forward was `linear(x, w)`.
pub fn accum_grad_w(dy: &Mat, x: &Mat, dw: &mut Mat) {
    debug_assert_eq!(dy.rows, x.rows);
    debug_assert_eq!(dw.rows, dy.cols);
    debug_assert_eq!(dw.cols, x.cols);
    for s in 0..dy.rows {
        let dyr = dy.row(s);
        let xr = x.row(s);
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(g, xr, dw.row_mut(o));
        }
    }
}

/// dx = dy (m×n) · w (n×k): input gradient of a linear layer.
pub fn grad_x(dy: &Mat, w: &Mat) -> Mat {
    matmul(dy, w)
}

/// Numerically stable softmax over a slice, in place.
pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = libm::exp(*x - max);
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_hand_computation() {
        // x = [[1,2],[3,4]], w = [[5,6],[7,8],[9,10]] (3 outputs, 2 inputs)
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let w = Mat::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0], vec![9.0, 10.0]]);
        let y = linear(&x, &w);
        assert_eq!(y.row(0), &[17.0, 23.0, 29.0]);
        assert_eq!(y.row(1), &[39.0, 53.0, 67.0]);
    }

    #[test]
    fn matmul_matches_linear_with_transpose() {
        let a = Mat::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.0, 3.0, 1.0]]);
        let b = Mat::from_rows(&[vec![2.0, 1.0], vec![-1.0, 4.0], vec![0.5, 0.0]]);
        let c = matmul(&a, &b);
        let bt = Mat::from_fn(b.cols, b.rows, |r, c2| b.get(c2, r));
        let c2 = linear(&a, &bt);
        assert_eq!(c, c2);
    }

    #[test]
    fn grad_kernels_are_transposes_of_forward() {
        let x = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let w = Mat::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.0], vec![1.0, 1.0]]);
        let dy = Mat::from_rows(&[vec![1.0, 0.0, 2.0], vec![0.0, 1.0, -1.0]]);
        // dL/dw[o][i] = sum_s dy[s][o] * x[s][i]
        let mut dw = Mat::zeros(3, 2);
        accum_grad_w(&dy, &x, &mut dw);
        assert_eq!(dw.row(0), &[1.0, 2.0]);
        assert_eq!(dw.row(1), &[3.0, 4.0]);
        assert_eq!(dw.row(2), &[-1.0, 0.0]);
        // dL/dx = dy · w
        let dx = grad_x(&dy, &w);
        assert_eq!(dx.row(0), &[2.5, 1.0]);
        assert_eq!(dx.row(1), &[1.0, -1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut v = vec![1.0, 2.0, 3.0, -1.0];
        softmax_in_place(&mut v);
        let s: f64 = v.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(v.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let mut v = vec![2.0, 2.0];
        softmax_in_place(&mut v);
        assert!((v[0] - 0.5).abs() < 1e-15);
        assert!((v[1] - 0.5).abs() < 1e-15);
    }
}
