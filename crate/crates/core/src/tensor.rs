//! Row-major dense matrices and the handful of GEMM shapes the transformer needs.
//!
//! Everything is `f64`. The model is small enough that double precision costs
//! little, and it keeps finite-difference gradient checks meaningful.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Mat {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "Mat::from_vec: length mismatch");
        Mat { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "Mat::from_rows: ragged rows");
            data.extend_from_slice(row);
        }
        Mat {
            rows: r,
            cols: c,
            data,
        }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// Adds `row` to every row.
    pub fn add_row_broadcast(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.cols);
        for chunk in self.data.chunks_exact_mut(self.cols) {
            for (a, b) in chunk.iter_mut().zip(row) {
                *a += b;
            }
        }
    }

    /// Column sums, accumulated into `out`.
    pub fn accumulate_col_sums(&self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.cols);
        for chunk in self.data.chunks_exact(self.cols) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Strided read-only view used to address per-sample, per-head blocks without copying.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Mat) -> Self {
        View {
            data: &m.data,
            offset: 0,
            rows: m.rows,
            cols: m.cols,
            rs: m.cols,
            cs: 1,
        }
    }

    /// Sub-block of `rows × cols` starting at (`r0`, `c0`).
    pub fn block(m: &'a Mat, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        debug_assert!(r0 + rows <= m.rows && c0 + cols <= m.cols);
        View {
            data: &m.data,
            offset: r0 * m.cols + c0,
            rows,
            cols,
            rs: m.cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        View {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn check_bounds(&self) {
        if self.rows == 0 || self.cols == 0 {
            return;
        }
        let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
        assert!(last < self.data.len(), "View out of bounds");
    }
}

/// Strided mutable destination.
pub(crate) struct ViewMut<'a> {
    pub data: &'a mut [f64],
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> ViewMut<'a> {
    pub fn of(m: &'a mut Mat) -> Self {
        let (rows, cols) = m.shape();
        ViewMut {
            data: &mut m.data,
            offset: 0,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn block(m: &'a mut Mat, r0: usize, c0: usize, rows: usize, cols: usize) -> Self {
        debug_assert!(r0 + rows <= m.rows && c0 + cols <= m.cols);
        let stride = m.cols;
        ViewMut {
            data: &mut m.data,
            offset: r0 * stride + c0,
            rows,
            cols,
            rs: stride,
            cs: 1,
        }
    }
}

/// `c = alpha * a · b + beta * c`.
pub(crate) fn gemm(alpha: f64, a: View<'_>, b: View<'_>, beta: f64, c: ViewMut<'_>) {
    assert_eq!(a.cols, b.rows, "gemm: inner dimension mismatch");
    assert_eq!(a.rows, c.rows, "gemm: output rows mismatch");
    assert_eq!(b.cols, c.cols, "gemm: output cols mismatch");
    a.check_bounds();
    b.check_bounds();
    if c.rows > 0 && c.cols > 0 {
        let last = c.offset + (c.rows - 1) * c.rs + (c.cols - 1) * c.cs;
        assert!(last < c.data.len(), "gemm: output view out of bounds");
    }
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: every view's extent was bounds-checked above, and `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::dgemm(
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

/// `a · b`
pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(1.0, View::of(a), View::of(b), 0.0, ViewMut::of(&mut out));
    out
}

/// `aᵀ · b`
pub fn matmul_tn(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.cols, b.cols);
    gemm(1.0, View::of(a).t(), View::of(b), 0.0, ViewMut::of(&mut out));
    out
}

/// `a · bᵀ`
pub fn matmul_nt(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.rows);
    gemm(1.0, View::of(a), View::of(b).t(), 0.0, ViewMut::of(&mut out));
    out
}

/// `acc += aᵀ · b`, the weight-gradient shape.
pub fn accumulate_tn(acc: &mut Mat, a: &Mat, b: &Mat) {
    gemm(1.0, View::of(a).t(), View::of(b), 1.0, ViewMut::of(acc));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &Mat, b: &Mat) -> Mat {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        out
    }

    fn transpose(m: &Mat) -> Mat {
        let mut out = Mat::zeros(m.cols(), m.rows());
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                out.set(j, i, m.get(i, j));
            }
        }
        out
    }

    fn sample(rows: usize, cols: usize, seed: f64) -> Mat {
        let data = (0..rows * cols)
            .map(|i| ((i as f64 + seed) * 0.731).sin())
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn gemm_variants_match_naive_product() {
        let a = sample(5, 3, 0.0);
        let b = sample(3, 4, 1.0);
        let expect = naive(&a, &b);
        let close = |x: &Mat, y: &Mat| {
            x.as_slice()
                .iter()
                .zip(y.as_slice())
                .all(|(p, q)| (p - q).abs() < 1e-12)
        };
        assert!(close(&matmul(&a, &b), &expect));
        assert!(close(&matmul_tn(&transpose(&a), &b), &expect));
        assert!(close(&matmul_nt(&a, &transpose(&b)), &expect));
        let mut acc = Mat::filled(5, 4, 1.0);
        accumulate_tn(&mut acc, &transpose(&a), &b);
        let mut shifted = expect.clone();
        shifted.as_mut_slice().iter_mut().for_each(|v| *v += 1.0);
        assert!(close(&acc, &shifted));
    }

    #[test]
    fn block_views_address_submatrices() {
        let a = sample(4, 6, 2.0);
        let b = sample(3, 2, 3.0);
        // columns 3..6 of rows 1..3
        let mut out = Mat::zeros(2, 2);
        gemm(
            1.0,
            View::block(&a, 1, 3, 2, 3),
            View::of(&b),
            0.0,
            ViewMut::of(&mut out),
        );
        let sub = Mat::from_rows(&[a.row(1)[3..6].to_vec(), a.row(2)[3..6].to_vec()]);
        let expect = naive(&sub, &b);
        for (p, q) in out.as_slice().iter().zip(expect.as_slice()) {
            assert!((p - q).abs() < 1e-12);
        }
    }
}
