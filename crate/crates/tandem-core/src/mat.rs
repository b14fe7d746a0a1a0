//! Dense row-major matrix with the handful of kernels the model needs.
//!
//! All shapes at this scale are small enough that plain loops (arranged to be
//! cache-friendly and autovectorizable) are sufficient. Shape mismatches in
//! these kernels are programmer errors and panic; fallible shape validation
//! happens at the public operation boundaries.

use crate::real::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::ZERO; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "data length does not match shape");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
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
    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: T) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn fill(&mut self, v: T) {
        self.data.fill(v);
    }

    pub fn is_all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, rhs.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
                let b_row = rhs.row(k);
                for j in 0..rhs.cols {
                    out_row[j] += a * b_row[j];
                }
            }
        }
        out
    }

    /// `selfᵀ · rhs`, accumulated into `out`.
    pub fn matmul_at_acc(&self, rhs: &Mat<T>, out: &mut Mat<T>) {
        assert_eq!(self.rows, rhs.rows, "matmul_at shape mismatch");
        assert_eq!(out.shape(), (self.cols, rhs.cols), "matmul_at output shape");
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = rhs.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                let out_row = out.row_mut(i);
                for j in 0..b_row.len() {
                    out_row[j] += a * b_row[j];
                }
            }
        }
    }

    /// `self · rhsᵀ`
    pub fn matmul_bt(&self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, rhs.cols, "matmul_bt shape mismatch");
        let mut out = Mat::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for j in 0..rhs.rows {
                let b_row = rhs.row(j);
                let mut acc = T::ZERO;
                for k in 0..a_row.len() {
                    acc += a_row[k] * b_row[k];
                }
                out_row[j] = acc;
            }
        }
        out
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Mat<T>) {
        assert_eq!(self.shape(), other.shape(), "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    /// Elementwise `self += s * other`.
    pub fn add_scaled(&mut self, other: &Mat<T>, s: T) {
        assert_eq!(self.shape(), other.shape(), "add_scaled shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: T) {
        for a in self.data.iter_mut() {
            *a *= s;
        }
    }

    /// Copy of a contiguous band of rows `[start, start + count)`.
    pub fn rows_slice(&self, start: usize, count: usize) -> Mat<T> {
        assert!(start + count <= self.rows, "row slice out of range");
        let data = self.data[start * self.cols..(start + count) * self.cols].to_vec();
        Mat::from_vec(count, self.cols, data)
    }

    /// Copy of a contiguous band of columns `[start, start + width)`.
    pub fn col_band(&self, start: usize, width: usize) -> Mat<T> {
        assert!(start + width <= self.cols, "column band out of range");
        let mut out = Mat::zeros(self.rows, width);
        for i in 0..self.rows {
            let src = &self.row(i)[start..start + width];
            out.row_mut(i).copy_from_slice(src);
        }
        out
    }

    /// `self[:, start..start+src.cols] += src`
    pub fn add_col_band(&mut self, src: &Mat<T>, start: usize) {
        assert_eq!(self.rows, src.rows, "column band row mismatch");
        assert!(start + src.cols <= self.cols, "column band out of range");
        for i in 0..self.rows {
            let dst = &mut self.row_mut(i)[start..start + src.cols];
            for (d, &s) in dst.iter_mut().zip(src.row(i)) {
                *d += s;
            }
        }
    }

    /// Convert element type (used to move params between f32 and f64).
    pub fn cast<U: Real>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        let mut out = Mat::zeros(a.rows(), b.cols());
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

    #[test]
    fn matmul_matches_naive_triple_loop() {
        let a = Mat::from_fn(3, 4, |i, j| (i * 7 + j) as f64 * 0.3 - 1.0);
        let b = Mat::from_fn(4, 2, |i, j| (i + 2 * j) as f64 * 0.5);
        let got = a.matmul(&b);
        let want = naive_matmul(&a, &b);
        for (g, w) in got.as_slice().iter().zip(want.as_slice()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = Mat::from_fn(5, 3, |i, j| (i as f64 - j as f64) * 0.7);
        let b = Mat::from_fn(5, 4, |i, j| (i * j) as f64 * 0.1 + 0.2);
        let at = Mat::from_fn(3, 5, |i, j| a.get(j, i));
        let mut got = Mat::zeros(3, 4);
        a.matmul_at_acc(&b, &mut got);
        let want = at.matmul(&b);
        assert_eq!(got, want);

        let c = Mat::from_fn(6, 3, |i, j| (i + j) as f64);
        let ct = Mat::from_fn(3, 6, |i, j| c.get(j, i));
        assert_eq!(a.matmul_bt(&c), a.matmul(&ct));
    }

    #[test]
    fn rows_slice_copies_band() {
        let m = Mat::from_fn(4, 2, |i, j| (10 * i + j) as f32);
        let s = m.rows_slice(1, 2);
        assert_eq!(s.shape(), (2, 2));
        assert_eq!(s.row(0), &[10.0, 11.0]);
        assert_eq!(s.row(1), &[20.0, 21.0]);
    }
}
