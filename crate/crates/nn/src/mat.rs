//! Dense row-major matrices and the GEMM entry point.

use crate::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct Mat<S> {
    rows: usize,
    cols: usize,
    data: Vec<S>,
}

impl<S: Real> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![S::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<S>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Stacks equally wide rows.
    pub fn from_rows(cols: usize, rows: &[&[S]]) -> Self {
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols);
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<S> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[S] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [S] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
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

    pub fn push_row(&mut self, row: &[S]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
        self.rows += 1;
    }

    pub fn append_rows(&mut self, other: &Mat<S>) {
        assert_eq!(other.cols, self.cols);
        self.data.extend_from_slice(&other.data);
        self.rows += other.rows;
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Mat<S> {
        Mat::from_vec(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }

    pub fn select_rows(&self, idx: &[usize]) -> Mat<S> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat::from_vec(idx.len(), self.cols, data)
    }

    /// `self[idx[i]] += src[i]` for every row of `src`.
    pub fn scatter_add_rows(&mut self, idx: &[usize], src: &Mat<S>) {
        assert_eq!(idx.len(), src.rows);
        for (i, &r) in idx.iter().enumerate() {
            let dst = self.row_mut(r);
            for (d, s) in dst.iter_mut().zip(src.row(i)) {
                *d += *s;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Mat<S>) {
        assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn add(&self, other: &Mat<S>) -> Mat<S> {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn scale(&mut self, s: S) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn sum_sq(&self) -> S {
        self.data.iter().map(|x| *x * *x).sum()
    }

    pub fn frobenius(&self) -> S {
        self.sum_sq().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Mat<S>) -> S {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(S::zero(), S::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn matmul(&self, other: &Mat<S>) -> Mat<S> {
        let mut out = Mat::zeros(self.rows, other.cols);
        gemm(S::one(), self, false, other, false, S::zero(), &mut out);
        out
    }

    pub fn transpose(&self) -> Mat<S> {
        Mat::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn cast<T: Real>(&self) -> Mat<T> {
        Mat::from_vec(
            self.rows,
            self.cols,
            self.data.iter().map(|x| T::of(x.as_f64())).collect(),
        )
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, where `op` optionally transposes.
pub fn gemm<S: Real>(alpha: S, a: &Mat<S>, ta: bool, b: &Mat<S>, tb: bool, beta: S, c: &mut Mat<S>) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, kb, "gemm inner dimension mismatch");
    assert_eq!((m, n), c.shape(), "gemm output shape mismatch");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == S::zero() {
            c.fill(S::zero());
        } else {
            c.scale(beta);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    // SAFETY: shapes were checked above and all three buffers are dense row-major.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
}

pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    let mut acc = S::zero();
    for (x, y) in a.iter().zip(b) {
        acc += *x * *y;
    }
    acc
}

pub fn axpy<S: Real>(alpha: S, x: &[S], y: &mut [S]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * *xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree_with_naive() {
        let a = Mat::<f64>::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.5 - 2.0);
        let b = Mat::<f64>::from_fn(4, 2, |r, c| (r as f64 - c as f64) * 0.25);
        let naive = Mat::from_fn(3, 2, |i, j| (0..4).map(|k| a.get(i, k) * b.get(k, j)).sum());
        assert!(a.matmul(&b).max_abs_diff(&naive) < 1e-12);

        let at = a.transpose();
        let bt = b.transpose();
        let mut out = Mat::zeros(3, 2);
        gemm(1.0, &at, true, &bt, true, 0.0, &mut out);
        assert!(out.max_abs_diff(&naive) < 1e-12);
    }

    #[test]
    fn single_row_product_matches_batched_row_bitwise() {
        let a = Mat::<f32>::from_fn(37, 64, |r, c| ((r * 31 + c * 7) % 13) as f32 * 0.173 - 1.1);
        let w = Mat::<f32>::from_fn(64, 48, |r, c| ((r * 5 + c * 11) % 17) as f32 * 0.061 - 0.5);
        let full = a.matmul(&w);
        for r in [0, 5, 36] {
            let one = a.slice_rows(r, r + 1).matmul(&w);
            assert_eq!(one.row(0), full.row(r));
        }
    }

    #[test]
    fn empty_inner_dimension_zeroes_output() {
        let a = Mat::<f32>::zeros(2, 0);
        let b = Mat::<f32>::zeros(0, 3);
        let mut c = Mat::from_vec(2, 3, vec![1.0; 6]);
        gemm(1.0, &a, false, &b, false, 0.0, &mut c);
        assert!(c.data().iter().all(|&x| x == 0.0));
    }
}
