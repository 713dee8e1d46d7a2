//! Dense row-major matrices with the handful of kernels the model needs.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    /// Builds a matrix from row-major data. Panics when the length does not match.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
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

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.data.iter_mut().for_each(|v| *v = T::zero());
    }

    /// `out += x · self` for a row vector `x` of length `rows`.
    pub fn vec_mul_acc(&self, x: &[T], out: &mut [T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (i, &xi) in x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let row = self.row(i);
            for (o, &w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    /// `x · self` for a row vector `x`.
    pub fn vec_mul(&self, x: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        self.vec_mul_acc(x, &mut out);
        out
    }

    /// `out += g · selfᵀ` for a row vector `g` of length `cols`.
    pub fn vec_mul_t_acc(&self, g: &[T], out: &mut [T]) {
        debug_assert_eq!(g.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (i, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(i), g);
        }
    }

    /// `self += x ⊗ g` (outer product of a column `x` and a row `g`).
    pub fn outer_acc(&mut self, x: &[T], g: &[T]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(g.len(), self.cols);
        for (i, &xi) in x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let row = self.row_mut(i);
            for (w, &gj) in row.iter_mut().zip(g) {
                *w += xi * gj;
            }
        }
    }

    pub fn add_assign(&mut self, other: &Matrix<T>) {
        assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Numerically stable softmax of a logit row.
pub fn softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: T = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// `log_softmax` of a logit row.
pub fn log_softmax<T: Scalar>(z: &[T]) -> Vec<T> {
    let max = z.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = z.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    z.iter().map(|&v| v - lse).collect()
}

/// Indices of the `k` largest entries, descending, ties broken by lower index.
pub fn top_k_indices<T: Scalar>(values: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vec_mul_matches_manual() {
        let w = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(w.vec_mul(&[1.0, -1.0]), vec![-3.0, -3.0, -3.0]);
        let mut out = vec![0.0; 2];
        w.vec_mul_t_acc(&[1.0, 0.0, 1.0], &mut out);
        assert_eq!(out, vec![4.0, 10.0]);
    }

    #[test]
    fn softmax_normalizes_and_log_softmax_agrees() {
        let z = [1.0f64, -2.0, 0.5, 30.0];
        let p = softmax(&z);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let lp = log_softmax(&z);
        for (a, b) in p.iter().zip(&lp) {
            assert!((a.ln() - b).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k_indices(&[0.2, 0.5, 0.5, 0.1], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.3, 0.3, 0.3], 2), vec![0, 1]);
    }
}
