//! Dense row-major matrices of `f64`.
//!
//! Everything the policy computes is a rank-2 array: row vectors are `1 x d`,
//! column vectors `n x 1`, scalars `1 x 1`. Keeping a single concrete rank
//! avoids broadcasting rules that nothing here needs.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Array {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Array {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Array { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Array { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Array { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Shape(format!("empty shape {rows}x{cols}")));
        }
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} array",
                data.len()
            )));
        }
        Ok(Array { rows, cols, data })
    }

    /// Row vector `1 x d`.
    pub fn row_vec(data: Vec<f64>) -> Result<Self> {
        let cols = data.len();
        Array::from_vec(1, cols, data)
    }

    /// Column vector `n x 1`.
    pub fn col_vec(data: Vec<f64>) -> Result<Self> {
        let rows = data.len();
        Array::from_vec(rows, 1, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn same_shape(&self, other: &Array) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single value of a `1 x 1` array.
    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Shape(format!(
                "expected scalar, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Array) -> Result<f64> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "cannot compare {}x{} with {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn add_assign(&mut self, other: &Array) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "cannot add {}x{} into {}x{}",
                other.rows, other.cols, self.rows, self.cols
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale_assign(&mut self, c: f64) {
        for v in &mut self.data {
            *v *= c;
        }
    }
}

/// Dot product with four independent accumulators so the loop vectorizes.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let ra = ca.remainder();
    let rb = cb.remainder();
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// `out += c * x`, elementwise.
pub fn axpy(c: f64, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += c * v;
    }
}

/// `a @ b` for row-major operands.
pub fn matmul(a: &Array, b: &Array) -> Result<Array> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} @ {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Array::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (k, &av) in arow.iter().enumerate() {
            axpy(av, b.row(k), orow);
        }
    }
    Ok(out)
}

/// `a^T @ b`, accumulated along contiguous rows of both operands.
pub fn matmul_tn(a: &Array, b: &Array) -> Result<Array> {
    if a.rows != b.rows {
        return Err(Error::Shape(format!(
            "matmul_tn ({}x{})^T @ {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Array::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let arow = a.row(k);
        let brow = b.row(k);
        for (i, &av) in arow.iter().enumerate() {
            axpy(av, brow, out.row_mut(i));
        }
    }
    Ok(out)
}

/// `a @ b^T`; both operands are traversed along contiguous rows.
pub fn matmul_nt(a: &Array, b: &Array) -> Result<Array> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "matmul_nt {}x{} @ ({}x{})^T",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Array::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            *o = dot(arow, b.row(j));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_lengths() {
        assert!(Array::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Array::from_vec(0, 2, vec![]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let x = Array::from_vec(2, 2, vec![3.0, -1.0, 2.0, 5.0]).unwrap();
        let id = Array::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(matmul(&x, &id).unwrap(), x);
        assert_eq!(matmul(&id, &x).unwrap(), x);
    }

    #[test]
    fn matmul_small_case() {
        let a = Array::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Array::from_vec(2, 1, vec![1.0, 1.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_nt_matches_matmul() {
        let a = Array::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.5 - 2.0).collect()).unwrap();
        let b = Array::from_vec(2, 4, (0..8).map(|v| (v as f64).sin()).collect()).unwrap();
        // Transpose b by hand and compare.
        let mut bt = Array::zeros(4, 2);
        for r in 0..2 {
            for c in 0..4 {
                bt.set(c, r, b.get(r, c));
            }
        }
        let want = matmul(&a, &bt).unwrap();
        let got = matmul_nt(&a, &b).unwrap();
        assert!(want.max_abs_diff(&got).unwrap() < 1e-15);
    }

    #[test]
    fn matmul_tn_matches_matmul() {
        let a = Array::from_vec(3, 2, (0..6).map(|v| (v as f64).cos()).collect()).unwrap();
        let b = Array::from_vec(3, 4, (0..12).map(|v| v as f64 * 0.25 - 1.0).collect()).unwrap();
        let mut at = Array::zeros(2, 3);
        for r in 0..3 {
            for c in 0..2 {
                at.set(c, r, a.get(r, c));
            }
        }
        let want = matmul(&at, &b).unwrap();
        let got = matmul_tn(&a, &b).unwrap();
        assert!(want.max_abs_diff(&got).unwrap() < 1e-15);
    }

    #[test]
    fn matmul_rejects_mismatched_inner_dims() {
        let a = Array::zeros(2, 3);
        let b = Array::zeros(2, 2);
        assert!(matches!(matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..7).map(|v| v as f64).collect();
        let b = vec![2.0; 7];
        assert_eq!(dot(&a, &b), 42.0);
    }
}
