//! Minimal dense linear algebra for the simulator.
//!
//! Everything is `f64`, row-major, with a fixed left-to-right summation
//! order and no blocking or parallel reduction inside a product. That
//! makes every trajectory bit-reproducible, which the engine-equivalence
//! tests rely on.

use serde::{Deserialize, Serialize};

/// Dense vector of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "vector must be non-empty");
        Self { data }
    }

    pub fn zeros(len: usize) -> Self {
        Self::new(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "hadamard: length mismatch");
        Vector::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a * b)
                .collect(),
        )
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &Vector, scale: f64) -> Vector {
        assert_eq!(self.len(), other.len(), "add_scaled: length mismatch");
        Vector::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + scale * b)
                .collect(),
        )
    }

    /// `|self| ⊙ other`, elementwise.
    pub fn abs_mul(&self, other: &Vector) -> Vector {
        assert_eq!(self.len(), other.len(), "abs_mul: length mismatch");
        Vector::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a.abs() * b)
                .collect(),
        )
    }

    /// Max-magnitude entry.
    pub fn inf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Euclidean norm, summed left to right.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry (first on ties).
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert!(rows > 0 && cols > 0, "matrix must be non-empty");
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Self { data, rows, cols }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `W x`: result_i = Σ_j W_ij x_j, j summed left to right.
    pub fn matvec(&self, x: &Vector) -> Vector {
        assert_eq!(
            self.cols,
            x.len(),
            "matvec: {}x{} matrix with vector of length {}",
            self.rows,
            self.cols,
            x.len()
        );
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            let mut acc = 0.0;
            for (w, xv) in row.iter().zip(x.as_slice()) {
                acc += w * xv;
            }
            out[i] = acc;
        }
        Vector::new(out)
    }

    /// `d W` (row vector times matrix): result_j = Σ_i d_i W_ij, i summed
    /// left to right.
    pub fn vecmat(&self, d: &Vector) -> Vector {
        assert_eq!(
            self.rows,
            d.len(),
            "vecmat: vector of length {} with {}x{} matrix",
            d.len(),
            self.rows,
            self.cols
        );
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            let di = d[i];
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += di * w;
            }
        }
        Vector::new(out)
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a * b)
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, other: &Matrix, scale: f64) -> Matrix {
        self.zip_with(other, |a, b| a + scale * b)
    }

    /// `|self| ⊙ other`, elementwise.
    pub fn abs_mul(&self, other: &Matrix) -> Matrix {
        self.zip_with(other, |a, b| a.abs() * b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(
            (self.rows, self.cols),
            (other.rows, other.cols),
            "elementwise op: shape mismatch"
        );
        Matrix::new(
            self.rows,
            self.cols,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        )
    }

    /// Max-magnitude entry.
    pub fn inf_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Frobenius norm, summed left to right in row-major order.
    pub fn fro_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Exact bitwise equality, distinguishing NaN payloads and signed zeros.
    pub fn bits_eq(&self, other: &Matrix) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Outer product `d ⊗ x`: result_ij = d_i x_j.
pub fn outer(d: &Vector, x: &Vector) -> Matrix {
    let mut data = Vec::with_capacity(d.len() * x.len());
    for i in 0..d.len() {
        let di = d[i];
        for j in 0..x.len() {
            data.push(di * x[j]);
        }
    }
    Matrix::new(d.len(), x.len(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matvec_identity_and_zero() {
        let w = Matrix::identity(2);
        let x = Vector::new(vec![3.0, 4.0]);
        assert_eq!(w.matvec(&x).as_slice(), &[3.0, 4.0]);

        let z = Matrix::zeros(3, 2);
        assert_eq!(z.matvec(&x).as_slice(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn matvec_scalar_row() {
        let w = Matrix::from_rows(&[&[1.0, 1.0]]);
        let x = Vector::new(vec![0.6, 0.8]);
        let y = w.matvec(&x);
        assert!((y[0] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn vecmat_cases() {
        let w = Matrix::from_rows(&[&[2.0, 3.0], &[4.0, 5.0]]);
        assert_eq!(w.vecmat(&Vector::new(vec![1.0, 0.0])).as_slice(), &[2.0, 3.0]);

        let w1 = Matrix::from_rows(&[&[2.0, 3.0]]);
        assert_eq!(w1.vecmat(&Vector::new(vec![1.0])).as_slice(), &[2.0, 3.0]);

        let w2 = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(w2.vecmat(&Vector::new(vec![1.0, 1.0])).as_slice(), &[4.0, 6.0]);
    }

    #[test]
    fn outer_cases() {
        let m = outer(&Vector::new(vec![1.0, 0.0]), &Vector::new(vec![0.0, 1.0]));
        assert_eq!(m.as_slice(), &[0.0, 1.0, 0.0, 0.0]);

        let s = outer(&Vector::new(vec![2.0]), &Vector::new(vec![3.0]));
        assert_eq!(s.as_slice(), &[6.0]);

        let r = outer(
            &Vector::new(vec![1.0, -1.0]),
            &Vector::new(vec![0.5, 0.5]),
        );
        assert_eq!(r.as_slice(), &[0.5, 0.5, -0.5, -0.5]);
    }

    #[test]
    fn ewise_cases() {
        let a = Vector::new(vec![1.0, -2.0]);
        let b = Vector::new(vec![3.0, 4.0]);
        assert_eq!(a.hadamard(&b).as_slice(), &[3.0, -8.0]);

        let c = Vector::new(vec![-2.0]);
        let d = Vector::new(vec![0.5]);
        assert_eq!(c.abs_mul(&d).as_slice(), &[1.0]);

        let m = Matrix::from_rows(&[&[1.0, 2.0]]);
        let n = Matrix::from_rows(&[&[5.0, -5.0]]);
        assert_eq!(m.add_scaled(&n, 0.0).as_slice(), m.as_slice());
    }

    #[test]
    fn norm_cases() {
        let m = Matrix::from_rows(&[&[3.0, -4.0]]);
        assert_eq!(m.inf_norm(), 4.0);
        assert_eq!(m.fro_norm(), 5.0);

        let z = Matrix::zeros(2, 3);
        assert_eq!(z.inf_norm(), 0.0);
        assert_eq!(z.fro_norm(), 0.0);

        let i = Matrix::identity(2);
        assert_eq!(i.inf_norm(), 1.0);
        assert!((i.fro_norm() - 2.0_f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn determinism_bit_identical() {
        let w = Matrix::from_rows(&[&[0.1, 0.2, 0.3], &[0.4, 0.5, 0.6]]);
        let x = Vector::new(vec![0.7, 0.8, 0.9]);
        let y1 = w.matvec(&x);
        let y2 = w.matvec(&x);
        assert!(y1
            .iter()
            .zip(y2.iter())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    fn small_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-10.0..10.0f64, len)
    }

    proptest! {
        // ‖d ⊗ x‖_F = ‖d‖·‖x‖ (rank-1 identity).
        #[test]
        fn outer_fro_is_norm_product(d in small_vec(5), x in small_vec(7)) {
            let dv = Vector::new(d);
            let xv = Vector::new(x);
            let lhs = outer(&dv, &xv).fro_norm();
            let rhs = dv.l2_norm() * xv.l2_norm();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
        }

        // (d ⊗ x) y = d (xᵀy).
        #[test]
        fn outer_matvec_collapses(d in small_vec(4), x in small_vec(6), y in small_vec(6)) {
            let dv = Vector::new(d);
            let xv = Vector::new(x);
            let yv = Vector::new(y);
            let lhs = outer(&dv, &xv).matvec(&yv);
            let s = xv.dot(&yv);
            for i in 0..dv.len() {
                let rhs = dv[i] * s;
                prop_assert!((lhs[i] - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
            }
        }
    }
}
