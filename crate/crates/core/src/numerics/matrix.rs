use std::ops::{Index, IndexMut};

use super::Precision;
use crate::error::{GkaError, Result};

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = s;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(GkaError::shape(
                "Matrix::from_vec",
                format!("{} elements", rows * cols),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    /// `u vᵀ`
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        Matrix::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    /// `⟨A, B⟩_F = tr(AᵀB)`
    pub fn frobenius_dot(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        dot(&self.data, &other.data)
    }

    pub fn scale(&mut self, s: f64) {
        for x in &mut self.data {
            *x *= s;
        }
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(s);
        m
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, s: f64, other: &Matrix) {
        assert_eq!(self.shape(), other.shape());
        axpy(s, &other.data, &mut self.data);
    }

    /// `self += s * u vᵀ`
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, ui) in u.iter().enumerate() {
            let c = s * ui;
            if c == 0.0 {
                continue;
            }
            for (x, vj) in self.row_mut(i).iter_mut().zip(v) {
                *x += c * vj;
            }
        }
    }

    pub fn add_diagonal(&mut self, s: f64) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] += s;
        }
    }

    /// `out = self · x` at full precision without allocation.
    pub fn matvec_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (o, row) in out.iter_mut().zip(self.data.chunks_exact(self.cols.max(1))) {
            *o = dot(row, x);
        }
    }

    /// `out = selfᵀ · x` at full precision.
    pub fn matvec_transpose_into(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, xi) in x.iter().enumerate() {
            if *xi != 0.0 {
                axpy(*xi, self.row(i), out);
            }
        }
    }

    /// Matrix-vector product honouring the precision contract of [`matmul`].
    pub fn matvec(&self, x: &[f64], precision: Precision) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(GkaError::shape("matvec", self.cols, x.len()));
        }
        let mut out = vec![0.0; self.rows];
        if precision.is_full() {
            self.matvec_into(x, &mut out);
        } else {
            for (i, o) in out.iter_mut().enumerate() {
                *o = precision.dot(self.row(i), x);
            }
        }
        Ok(out)
    }

    /// Quadratic form `xᵀ self y`.
    pub fn bilinear(&self, x: &[f64], y: &[f64]) -> f64 {
        x.iter()
            .enumerate()
            .map(|(i, xi)| xi * dot(self.row(i), y))
            .sum()
    }

    pub fn round(&mut self, precision: Precision) {
        precision.round_slice(&mut self.data);
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Matrix product. In reduced modes the inputs are rounded, accumulation runs
/// in 32-bit and the result is rounded once at the end.
pub fn matmul(a: &Matrix, b: &Matrix, precision: Precision) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(GkaError::shape(
            "matmul",
            format!("inner dimension {}", a.cols),
            format!("{}", b.rows),
        ));
    }
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(n, m);
    if precision.is_full() {
        for i in 0..n {
            let orow = &mut out.data[i * m..(i + 1) * m];
            for p in 0..k {
                let aip = a.data[i * k + p];
                if aip != 0.0 {
                    axpy(aip, &b.data[p * m..(p + 1) * m], orow);
                }
            }
        }
    } else {
        let ar: Vec<f32> = a.data.iter().map(|x| precision.round(*x) as f32).collect();
        let br: Vec<f32> = b.data.iter().map(|x| precision.round(*x) as f32).collect();
        let mut acc = vec![0.0f32; m];
        for i in 0..n {
            acc.iter_mut().for_each(|x| *x = 0.0);
            for p in 0..k {
                let aip = ar[i * k + p];
                for (o, bj) in acc.iter_mut().zip(&br[p * m..(p + 1) * m]) {
                    *o += aip * bj;
                }
            }
            for (o, x) in out.data[i * m..(i + 1) * m].iter_mut().zip(&acc) {
                *o = precision.round(*x as f64);
            }
        }
    }
    Ok(out)
}

/// `AᵀA`
pub fn gram(a: &Matrix, precision: Precision) -> Matrix {
    matmul(&a.transpose(), a, precision).expect("transpose shapes always agree")
}

/// Square root of the sum of squared entries.
pub fn frobenius_norm(a: &Matrix) -> f64 {
    a.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Inner product with four interleaved partial sums, so short products are
/// not bound by the latency of a single accumulator.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ar.iter().zip(br) {
        s += x * y;
    }
    s
}

/// `y += a x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `‖a − b‖₂ / ‖b‖₂`, falling back to the absolute difference when `b = 0`.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let denom = norm2(b);
    if denom == 0.0 {
        diff
    } else {
        diff / denom
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn triple_loop(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for p in 0..a.cols() {
                    s += a[(i, p)] * b[(p, j)];
                }
                c[(i, j)] = s;
            }
        }
        c
    }

    #[test]
    fn identity_times_b_is_b() {
        let mut rng = SeededRng::new(1);
        let b = rng.normal_matrix(3, 5);
        let c = matmul(&Matrix::identity(3), &b, Precision::Full).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn times_zero_is_zero() {
        let mut rng = SeededRng::new(2);
        let a = rng.normal_matrix(4, 4);
        let c = matmul(&a, &Matrix::zeros(4, 2), Precision::Full).unwrap();
        assert_eq!(c, Matrix::zeros(4, 2));
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let mut rng = SeededRng::new(3);
        for n in [4, 16] {
            let a = rng.normal_matrix(n, n);
            let b = rng.normal_matrix(n, n);
            let c = matmul(&a, &b, Precision::Full).unwrap();
            let o = triple_loop(&a, &b);
            let scale = o.as_slice().iter().fold(0.0f64, |m, x| m.max(x.abs()));
            assert!(c.max_abs_diff(&o) <= 1e-12 * scale.max(1.0));
        }
        let a = rng.normal_matrix(16, 16);
        let g = gram(&a, Precision::Full);
        let o = triple_loop(&a.transpose(), &a);
        assert!(g.max_abs_diff(&o) <= 1e-12 * o.frobenius_norm());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3), Precision::Full).unwrap_err();
        assert!(matches!(err, GkaError::ShapeMismatch { .. }));
        assert!(Matrix::from_vec(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::identity(3).matvec(&[1.0, 2.0], Precision::Full).is_err());
    }

    #[test]
    fn bf16_matmul_rounds_result() {
        let mut rng = SeededRng::new(4);
        let a = rng.normal_matrix(6, 6);
        let b = rng.normal_matrix(6, 6);
        let c = matmul(&a, &b, Precision::Bf16).unwrap();
        for x in c.as_slice() {
            assert_eq!(Precision::Bf16.round(*x), *x);
        }
        let exact = matmul(&a, &b, Precision::Full).unwrap();
        assert!(c.max_abs_diff(&exact) < 0.1 * exact.frobenius_norm());
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_norm(&Matrix::identity(9)), 3.0);
        assert_eq!(frobenius_norm(&Matrix::zeros(3, 4)), 0.0);
        let m = Matrix::from_vec(2, 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        assert_eq!(frobenius_norm(&m), 5.0);
    }

    #[test]
    fn frobenius_squared_is_trace_of_gram() {
        let mut rng = SeededRng::new(5);
        for _ in 0..20 {
            let a = rng.normal_matrix(7, 5);
            let n2 = frobenius_norm(&a).powi(2);
            let tr = gram(&a, Precision::Full).trace();
            assert!((n2 - tr).abs() <= 1e-12 * tr);
        }
    }
}
