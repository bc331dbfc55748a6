use super::{dot, norm2, Matrix, SeededRng};
use crate::error::{GkaError, Result};

/// Lower-triangular Cholesky factor `H = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Matrix,
}

impl Cholesky {
    /// Factor a symmetric positive definite matrix. No pivoting; a nonpositive
    /// pivot is reported as [`GkaError::NotPositiveDefinite`].
    pub fn factor(h: &Matrix) -> Result<Self> {
        if !h.is_square() {
            return Err(GkaError::shape("cholesky", "square matrix", format!("{:?}", h.shape())));
        }
        let n = h.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut d = h[(j, j)] - dot(&l.row(j)[..j], &l.row(j)[..j]);
            if !(d > 0.0) || !d.is_finite() {
                return Err(GkaError::NotPositiveDefinite { pivot: j, value: d });
            }
            d = d.sqrt();
            l[(j, j)] = d;
            for i in j + 1..n {
                let s = h[(i, j)] - dot(&l.row(i)[..j], &l.row(j)[..j]);
                l[(i, j)] = s / d;
            }
        }
        Ok(Cholesky { lower: l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn solve(&self, q: &[f64]) -> Result<Vec<f64>> {
        let n = self.lower.rows();
        if q.len() != n {
            return Err(GkaError::shape("cholesky solve", n, q.len()));
        }
        let l = &self.lower;
        let mut y = vec![0.0; n];
        for i in 0..n {
            y[i] = (q[i] - dot(&l.row(i)[..i], &y[..i])) / l[(i, i)];
        }
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[(k, i)] * x[k];
            }
            x[i] = s / l[(i, i)];
        }
        Ok(x)
    }
}

/// Solve `H x = q` for symmetric positive definite `H` by Cholesky factorization.
pub fn solve_exact(h: &Matrix, q: &[f64]) -> Result<Vec<f64>> {
    Cholesky::factor(h)?.solve(q)
}

/// Haar-ish random orthogonal matrix via modified Gram-Schmidt on a Gaussian matrix.
pub fn random_orthogonal(n: usize, rng: &mut SeededRng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v = rng.normal_vec(n);
        for c in &cols {
            let p = dot(&v, c);
            for (vi, ci) in v.iter_mut().zip(c) {
                *vi -= p * ci;
            }
        }
        let nv = norm2(&v);
        if nv > 1e-8 {
            v.iter_mut().for_each(|x| *x /= nv);
            cols.push(v);
        }
    }
    Matrix::from_fn(n, n, |i, j| cols[j][i])
}

/// `Q diag(eigs) Qᵀ` for a random orthogonal `Q`.
pub fn spd_with_spectrum(eigs: &[f64], rng: &mut SeededRng) -> Matrix {
    let n = eigs.len();
    let q = random_orthogonal(n, rng);
    let mut h = Matrix::zeros(n, n);
    for (k, e) in eigs.iter().enumerate() {
        let col: Vec<f64> = (0..n).map(|i| q[(i, k)]).collect();
        h.add_outer(*e, &col, &col);
    }
    // exact symmetry
    for i in 0..n {
        for j in 0..i {
            let s = 0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = s;
            h[(j, i)] = s;
        }
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{matmul, relative_error, Precision};

    #[test]
    fn diagonal_examples() {
        let h = Matrix::scaled_identity(2, 2.0);
        let x = solve_exact(&h, &[2.0, 4.0]).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 2.0).abs() < 1e-15);
        let lambda = 1.0;
        let mut h = Matrix::identity(3);
        h.add_diagonal(lambda);
        let q0 = [0.5, -2.0, 3.0];
        let x = solve_exact(&h, &q0).unwrap();
        for (xi, qi) in x.iter().zip(q0) {
            assert!((xi - qi / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn random_spd_residual() {
        let mut rng = SeededRng::new(11);
        for cond in [1.0, 10.0, 1e2, 1e4] {
            let n = 8;
            let eigs: Vec<f64> = (0..n).map(|i| 1.0 + (cond - 1.0) * i as f64 / (n - 1) as f64).collect();
            let h = spd_with_spectrum(&eigs, &mut rng);
            let q = rng.normal_vec(n);
            let x = solve_exact(&h, &q).unwrap();
            let hx = h.matvec(&x, Precision::Full).unwrap();
            assert!(relative_error(&hx, &q) < 1e-10, "cond {cond}");
        }
    }

    #[test]
    fn rejects_indefinite() {
        let h = Matrix::from_vec(2, 2, vec![1.0, 2.0, 2.0, 1.0]).unwrap();
        assert!(matches!(solve_exact(&h, &[1.0, 1.0]), Err(GkaError::NotPositiveDefinite { pivot: 1, .. })));
        assert!(solve_exact(&Matrix::zeros(2, 3), &[1.0, 1.0]).is_err());
    }

    #[test]
    fn orthogonal_is_orthogonal() {
        let mut rng = SeededRng::new(12);
        let q = random_orthogonal(6, &mut rng);
        let g = matmul(&q.transpose(), &q, Precision::Full).unwrap();
        assert!(g.max_abs_diff(&Matrix::identity(6)) < 1e-12);
    }
}
