//! Small dense linear algebra for the regression code: row-major matrices,
//! Cholesky factorization, LU inversion and a Jacobi eigenvalue routine.
//! Problem sizes are tens of columns, so nothing here is blocked or tuned.

use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Matrix {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<T> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        assert_eq!(self.cols, v.len(), "shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(&a, &b)| a * b).sum())
            .collect()
    }

    pub fn scale(&self, s: T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    /// Adds `w * v v'` in place.
    pub fn add_outer(&mut self, v: &[T], w: T) {
        assert!(self.rows == v.len() && self.cols == v.len());
        for i in 0..v.len() {
            let vi = v[i] * w;
            if vi == T::zero() {
                continue;
            }
            for j in 0..v.len() {
                self[(i, j)] += vi * v[j];
            }
        }
    }

    /// Keeps the listed rows and columns of a square matrix.
    pub fn select(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(idx.len(), idx.len());
        for (a, &i) in idx.iter().enumerate() {
            for (b, &j) in idx.iter().enumerate() {
                out[(a, b)] = self[(i, j)];
            }
        }
        out
    }

    /// Keeps the listed columns, in the given order.
    pub fn select_columns(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(self.rows, idx.len());
        for i in 0..self.rows {
            for (b, &j) in idx.iter().enumerate() {
                out[(i, b)] = self[(i, j)];
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max)
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.rows == self.cols
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    pub fn cast<U: Scalar>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::Numerical("cholesky of a non-square matrix".into()));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) || !d.is_finite() {
            return Err(Error::Numerical(format!(
                "matrix is not positive definite (pivot {j})"
            )));
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L L' x = b` given the Cholesky factor `L`.
pub fn cholesky_solve<T: Scalar>(l: &Matrix<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let v = l[(i, k)] * y[k];
            y[i] -= v;
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            let v = l[(k, i)] * y[k];
            y[i] -= v;
        }
        y[i] /= l[(i, i)];
    }
    y
}

pub fn spd_solve<T: Scalar>(a: &Matrix<T>, b: &[T]) -> Result<Vec<T>> {
    Ok(cholesky_solve(&cholesky(a)?, b))
}

pub fn spd_inverse<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let l = cholesky(a)?;
    let n = a.rows();
    let mut inv = Matrix::zeros(n, n);
    let mut e = vec![T::zero(); n];
    for j in 0..n {
        e.iter_mut().for_each(|x| *x = T::zero());
        e[j] = T::one();
        let col = cholesky_solve(&l, &e);
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    symmetrize(&mut inv);
    Ok(inv)
}

/// Inverse of a general square matrix by LU with partial pivoting.
pub fn lu_inverse<T: Scalar>(a: &Matrix<T>) -> Result<Matrix<T>> {
    let n = a.rows();
    if n != a.cols() {
        return Err(Error::Numerical("inverse of a non-square matrix".into()));
    }
    let mut m = a.clone();
    let mut inv = Matrix::identity(n);
    let scale = a.data.iter().fold(T::zero(), |acc, &x| acc.max(x.abs()));
    let tiny = scale * T::epsilon() * T::from_usize_lossy(n.max(1));
    for c in 0..n {
        let p = (c..n)
            .max_by(|&i, &j| {
                m[(i, c)]
                    .abs()
                    .partial_cmp(&m[(j, c)].abs())
                    .expect("finite entries")
            })
            .expect("non-empty range");
        if !(m[(p, c)].abs() > tiny) {
            return Err(Error::Numerical(format!("singular matrix (column {c})")));
        }
        if p != c {
            for j in 0..n {
                m.data.swap(p * n + j, c * n + j);
                inv.data.swap(p * n + j, c * n + j);
            }
        }
        let piv = m[(c, c)];
        for j in 0..n {
            m[(c, j)] /= piv;
            inv[(c, j)] /= piv;
        }
        for i in 0..n {
            if i == c {
                continue;
            }
            let f = m[(i, c)];
            if f == T::zero() {
                continue;
            }
            for j in 0..n {
                let (mv, iv) = (m[(c, j)], inv[(c, j)]);
                m[(i, j)] -= f * mv;
                inv[(i, j)] -= f * iv;
            }
        }
    }
    Ok(inv)
}

/// Replaces `a` with `(a + a') / 2`.
pub fn symmetrize<T: Scalar>(a: &mut Matrix<T>) {
    let half = T::lit(0.5);
    for i in 0..a.rows() {
        for j in 0..i {
            let v = (a[(i, j)] + a[(j, i)]) * half;
            a[(i, j)] = v;
            a[(j, i)] = v;
        }
    }
}

/// Greedy column selection on a Gram matrix: walks the columns in order and
/// keeps each one whose residual variance, after projecting out the columns
/// already kept, exceeds `rel_tol` times its own variance.
pub fn independent_columns<T: Scalar>(gram: &Matrix<T>, rel_tol: T) -> Vec<usize> {
    let n = gram.rows();
    let mut kept: Vec<usize> = Vec::new();
    // Rows of the partial Cholesky factor for kept columns.
    let mut l: Vec<Vec<T>> = Vec::new();
    for j in 0..n {
        let diag = gram[(j, j)];
        if !(diag > T::zero()) {
            continue;
        }
        let mut row = Vec::with_capacity(kept.len());
        for (a, &k) in kept.iter().enumerate() {
            let mut s = gram[(j, k)];
            for b in 0..a {
                s -= row[b] * l[a][b];
            }
            row.push(s / l[a][a]);
        }
        let resid = diag - row.iter().map(|&x| x * x).sum::<T>();
        if resid > rel_tol * diag {
            row.push(resid.sqrt());
            l.push(row);
            kept.push(j);
        }
    }
    kept
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
pub fn symmetric_eigenvalues<T: Scalar>(a: &Matrix<T>) -> Vec<T> {
    let n = a.rows();
    let mut m = a.clone();
    symmetrize(&mut m);
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off <= T::epsilon() * T::epsilon() {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m[(k, p)], m[(k, q)]);
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let (mpk, mqk) = (m[(p, k)], m[(q, k)]);
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev = m.diagonal();
    ev.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    ev
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd3() -> Matrix<f64> {
        Matrix::from_rows(&[
            vec![4.0, 2.0, 0.6],
            vec![2.0, 5.0, 1.0],
            vec![0.6, 1.0, 3.0],
        ])
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = spd3();
        let l = cholesky(&a).unwrap();
        assert!(l.matmul(&l.transpose()).max_abs_diff(&a) < 1e-12);
        assert!(cholesky(&Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]])).is_err());
    }

    #[test]
    fn inverses_agree() {
        let a = spd3();
        let i1 = spd_inverse(&a).unwrap();
        let i2 = lu_inverse(&a).unwrap();
        assert!(i1.max_abs_diff(&i2) < 1e-12);
        assert!(a.matmul(&i1).max_abs_diff(&Matrix::identity(3)) < 1e-12);
        let sing = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(lu_inverse(&sing).is_err());
    }

    #[test]
    fn lu_handles_indefinite() {
        let a = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let inv = lu_inverse(&a).unwrap();
        assert!(inv.max_abs_diff(&a) < 1e-15);
    }

    #[test]
    fn solve_matches_inverse() {
        let a = spd3();
        let b = [1.0, -2.0, 0.5];
        let x = spd_solve(&a, &b).unwrap();
        let y = spd_inverse(&a).unwrap().mul_vec(&b);
        for (p, q) in x.iter().zip(&y) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn collinear_columns_are_skipped() {
        // Columns: 1, x, 2x, 0, z.
        let x = Matrix::from_rows(&[
            vec![1.0, 1.0, 2.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0, 0.0, 1.0],
            vec![1.0, 1.0, 2.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0, 0.0, 0.0],
        ]);
        let g = x.transpose().matmul(&x);
        assert_eq!(independent_columns(&g, 1e-10), vec![0, 1, 4]);
    }

    #[test]
    fn jacobi_eigenvalues() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]);
        let ev: Vec<f64> = symmetric_eigenvalues(&a);
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
        let ev = symmetric_eigenvalues(&spd3());
        let trace: f64 = ev.iter().sum();
        assert!((trace - 12.0).abs() < 1e-10);
        assert!(ev.iter().all(|&e| e > 0.0));
    }

    #[test]
    fn works_in_f32() {
        let a: Matrix<f32> = spd3().cast();
        let inv = spd_inverse(&a).unwrap();
        assert!(a.matmul(&inv).max_abs_diff(&Matrix::identity(3)) < 1e-5);
    }
}
