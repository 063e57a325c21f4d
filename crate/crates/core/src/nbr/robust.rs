//! Cluster-robust (CR0) sandwich covariance.
//!
//! `V = A^-1 B A^-1` with `A` the observed information and
//! `B = sum_g s_g s_g'`, `s_g` the score summed within cluster `g`. When the
//! dispersion was estimated at an interior point the sandwich is formed on
//! the joint `(b, a)` parameter and the `b` block is returned; otherwise it
//! is formed on `b` alone.

use std::collections::BTreeMap;

use super::fit::{FitResult, Problem};
use crate::error::{Error, Result};
use crate::linalg::{lu_inverse, symmetrize, Matrix};
use crate::scalar::Scalar;

pub fn cluster_robust_cov<T: Scalar, C: Ord>(
    fit: &FitResult<T>,
    x: &Matrix<T>,
    y: &[T],
    offset: &[T],
    clusters: &[C],
) -> Result<Matrix<T>> {
    if clusters.len() != y.len() {
        return Err(Error::InvalidSpec(format!(
            "{} cluster ids for {} observations",
            clusters.len(),
            y.len()
        )));
    }
    let prob = Problem::new(x, y, offset)?;
    let joint = fit.alpha_is_free();
    let scores = prob.scores(&fit.beta, fit.alpha, joint);
    let dim = x.cols() + usize::from(joint);

    let mut sums: BTreeMap<&C, Vec<T>> = BTreeMap::new();
    for (c, s) in clusters.iter().zip(&scores) {
        let acc = sums.entry(c).or_insert_with(|| vec![T::zero(); dim]);
        for (a, &v) in acc.iter_mut().zip(s) {
            *a += v;
        }
    }
    if sums.len() < 2 {
        return Err(Error::TooFewClusters(sums.len()));
    }
    let mut b = Matrix::zeros(dim, dim);
    for s in sums.values() {
        b.add_outer(s, T::one());
    }

    let mu = prob.mu(&fit.beta);
    let a = if joint {
        prob.joint_information(&mu, fit.alpha)
    } else {
        prob.beta_information(&mu, fit.alpha)
    };
    let a_inv = lu_inverse(&a)?;
    let mut v = a_inv.matmul(&b).matmul(&a_inv);
    symmetrize(&mut v);
    let idx: Vec<usize> = (0..x.cols()).collect();
    Ok(v.select(&idx))
}

/// Heteroskedasticity-robust (HC0) covariance: every observation is its own
/// cluster.
pub fn hc0_cov<T: Scalar>(fit: &FitResult<T>, x: &Matrix<T>, y: &[T], offset: &[T]) -> Result<Matrix<T>> {
    let ids: Vec<usize> = (0..y.len()).collect();
    cluster_robust_cov(fit, x, y, offset, &ids)
}

/// Standard errors from the diagonal of a covariance matrix.
pub fn standard_errors<T: Scalar>(cov: &Matrix<T>) -> Vec<T> {
    cov.diagonal().iter().map(|&v| v.max(T::zero()).sqrt()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nbr::fit::{fit_nb2, FitOptions};

    #[test]
    fn single_cluster_is_an_error() {
        let x = Matrix::from_rows(&[vec![1.0], vec![1.0], vec![1.0]]);
        let y = [1.0, 4.0, 2.0];
        let off = [0.0; 3];
        let fit = fit_nb2(&x, &y, &off, &FitOptions::default()).unwrap();
        assert!(matches!(
            cluster_robust_cov(&fit, &x, &y, &off, &["a", "a", "a"]),
            Err(Error::TooFewClusters(1))
        ));
        assert!(cluster_robust_cov(&fit, &x, &y, &off, &["a", "b", "a"]).is_ok());
    }

    #[test]
    fn poisson_intercept_hc0_closed_form() {
        // Poisson, intercept only: A = sum mu = n ybar, scores y_i - ybar,
        // so V = sum (y_i - ybar)^2 / (n ybar)^2.
        let x = Matrix::from_rows(&vec![vec![1.0]; 5]);
        let y = [0.0, 3.0, 1.0, 6.0, 2.0];
        let off = [0.0; 5];
        let fit = fit_nb2(&x, &y, &off, &FitOptions::poisson()).unwrap();
        let v = hc0_cov(&fit, &x, &y, &off).unwrap();
        let ybar = 12.0 / 5.0;
        let ss: f64 = y.iter().map(|v| (v - ybar) * (v - ybar)).sum();
        assert!((v[(0, 0)] - ss / (5.0 * ybar).powi(2)).abs() < 1e-9, "{} vs {} beta {:?}", v[(0, 0)], ss / (5.0 * ybar).powi(2), fit.beta);
    }
}
