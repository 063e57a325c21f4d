//! NB2 maximum likelihood with a log link and offset.
//!
//! Per observation, with `mu = exp(x'b + offset)`:
//!
//! ```text
//! l = sum_{j<y} ln(1 + a j) - ln y! + y ln mu - (y + 1/a) ln(1 + a mu)
//! ```
//!
//! which tends to the Poisson log-likelihood as `a -> 0`. The fit alternates
//! IRLS on `b` (weights `mu / (1 + a mu)`) with a safeguarded one-dimensional
//! Newton solve for `a >= 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, lu_inverse, spd_inverse, Matrix};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitOptions {
    /// Joint gradient-norm tolerance.
    pub tol: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    /// Holds the dispersion fixed (0 gives a Poisson GLM).
    pub fixed_alpha: Option<f64>,
    /// `|b_j|` above this flags (quasi-)separation.
    pub separation_bound: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            tol: 1e-8,
            max_outer: 200,
            max_inner: 50,
            fixed_alpha: None,
            separation_bound: 20.0,
        }
    }
}

impl FitOptions {
    pub fn poisson() -> Self {
        FitOptions {
            fixed_alpha: Some(0.0),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FitFlags {
    /// All responses are zero; the intercept diverges to minus infinity.
    pub non_estimable: bool,
    pub separation: bool,
    /// The dispersion sits on the `a = 0` boundary (Poisson limit).
    pub alpha_at_boundary: bool,
    /// The dispersion was held fixed rather than estimated.
    #[serde(default)]
    pub alpha_fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult<T> {
    pub beta: Vec<T>,
    pub alpha: T,
    pub loglik: T,
    pub n_obs: usize,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: T,
    pub flags: FitFlags,
    /// Inverse observed information for `b` (model-based covariance).
    pub cov_model: Option<Matrix<T>>,
    /// Cluster-robust covariance for `b`, filled in separately.
    pub cov_cluster: Option<Matrix<T>>,
    pub n_clusters: Option<usize>,
}

impl<T: Scalar> FitResult<T> {
    /// True when `a` was estimated at an interior point, so inference is
    /// joint in `(b, a)`.
    pub fn alpha_is_free(&self) -> bool {
        !self.flags.alpha_fixed && !self.flags.alpha_at_boundary && self.alpha > T::zero()
    }
}

/// Count as an integer for the `sum_{j<y}` terms.
fn count(y: impl Scalar) -> usize {
    y.to_usize().expect("non-negative integer count")
}

/// `ln(1+x) - x/(1+x)`, accurate for small `x`.
fn h<T: Scalar>(x: T) -> T {
    if x < T::lit(1e-3) {
        let mut s = T::zero();
        let mut p = x;
        for k in 2..10 {
            p *= x;
            let kk = T::from_usize_lossy(k);
            let term = (kk - T::one()) / kk * p;
            s += if k % 2 == 0 { term } else { -term };
        }
        s
    } else {
        x.ln_1p() - x / (T::one() + x)
    }
}

/// `x^2/(1+x)^2 - 2 h(x)`, accurate for small `x`.
fn k3<T: Scalar>(x: T) -> T {
    if x < T::lit(1e-3) {
        let mut s = T::zero();
        let mut p = x * x;
        for k in 3..11 {
            p *= x;
            let kk = T::from_usize_lossy(k);
            let term = (kk - T::one()) * (kk - T::lit(2.0)) / kk * p;
            s += if k % 2 == 0 { term } else { -term };
        }
        s
    } else {
        let r = x / (T::one() + x);
        r * r - T::lit(2.0) * h(x)
    }
}

pub fn ln_factorial<T: Scalar>(y: usize) -> T {
    (2..=y).map(|k| T::from_usize_lossy(k).ln()).sum()
}

/// Log-likelihood contribution of one observation.
pub fn nb2_loglik_obs<T: Scalar>(y: T, mu: T, alpha: T) -> T {
    let n = count(y);
    let base = -ln_factorial::<T>(n) + if n > 0 { y * mu.ln() } else { T::zero() };
    if alpha == T::zero() {
        return base - mu;
    }
    let mut s = T::zero();
    for j in 0..n {
        s += (alpha * T::from_usize_lossy(j)).ln_1p();
    }
    s + base - y * (alpha * mu).ln_1p() - (alpha * mu).ln_1p() / alpha
}

/// First and second derivative of one observation's log-likelihood in `a`.
pub fn alpha_derivs_obs<T: Scalar>(y: T, mu: T, alpha: T) -> (T, T) {
    let n = count(y);
    if alpha == T::zero() {
        let d = y - mu;
        let two_thirds = T::lit(2.0 / 3.0);
        let sq: T = (0..n).map(|j| T::from_usize_lossy(j * j)).sum();
        let mu2 = mu * mu;
        return (
            T::lit(0.5) * (d * d - y),
            -sq - two_thirds * mu2 * mu + y * mu2,
        );
    }
    let x = alpha * mu;
    let mut s1 = T::zero();
    let mut s2 = T::zero();
    for j in 0..n {
        let jj = T::from_usize_lossy(j);
        let q = T::one() / (T::one() + alpha * jj);
        s1 += jj * q;
        s2 += jj * jj * q * q;
    }
    let a2 = alpha * alpha;
    let one_ax = T::one() + x;
    let score = s1 + h(x) / a2 - y * mu / one_ax;
    let hess = -s2 + k3(x) / (a2 * alpha) + y * mu * mu / (one_ax * one_ax);
    (score, hess)
}

pub struct Problem<'a, T> {
    pub x: &'a Matrix<T>,
    pub y: &'a [T],
    pub offset: &'a [T],
}

impl<'a, T: Scalar> Problem<'a, T> {
    pub fn new(x: &'a Matrix<T>, y: &'a [T], offset: &'a [T]) -> Result<Self> {
        if x.rows() != y.len() || y.len() != offset.len() {
            return Err(Error::InvalidSpec(format!(
                "dimension mismatch: X is {}x{}, y has {}, offset has {}",
                x.rows(),
                x.cols(),
                y.len(),
                offset.len()
            )));
        }
        for (i, &v) in y.iter().enumerate() {
            if !(v >= T::zero()) || v.fract() != T::zero() {
                return Err(Error::InvalidSpec(format!(
                    "response {i} is not a non-negative integer"
                )));
            }
        }
        Ok(Problem { x, y, offset })
    }

    pub fn mu(&self, beta: &[T]) -> Vec<T> {
        self.x
            .mul_vec(beta)
            .iter()
            .zip(self.offset)
            .map(|(&e, &o)| (e + o).exp())
            .collect()
    }

    pub fn loglik(&self, beta: &[T], alpha: T) -> T {
        self.mu(beta)
            .iter()
            .zip(self.y)
            .map(|(&m, &y)| nb2_loglik_obs(y, m, alpha))
            .sum()
    }

    pub fn beta_score(&self, mu: &[T], alpha: T) -> Vec<T> {
        let p = self.x.cols();
        let mut g = vec![T::zero(); p];
        for i in 0..self.y.len() {
            let r = (self.y[i] - mu[i]) / (T::one() + alpha * mu[i]);
            for (gj, &xij) in g.iter_mut().zip(self.x.row(i)) {
                *gj += xij * r;
            }
        }
        g
    }

    pub fn alpha_score(&self, mu: &[T], alpha: T) -> (T, T) {
        let mut s = T::zero();
        let mut hs = T::zero();
        for (&y, &m) in self.y.iter().zip(mu) {
            let (a, b) = alpha_derivs_obs(y, m, alpha);
            s += a;
            hs += b;
        }
        (s, hs)
    }

    /// Negative observed Hessian in `b` at fixed `a`.
    pub fn beta_information(&self, mu: &[T], alpha: T) -> Matrix<T> {
        let p = self.x.cols();
        let mut a = Matrix::zeros(p, p);
        for i in 0..self.y.len() {
            let d = T::one() + alpha * mu[i];
            let w = mu[i] * (T::one() + alpha * self.y[i]) / (d * d);
            a.add_outer(self.x.row(i), w);
        }
        a
    }

    /// Negative observed Hessian in `(b, a)`, `a` last.
    pub fn joint_information(&self, mu: &[T], alpha: T) -> Matrix<T> {
        let p = self.x.cols();
        let ab = self.beta_information(mu, alpha);
        let mut a = Matrix::zeros(p + 1, p + 1);
        for i in 0..p {
            for j in 0..p {
                a[(i, j)] = ab[(i, j)];
            }
        }
        let mut cross = vec![T::zero(); p];
        for i in 0..self.y.len() {
            let d = T::one() + alpha * mu[i];
            let c = mu[i] * (self.y[i] - mu[i]) / (d * d);
            for (cj, &xij) in cross.iter_mut().zip(self.x.row(i)) {
                *cj += xij * c;
            }
        }
        for j in 0..p {
            a[(j, p)] = cross[j];
            a[(p, j)] = cross[j];
        }
        a[(p, p)] = -self.alpha_score(mu, alpha).1;
        a
    }

    /// Per-observation score vectors: `b` components, then `a` if requested.
    pub fn scores(&self, beta: &[T], alpha: T, with_alpha: bool) -> Vec<Vec<T>> {
        let mu = self.mu(beta);
        (0..self.y.len())
            .map(|i| {
                let r = (self.y[i] - mu[i]) / (T::one() + alpha * mu[i]);
                let mut s: Vec<T> = self.x.row(i).iter().map(|&x| x * r).collect();
                if with_alpha {
                    s.push(alpha_derivs_obs(self.y[i], mu[i], alpha).0);
                }
                s
            })
            .collect()
    }

    /// IRLS for `b` at fixed `a`, with step halving on likelihood decrease.
    fn solve_beta(&self, beta: &mut Vec<T>, alpha: T, opts: &FitOptions) -> Result<usize> {
        let tol = T::lit(opts.tol);
        let mut ll = self.loglik(beta, alpha);
        for it in 0..opts.max_inner {
            let mu = self.mu(beta);
            let g = self.beta_score(&mu, alpha);
            let gnorm = g.iter().map(|&v| v * v).sum::<T>().sqrt();
            if gnorm < tol * T::lit(0.1) {
                return Ok(it);
            }
            // Fisher scoring step: (X'WX) d = score, W = mu / (1 + a mu).
            let p = self.x.cols();
            let mut info = Matrix::zeros(p, p);
            for i in 0..self.y.len() {
                info.add_outer(self.x.row(i), mu[i] / (T::one() + alpha * mu[i]));
            }
            let l = cholesky(&info)?;
            let step = cholesky_solve(&l, &g);
            let mut t = T::one();
            let mut accepted = false;
            for _ in 0..30 {
                let cand: Vec<T> = beta.iter().zip(&step).map(|(&b, &d)| b + t * d).collect();
                let cll = self.loglik(&cand, alpha);
                if cll.is_finite() && cll >= ll - T::epsilon() * ll.abs() * T::lit(16.0) {
                    *beta = cand;
                    ll = cll;
                    accepted = true;
                    break;
                }
                t *= T::lit(0.5);
            }
            if !accepted {
                return Ok(it);
            }
            let smax = step.iter().fold(T::zero(), |m, &d| m.max(d.abs()));
            if smax * t < T::epsilon() * T::lit(4.0) {
                return Ok(it + 1);
            }
        }
        Ok(opts.max_inner)
    }

    /// Maximizes the profile in `a` at fixed `b`. Returns the new `a`.
    fn solve_alpha(&self, mu: &[T], start: T) -> T {
        let score = |a: T| self.alpha_score(mu, a);
        if score(T::zero()).0 <= T::zero() {
            return T::zero();
        }
        // Bracket the root: score > 0 at lo, < 0 at hi.
        let mut lo = T::zero();
        let mut hi = start.max(T::lit(1e-6));
        let cap = T::lit(1e8);
        loop {
            let s = score(hi).0;
            if s < T::zero() {
                break;
            }
            lo = hi;
            hi *= T::lit(4.0);
            if hi > cap {
                return cap;
            }
        }
        let mut a = if start > lo && start < hi { start } else { (lo + hi) * T::lit(0.5) };
        for _ in 0..200 {
            let (s, hs) = score(a);
            if s == T::zero() {
                return a;
            }
            if s > T::zero() {
                lo = a;
            } else {
                hi = a;
            }
            let newton = a - s / hs;
            let next = if hs < T::zero() && newton > lo && newton < hi {
                newton
            } else {
                (lo + hi) * T::lit(0.5)
            };
            if (next - a).abs() <= T::epsilon() * T::lit(8.0) * a.max(T::lit(1e-300)) {
                return next;
            }
            a = next;
            if hi - lo <= T::epsilon() * T::lit(8.0) * hi {
                return a;
            }
        }
        a
    }
}

/// Poisson starting values: IRLS from `mu0 = (y + mean y) / 2`.
fn poisson_start<T: Scalar>(prob: &Problem<'_, T>) -> Result<Vec<T>> {
    let n = prob.y.len();
    let p = prob.x.cols();
    let ybar = prob.y.iter().copied().sum::<T>() / T::from_usize_lossy(n);
    let half = T::lit(0.5);
    let mut info = Matrix::zeros(p, p);
    let mut rhs = vec![T::zero(); p];
    for i in 0..n {
        let mu0 = (prob.y[i] + ybar) * half;
        let z = mu0.ln() - prob.offset[i];
        info.add_outer(prob.x.row(i), mu0);
        for (r, &xij) in rhs.iter_mut().zip(prob.x.row(i)) {
            *r += xij * mu0 * z;
        }
    }
    let l = cholesky(&info)?;
    Ok(cholesky_solve(&l, &rhs))
}

/// Method-of-moments dispersion from Poisson residuals, floored at 1e-6.
fn moment_alpha<T: Scalar>(prob: &Problem<'_, T>, mu: &[T]) -> T {
    let n = prob.y.len();
    let p = prob.x.cols();
    let s: T = prob
        .y
        .iter()
        .zip(mu)
        .map(|(&y, &m)| ((y - m) * (y - m) - y) / (m * m))
        .sum();
    let df = T::from_usize_lossy(n.saturating_sub(p).max(1));
    (s / df).max(T::lit(1e-6))
}

pub fn fit_nb2<T: Scalar>(
    x: &Matrix<T>,
    y: &[T],
    offset: &[T],
    opts: &FitOptions,
) -> Result<FitResult<T>> {
    let prob = Problem::new(x, y, offset)?;
    let n = y.len();
    let p = x.cols();
    if n == 0 || p == 0 {
        return Err(Error::InvalidSpec("empty design".into()));
    }
    if y.iter().all(|&v| v == T::zero()) {
        log::warn!("all responses are zero; model is not estimable");
        return Ok(FitResult {
            beta: vec![T::zero(); p],
            alpha: T::zero(),
            loglik: T::zero(),
            n_obs: n,
            converged: false,
            iterations: 0,
            gradient_norm: T::zero(),
            flags: FitFlags {
                non_estimable: true,
                ..Default::default()
            },
            cov_model: None,
            cov_cluster: None,
            n_clusters: None,
        });
    }

    let mut beta = poisson_start(&prob)?;
    prob.solve_beta(&mut beta, T::zero(), opts)?;
    let mut alpha = match opts.fixed_alpha {
        Some(a) => T::lit(a),
        None => moment_alpha(&prob, &prob.mu(&beta)),
    };
    let tol = T::lit(opts.tol);
    let mut converged = false;
    let mut iterations = 0;
    let mut gnorm = T::infinity();
    for it in 1..=opts.max_outer {
        iterations = it;
        prob.solve_beta(&mut beta, alpha, opts)?;
        let mu = prob.mu(&beta);
        if opts.fixed_alpha.is_none() {
            alpha = prob.solve_alpha(&mu, alpha);
        }
        let g = prob.beta_score(&mu, alpha);
        let mut g2: T = g.iter().map(|&v| v * v).sum();
        if opts.fixed_alpha.is_none() {
            let (sa, _) = prob.alpha_score(&mu, alpha);
            // At the boundary only a positive score violates optimality.
            if alpha > T::zero() || sa > T::zero() {
                g2 += sa * sa;
            }
        }
        gnorm = g2.sqrt();
        if gnorm < tol {
            converged = true;
            break;
        }
    }

    let mu = prob.mu(&beta);
    let loglik = prob.loglik(&beta, alpha);
    let at_boundary = opts.fixed_alpha.is_none() && alpha == T::zero();
    let bound = T::lit(opts.separation_bound);
    let separation = beta.iter().any(|b| b.abs() > bound);
    if separation {
        log::warn!("coefficient magnitude above {} suggests separation", opts.separation_bound);
    }
    if !converged {
        log::warn!("NB2 fit did not converge after {iterations} iterations (|g| = {gnorm})");
    }
    let cov_model = model_covariance(&prob, &mu, alpha, opts.fixed_alpha.is_none() && !at_boundary);
    Ok(FitResult {
        beta,
        alpha,
        loglik,
        n_obs: n,
        converged,
        iterations,
        gradient_norm: gnorm,
        flags: FitFlags {
            non_estimable: false,
            separation,
            alpha_at_boundary: at_boundary,
            alpha_fixed: opts.fixed_alpha.is_some(),
        },
        cov_model,
        cov_cluster: None,
        n_clusters: None,
    })
}

/// `b` block of the inverse observed information (joint in `(b, a)` when
/// the dispersion is free).
fn model_covariance<T: Scalar>(
    prob: &Problem<'_, T>,
    mu: &[T],
    alpha: T,
    joint: bool,
) -> Option<Matrix<T>> {
    let p = prob.x.cols();
    if joint {
        let inv = lu_inverse(&prob.joint_information(mu, alpha)).ok()?;
        let idx: Vec<usize> = (0..p).collect();
        Some(inv.select(&idx))
    } else {
        spd_inverse(&prob.beta_information(mu, alpha)).ok()
    }
}
