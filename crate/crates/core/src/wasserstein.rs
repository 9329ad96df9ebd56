//! Quadratic Wasserstein distances between Gaussian laws, with exact
//! expressions for linear recursions driven by constant directions.
//!
//! When every direction map is constant and the corrections are linear, both
//! marginals are Gaussian with rank-one-perturbed and isotropic covariances
//! respectively, and the squared distance between step-`t` marginals has the
//! closed form
//!
//! ```text
//! W2^2 = (n-1)/n (sqrt(2)-1)^2 a_t^2 + n ((1 + (sqrt(2)-1)/n) a_t - b_t)^2
//! ```
//!
//! with `a_t^2 = [(I-L)^{-T} (F^T F / n) (I-L)^{-1}]_tt` and
//! `b_t^2 = [(I-G)^{-T} Sigma (I-G)^{-1}]_tt`. Summed over steps, the first
//! term gives a floor on `E||X - Y||^2` that no coupling can beat, which is
//! what makes order-one coupling errors the best possible outcome.

use nalgebra::{DMatrix, DVector};

use crate::linalg::{sqrt_psd, LinalgError};
use crate::state_evolution::LinearCaseSpec;

/// Gaussian distribution on `R^d` described by its first two moments. The
/// covariance must be symmetric positive semidefinite.
#[derive(Debug, Clone)]
pub struct GaussianLaw {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianLaw {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self, LinalgError> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(LinalgError::DimensionMismatch(format!(
                "mean has length {}, covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        Ok(Self { mean, cov })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: DVector::zeros(dim),
            cov: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Squared quadratic Wasserstein distance between Gaussian laws,
///
/// ```text
/// ||mu_a - mu_b||^2 + tr(C_a) + tr(C_b) - 2 tr((C_b^{1/2} C_a C_b^{1/2})^{1/2}).
/// ```
pub fn w2_squared(a: &GaussianLaw, b: &GaussianLaw) -> Result<f64, LinalgError> {
    if a.dim() != b.dim() {
        return Err(LinalgError::DimensionMismatch(format!(
            "laws have dimensions {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let root_b = sqrt_psd(&b.cov)?;
    let mut inner = &root_b * &a.cov * &root_b;
    // Symmetrize the congruence before the second root; rounding breaks
    // exact symmetry.
    inner = (&inner + inner.transpose()) * 0.5;
    let cross = sqrt_psd(&inner)?;
    let trace_term = a.cov.trace() + b.cov.trace() - 2.0 * cross.trace();
    Ok(((&a.mean - &b.mean).norm_squared() + trace_term).max(0.0))
}

pub fn w2(a: &GaussianLaw, b: &GaussianLaw) -> Result<f64, LinalgError> {
    Ok(w2_squared(a, b)?.sqrt())
}

/// Per-step marginal distances and the coupling floor for a linear
/// recursion.
#[derive(Debug, Clone)]
pub struct LbReport {
    /// Root diagonal scales of the matrix-driven marginals.
    pub alpha: Vec<f64>,
    /// Root diagonal scales of the comparison marginals.
    pub beta: Vec<f64>,
    /// Exact squared distance between step marginals.
    pub w2_sq_per_step: Vec<f64>,
    /// `(n-1)/n (sqrt(2)-1)^2 tr((I-L)^{-T} (F^T F / n) (I-L)^{-1})`: a lower
    /// bound on `E||X - Y||^2` over all couplings, attained by the optimal
    /// comparison covariance.
    pub lower_bound: f64,
    /// `sqrt(sum_t W2^2)`, a lower bound on the joint distance.
    pub sandwich_low: f64,
    /// `sum_t W2`, an upper bound on the joint distance.
    pub sandwich_high: f64,
}

fn unit_upper_inverse(strict: &DMatrix<f64>) -> DMatrix<f64> {
    let t = strict.nrows();
    let m = DMatrix::identity(t, t) - strict;
    m.solve_upper_triangular(&DMatrix::identity(t, t))
        .expect("unit-diagonal triangular matrix is invertible")
}

/// Evaluates the closed-form marginal distances for a linear recursion with
/// comparison covariance `sigma` in dimension `n`.
pub fn lb_linear_case(
    spec: &LinearCaseSpec,
    sigma: &DMatrix<f64>,
    n: usize,
) -> Result<LbReport, LinalgError> {
    let t_max = spec.t_max();
    if sigma.nrows() != t_max || sigma.ncols() != t_max {
        return Err(LinalgError::DimensionMismatch(format!(
            "covariance must be {t_max}x{t_max}, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    let nf = n as f64;
    let shrink = 2.0_f64.sqrt() - 1.0;

    let il = unit_upper_inverse(spec.lambda());
    let ig = unit_upper_inverse(spec.gamma());
    let gram_x = il.transpose() * (spec.f_cols().transpose() * spec.f_cols() / nf) * &il;
    let gram_y = ig.transpose() * sigma * &ig;

    let mut alpha = Vec::with_capacity(t_max);
    let mut beta = Vec::with_capacity(t_max);
    let mut w2_sq_per_step = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let a_t = gram_x[(t, t)].max(0.0).sqrt();
        let b_t = gram_y[(t, t)].max(0.0).sqrt();
        let w2_sq = (nf - 1.0) / nf * shrink * shrink * a_t * a_t
            + nf * ((1.0 + shrink / nf) * a_t - b_t).powi(2);
        alpha.push(a_t);
        beta.push(b_t);
        w2_sq_per_step.push(w2_sq);
    }
    let lower_bound = (nf - 1.0) / nf * shrink * shrink * gram_x.trace();
    let sandwich_low = w2_sq_per_step.iter().sum::<f64>().sqrt();
    let sandwich_high = w2_sq_per_step.iter().map(|v| v.sqrt()).sum();
    Ok(LbReport {
        alpha,
        beta,
        w2_sq_per_step,
        lower_bound,
        sandwich_low,
        sandwich_high,
    })
}

/// Exact law of the step-`t` matrix-driven iterate: centered with covariance
/// `a_t^2 (I + u u^T)` where `u` is the normalized propagated direction.
pub fn linear_marginal_x(spec: &LinearCaseSpec, n: usize, t: usize) -> GaussianLaw {
    let il = unit_upper_inverse(spec.lambda());
    let v = spec.f_cols() * il.column(t);
    let cov = (DMatrix::identity(n, n) * v.norm_squared() + &v * v.transpose()) / n as f64;
    GaussianLaw {
        mean: DVector::zeros(n),
        cov,
    }
}

/// Exact law of the step-`t` comparison iterate: centered isotropic with
/// variance `b_t^2`.
pub fn linear_marginal_y(
    spec: &LinearCaseSpec,
    sigma: &DMatrix<f64>,
    n: usize,
    t: usize,
) -> GaussianLaw {
    let ig = unit_upper_inverse(spec.gamma());
    let scale = (ig.column(t).transpose() * sigma * ig.column(t))[(0, 0)];
    GaussianLaw {
        mean: DVector::zeros(n),
        cov: DMatrix::identity(n, n) * scale,
    }
}

/// Squared diagonal scale `a_t^2` for the autoregressive recursion
/// `g_t = lambda x_{t-1}` with orthonormal constant directions: equal to `t`
/// when `lambda^2 = 1` and `(lambda^{2t} - 1) / (lambda^2 - 1)` otherwise
/// (`t` counted from one).
pub fn ar_alpha_sq(lambda: f64, t: usize) -> f64 {
    let l2 = lambda * lambda;
    if l2 == 1.0 {
        t as f64
    } else {
        (l2.powi(t as i32) - 1.0) / (l2 - 1.0)
    }
}
