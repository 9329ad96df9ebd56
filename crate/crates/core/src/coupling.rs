//! Joint construction of a matrix-driven trajectory and its Gaussian
//! comparison on a shared probability space.
//!
//! Both processes are driven by the same symmetric random matrix `A`. The
//! comparison noise is assembled step by step: each new direction `q_t` is
//! the Gram-Schmidt orthogonalization of `f_t(y_{<t})` against the earlier
//! directions (normalized to length `sqrt(n)`), and
//!
//! ```text
//! z_t = A q_t + 1/2 (A'_tt - <q_t, A q_t>/n) q_t
//!             + sum_{s<t} (A'_st - <q_s, A q_t>/n) q_s,
//! w_t = sum_{s<=t} Omega_st z_s,
//! y_t = m_t(y_{<t}) + w_t,
//! ```
//!
//! where `A'` is an independent copy of `A` of which only the leading
//! `T x T` corner enters. The resulting `z_t` are exactly iid standard
//! Gaussian vectors, so `y` has the prescribed comparison law while staying
//! maximally aligned with the `A`-driven trajectory `x`. The same recentring
//! makes the identity
//!
//! ```text
//! z_t = A q_t - 1/n sum_{s<=r} <z_s, q_t> q_s + sum_{s<=r} A'_st q_s
//! ```
//!
//! hold for every `t <= r`, which [`verify_identity`] checks to floating
//! point accuracy on any stored run.

use nalgebra::{DMatrix, DVector};

use crate::dynamics::{eval_columns, run_gfom, DynamicsError, SystemSpec, Trajectory};
use crate::linalg::{sample_goe_block_from, sample_goe_from, SymMatrix, UpperTriMatrix};
use crate::rng::RngStream;
use crate::state_evolution::SeParams;

/// Relative threshold below which a Gram-Schmidt residual is treated as
/// linearly dependent and a fallback basis vector is substituted.
pub const SPAN_TOLERANCE: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum CouplingError {
    #[error("no basis vector outside the current span at step {step}")]
    BasisExhausted { step: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Fixed ordered basis scanned when a candidate direction is linearly
/// dependent on the directions already constructed.
#[derive(Debug, Clone, Default)]
pub enum OrderedBasis {
    /// Standard basis `e_1, ..., e_n`.
    #[default]
    Standard,
    /// Caller-supplied vectors, scanned in order.
    Custom(Vec<DVector<f64>>),
}

impl OrderedBasis {
    fn len(&self, n: usize) -> usize {
        match self {
            OrderedBasis::Standard => n,
            OrderedBasis::Custom(vs) => vs.len(),
        }
    }

    fn vector(&self, i: usize, n: usize) -> DVector<f64> {
        match self {
            OrderedBasis::Standard => {
                let mut e = DVector::zeros(n);
                e[i] = 1.0;
                e
            }
            OrderedBasis::Custom(vs) => vs[i].clone(),
        }
    }
}

fn project_out(candidate: &DVector<f64>, qs: &[DVector<f64>], n: usize) -> DVector<f64> {
    let mut r = candidate.clone();
    for q in qs {
        let c = q.dot(&r) / n as f64;
        r.axpy(-c, q, 1.0);
    }
    // One re-orthogonalization pass when rounding has left a visible
    // component along the existing directions.
    let leak = qs
        .iter()
        .map(|q| q.dot(&r).abs())
        .fold(0.0_f64, f64::max);
    if leak > 1e-10 * (n as f64).sqrt() * r.norm() {
        for q in qs {
            let c = q.dot(&r) / n as f64;
            r.axpy(-c, q, 1.0);
        }
    }
    r
}

/// Orthogonalizes `candidate` against `qs` and rescales to length
/// `sqrt(n)`. When the candidate lies in the span of `qs` (up to
/// [`SPAN_TOLERANCE`]), the first basis vector outside that span is
/// substituted; the returned index is `Some(i)` in that case.
pub fn gram_schmidt_step(
    candidate: &DVector<f64>,
    qs: &[DVector<f64>],
    basis: &OrderedBasis,
    step: usize,
) -> Result<(DVector<f64>, Option<usize>), CouplingError> {
    let n = candidate.len();
    let sqrt_n = (n as f64).sqrt();
    let r = project_out(candidate, qs, n);
    if r.norm() > SPAN_TOLERANCE * candidate.norm() && candidate.norm() > 0.0 {
        return Ok((r.scale(sqrt_n / r.norm()), None));
    }
    for i in 0..basis.len(n) {
        let v = basis.vector(i, n);
        let r = project_out(&v, qs, n);
        if r.norm() > SPAN_TOLERANCE * v.norm() && v.norm() > 0.0 {
            return Ok((r.scale(sqrt_n / r.norm()), Some(i)));
        }
    }
    Err(CouplingError::BasisExhausted { step })
}

/// A coupled pair of trajectories together with every random object needed
/// to replay or audit the construction.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub n: usize,
    pub t_max: usize,
    /// Shared symmetric coupling matrix.
    pub a: SymMatrix,
    /// Leading `T x T` corner of the independent copy.
    pub a_prime: SymMatrix,
    /// Orthogonal directions, one column per step, each of length `sqrt(n)`.
    pub q: DMatrix<f64>,
    /// Cached products `A q_t`.
    pub aq: DMatrix<f64>,
    /// Reconstructed iid standard Gaussian columns.
    pub z: DMatrix<f64>,
    /// Comparison noise `w_t = sum_{s<=t} Omega_st z_s`.
    pub w: DMatrix<f64>,
    /// Comparison trajectory.
    pub y: Trajectory,
    /// Matrix-driven trajectory, generated from the same `a`.
    pub x: Trajectory,
    /// Triangular coefficients `R_st = <q_s, f_t(y_{<t})>/n`, so that
    /// `F(Y) = Q R`.
    pub r: UpperTriMatrix,
    /// `(step, basis index)` pairs where a dependent candidate forced a
    /// fallback direction.
    pub fallback_log: Vec<(usize, usize)>,
}

/// Draws `A` and `A'` from `stream` (in that order) and runs the coupled
/// construction for the given system and comparison parameters.
pub fn build_coupling(
    sys: &SystemSpec,
    params: &SeParams,
    stream: RngStream,
) -> Result<CoupledRun, CouplingError> {
    build_coupling_with_basis(sys, params, stream, &OrderedBasis::Standard)
}

/// [`build_coupling`] with an explicit fallback basis.
pub fn build_coupling_with_basis(
    sys: &SystemSpec,
    params: &SeParams,
    stream: RngStream,
    basis: &OrderedBasis,
) -> Result<CoupledRun, CouplingError> {
    let n = sys.dim();
    let t_max = sys.t_max();
    if params.n != n || params.t_max != t_max {
        return Err(CouplingError::DimensionMismatch(format!(
            "system is ({n}, {t_max}), parameters are ({}, {})",
            params.n, params.t_max
        )));
    }
    if t_max > n {
        return Err(CouplingError::DimensionMismatch(format!(
            "need at least as many coordinates as steps, got n = {n} < T = {t_max}"
        )));
    }

    let mut rng = stream.rng();
    let a = sample_goe_from(n, &mut rng);
    let a_prime = sample_goe_block_from(t_max, n, &mut rng);

    let mut qs: Vec<DVector<f64>> = Vec::with_capacity(t_max);
    let mut aqs: Vec<DVector<f64>> = Vec::with_capacity(t_max);
    let mut zs: Vec<DVector<f64>> = Vec::with_capacity(t_max);
    let mut w = DMatrix::zeros(n, t_max);
    let mut y = Trajectory::new(n);
    let mut fallback_log = Vec::new();

    for t in 0..t_max {
        let f_t = sys.f_specs()[t].eval(y.cols(), n)?;
        let (q_t, fallback) = gram_schmidt_step(&f_t, &qs, basis, t)?;
        if let Some(i) = fallback {
            fallback_log.push((t, i));
        }
        let aq_t = a.mul_vec(&q_t);

        let mut z_t = aq_t.clone();
        for (s, q_s) in qs.iter().enumerate() {
            let coeff = a_prime.entry(s, t) - q_s.dot(&aq_t) / n as f64;
            z_t.axpy(coeff, q_s, 1.0);
        }
        let coeff_t = 0.5 * (a_prime.entry(t, t) - q_t.dot(&aq_t) / n as f64);
        z_t.axpy(coeff_t, &q_t, 1.0);

        let mut w_t = DVector::zeros(n);
        for (s, z_s) in zs.iter().enumerate() {
            w_t.axpy(params.omega.entry(s, t), z_s, 1.0);
        }
        w_t.axpy(params.omega.entry(t, t), &z_t, 1.0);

        let mut y_t = params.m[t].eval(y.cols(), n)?;
        y_t += &w_t;

        qs.push(q_t);
        aqs.push(aq_t);
        zs.push(z_t);
        w.set_column(t, &w_t);
        y.push(y_t);
    }

    let x = run_gfom(sys, &a)?;
    let f_y = eval_columns(sys.f_specs(), &y)?;
    let q = DMatrix::from_columns(&qs);
    let r = UpperTriMatrix::from_upper_fn(t_max, |s, t| q.column(s).dot(&f_y.column(t)) / n as f64);

    Ok(CoupledRun {
        n,
        t_max,
        a,
        a_prime,
        q,
        aq: DMatrix::from_columns(&aqs),
        z: DMatrix::from_columns(&zs),
        w,
        y,
        x,
        r,
        fallback_log,
    })
}

/// Largest normalized residual of the reconstruction identity over all step
/// pairs `t <= r`:
///
/// ```text
/// max_{t <= r} || z_t - A q_t + 1/n sum_{s<=r} <z_s, q_t> q_s
///                   - sum_{s<=r} A'_st q_s || / sqrt(n)
/// ```
///
/// A correctly assembled run keeps this at rounding-error level; any
/// tampering with `a`, `a_prime`, `q`, or `z` makes it order one.
pub fn verify_identity(run: &CoupledRun) -> f64 {
    let n = run.n as f64;
    let mut worst = 0.0_f64;
    for t in 0..run.t_max {
        let q_t = run.q.column(t);
        let mut acc = DVector::from_column_slice(run.aq.column(t).as_slice());
        for s in 0..run.t_max {
            let q_s = run.q.column(s);
            let coeff = run.a_prime.entry(s, t) - run.z.column(s).dot(&q_t) / n;
            acc.axpy(coeff, &q_s.into_owned(), 1.0);
            if s >= t {
                let diff = run.z.column(t) - &acc;
                worst = worst.max(diff.norm() / n.sqrt());
            }
        }
    }
    worst
}
