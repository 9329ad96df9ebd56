//! Exact conditional laws for degenerate Gaussian vectors and for adapted
//! linear observation systems, used as a small-scale reference against the
//! constructive coupling.
//!
//! The observation model is `xi_t = F_t theta + g_t` where
//! `theta ~ N(0, I_N)` and each `(F_t, g_t)` may depend measurably on the
//! earlier observations. Conditioned on a realized prefix, the latent vector
//! stays Gaussian with pseudo-inverse mean `F^+ (xi - g)` and projection
//! covariance `I - F^+ F`; everything here is dense and intended for desk
//! scale (latent dimension at most a few dozen), not for production runs.

use nalgebra::{DMatrix, DVector};

use crate::linalg::pinv;
use crate::wasserstein::GaussianLaw;

#[derive(Debug, thiserror::Error)]
pub enum ConditioningError {
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(
        "realization is not reachable by the system at step {step} \
         (relative residual {relative_residual:.3e})"
    )]
    InconsistentRealization { step: usize, relative_residual: f64 },
}

/// Observation matrix as a function of the realized history.
pub type MatrixFn = Box<dyn Fn(&[DVector<f64>]) -> DMatrix<f64> + Send + Sync>;
/// Observation shift as a function of the realized history.
pub type VectorFn = Box<dyn Fn(&[DVector<f64>]) -> DVector<f64> + Send + Sync>;

/// Conditional law of the leading coordinate block of a joint Gaussian given
/// the trailing block, as a map from observed values to Gaussian laws. The
/// covariance does not depend on the observed value.
#[derive(Debug, Clone)]
pub struct ConditionalMap {
    mean_head: DVector<f64>,
    mean_tail: DVector<f64>,
    /// `C_{theta xi} C_{xi xi}^+`.
    pub gain: DMatrix<f64>,
    /// `C_{theta theta} - C_{theta xi} C_{xi xi}^+ C_{xi theta}`.
    pub cov: DMatrix<f64>,
}

impl ConditionalMap {
    pub fn mean_at(&self, xi: &DVector<f64>) -> DVector<f64> {
        &self.mean_head + &self.gain * (xi - &self.mean_tail)
    }

    pub fn law_at(&self, xi: &DVector<f64>) -> GaussianLaw {
        GaussianLaw {
            mean: self.mean_at(xi),
            cov: self.cov.clone(),
        }
    }
}

/// Conditions the first `split` coordinates of `joint` on the rest. Handles
/// singular covariances through the pseudo-inverse.
pub fn cond_gaussian(joint: &GaussianLaw, split: usize) -> Result<ConditionalMap, ConditioningError> {
    let dim = joint.dim();
    if split > dim {
        return Err(ConditioningError::DimensionMismatch(format!(
            "split {split} exceeds dimension {dim}"
        )));
    }
    let tail = dim - split;
    let c_hh = joint.cov.view((0, 0), (split, split)).into_owned();
    let c_ht = joint.cov.view((0, split), (split, tail)).into_owned();
    let c_tt = joint.cov.view((split, split), (tail, tail)).into_owned();
    let gain = &c_ht * pinv(&c_tt);
    let cov = &c_hh - &gain * c_ht.transpose();
    Ok(ConditionalMap {
        mean_head: joint.mean.rows(0, split).into_owned(),
        mean_tail: joint.mean.rows(split, tail).into_owned(),
        gain,
        cov,
    })
}

/// Sequence of observations `xi_t = F_t theta + g_t` whose design may adapt
/// to the realized history. Adaptedness is enforced structurally: each map
/// only ever receives the strict prefix of observations.
pub struct AdaptedLinearSystem {
    n_latent: usize,
    f_fns: Vec<MatrixFn>,
    g_fns: Vec<VectorFn>,
}

impl AdaptedLinearSystem {
    pub fn new(
        n_latent: usize,
        f_fns: Vec<MatrixFn>,
        g_fns: Vec<VectorFn>,
    ) -> Result<Self, ConditioningError> {
        if n_latent == 0 || f_fns.is_empty() {
            return Err(ConditioningError::InvalidSystem(
                "need a positive latent dimension and at least one step".into(),
            ));
        }
        if f_fns.len() != g_fns.len() {
            return Err(ConditioningError::InvalidSystem(format!(
                "{} observation matrices but {} shifts",
                f_fns.len(),
                g_fns.len()
            )));
        }
        Ok(Self {
            n_latent,
            f_fns,
            g_fns,
        })
    }

    /// Convenience constructor for a non-adaptive design.
    pub fn fixed(
        n_latent: usize,
        designs: Vec<(DMatrix<f64>, DVector<f64>)>,
    ) -> Result<Self, ConditioningError> {
        let mut f_fns: Vec<MatrixFn> = Vec::with_capacity(designs.len());
        let mut g_fns: Vec<VectorFn> = Vec::with_capacity(designs.len());
        for (f, g) in designs {
            f_fns.push(Box::new(move |_| f.clone()));
            g_fns.push(Box::new(move |_| g.clone()));
        }
        Self::new(n_latent, f_fns, g_fns)
    }

    pub fn n_latent(&self) -> usize {
        self.n_latent
    }

    pub fn t_max(&self) -> usize {
        self.f_fns.len()
    }

    fn design_at(
        &self,
        t: usize,
        history: &[DVector<f64>],
    ) -> Result<(DMatrix<f64>, DVector<f64>), ConditioningError> {
        let f = (self.f_fns[t])(history);
        let g = (self.g_fns[t])(history);
        if f.ncols() != self.n_latent {
            return Err(ConditioningError::DimensionMismatch(format!(
                "step {t} matrix has {} columns, latent dimension is {}",
                f.ncols(),
                self.n_latent
            )));
        }
        if g.len() != f.nrows() {
            return Err(ConditioningError::DimensionMismatch(format!(
                "step {t} shift has length {}, matrix has {} rows",
                g.len(),
                f.nrows()
            )));
        }
        Ok((f, g))
    }

    /// Generates the observation sequence for a given latent vector.
    pub fn simulate(&self, theta: &DVector<f64>) -> Result<Vec<DVector<f64>>, ConditioningError> {
        if theta.len() != self.n_latent {
            return Err(ConditioningError::DimensionMismatch(format!(
                "latent vector has length {}, expected {}",
                theta.len(),
                self.n_latent
            )));
        }
        let mut xi: Vec<DVector<f64>> = Vec::with_capacity(self.t_max());
        for t in 0..self.t_max() {
            let (f, g) = self.design_at(t, &xi)?;
            xi.push(&f * theta + g);
        }
        Ok(xi)
    }
}

/// Conditional law of `(theta, xi_t)` given the realized strict prefix.
#[derive(Debug, Clone)]
pub struct ConditionalState {
    /// `E[theta | xi_{<t}] = F_{<t}^+ (xi_{<t} - g_{<t})`.
    pub theta_mean: DVector<f64>,
    /// `cov(theta | xi_{<t}) = I - F_{<t}^+ F_{<t}`, an orthogonal
    /// projection.
    pub theta_cov: DMatrix<f64>,
    /// `E[xi_t | xi_{<t}] = F_t E[theta | xi_{<t}] + g_t`.
    pub xi_mean: DVector<f64>,
    /// `cov(xi_t | xi_{<t}) = F_t (I - F_{<t}^+ F_{<t}) F_t^T`.
    pub xi_cov: DMatrix<f64>,
    /// `cov(theta, xi_t | xi_{<t}) = (I - F_{<t}^+ F_{<t}) F_t^T`.
    pub cross_cov: DMatrix<f64>,
}

fn stack_rows(blocks: &[DMatrix<f64>], cols: usize) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        out.view_mut((at, 0), (b.nrows(), b.ncols())).copy_from(b);
        at += b.nrows();
    }
    out
}

fn stack_vecs(blocks: &[DVector<f64>]) -> DVector<f64> {
    let len: usize = blocks.iter().map(|b| b.len()).sum();
    let mut out = DVector::zeros(len);
    let mut at = 0;
    for b in blocks {
        out.rows_mut(at, b.len()).copy_from(b);
        at += b.len();
    }
    out
}

/// Relative tolerance for deciding that a realization is reachable by the
/// system: the component of `xi - g` outside the column space of the stacked
/// design must stay below this fraction of its norm.
pub const REACHABILITY_TOLERANCE: f64 = 1e-8;

/// Walks an observed realization through the system and returns the per-step
/// conditional laws of `(theta, xi_t)` given `xi_{<t}`. Fails if the
/// realization is not reachable by any latent vector.
pub fn recursive_conditionals(
    sys: &AdaptedLinearSystem,
    xi: &[DVector<f64>],
) -> Result<Vec<ConditionalState>, ConditioningError> {
    if xi.len() != sys.t_max() {
        return Err(ConditioningError::DimensionMismatch(format!(
            "realization has {} steps, system has {}",
            xi.len(),
            sys.t_max()
        )));
    }
    let n = sys.n_latent();
    let mut f_blocks: Vec<DMatrix<f64>> = Vec::with_capacity(xi.len());
    let mut residual_blocks: Vec<DVector<f64>> = Vec::with_capacity(xi.len());
    let mut states = Vec::with_capacity(xi.len());

    for t in 0..xi.len() {
        let (f_t, g_t) = sys.design_at(t, &xi[..t])?;
        if xi[t].len() != f_t.nrows() {
            return Err(ConditioningError::DimensionMismatch(format!(
                "observation {t} has length {}, design produces {}",
                xi[t].len(),
                f_t.nrows()
            )));
        }

        let f_past = stack_rows(&f_blocks, n);
        let r_past = stack_vecs(&residual_blocks);
        let p = pinv(&f_past);
        let theta_mean = if t == 0 {
            DVector::zeros(n)
        } else {
            &p * &r_past
        };
        let theta_cov = DMatrix::identity(n, n) - &p * &f_past;
        let xi_mean = &f_t * &theta_mean + &g_t;
        let cross_cov = &theta_cov * f_t.transpose();
        let xi_cov = &f_t * &cross_cov;
        states.push(ConditionalState {
            theta_mean,
            theta_cov,
            xi_mean,
            xi_cov,
            cross_cov,
        });

        f_blocks.push(f_t);
        residual_blocks.push(&xi[t] - &g_t);

        let f_all = stack_rows(&f_blocks, n);
        let r_all = stack_vecs(&residual_blocks);
        let unreachable = &r_all - &f_all * (pinv(&f_all) * &r_all);
        if unreachable.norm() > REACHABILITY_TOLERANCE * r_all.norm() {
            return Err(ConditioningError::InconsistentRealization {
                step: t,
                relative_residual: unreachable.norm() / r_all.norm(),
            });
        }
    }
    Ok(states)
}

/// Conditional law of `theta` given the complete realization: mean
/// `F_{<=T}^+ (xi - g)` and covariance `I - F_{<=T}^+ F_{<=T}`.
pub fn posterior_after(
    sys: &AdaptedLinearSystem,
    xi: &[DVector<f64>],
) -> Result<GaussianLaw, ConditioningError> {
    if xi.len() != sys.t_max() {
        return Err(ConditioningError::DimensionMismatch(format!(
            "realization has {} steps, system has {}",
            xi.len(),
            sys.t_max()
        )));
    }
    let n = sys.n_latent();
    let mut f_blocks = Vec::with_capacity(xi.len());
    let mut residual_blocks = Vec::with_capacity(xi.len());
    for t in 0..xi.len() {
        let (f_t, g_t) = sys.design_at(t, &xi[..t])?;
        f_blocks.push(f_t);
        residual_blocks.push(&xi[t] - &g_t);
    }
    let f_all = stack_rows(&f_blocks, n);
    let r_all = stack_vecs(&residual_blocks);
    let p = pinv(&f_all);
    let unreachable = &r_all - &f_all * (&p * &r_all);
    if unreachable.norm() > REACHABILITY_TOLERANCE * r_all.norm() {
        return Err(ConditioningError::InconsistentRealization {
            step: xi.len() - 1,
            relative_residual: unreachable.norm() / r_all.norm(),
        });
    }
    Ok(GaussianLaw {
        mean: &p * r_all,
        cov: DMatrix::identity(n, n) - &p * f_all,
    })
}

/// Frobenius gap in the decomposition of the cumulative design projection:
/// the row-space projections of the past design and of the innovation block
/// `F_t (I - F_{<t}^+ F_{<t})` must add up to the projection of the combined
/// design.
pub fn projection_identity_gap(f_past: &DMatrix<f64>, f_t: &DMatrix<f64>) -> f64 {
    let n = f_past.ncols();
    let p_past = pinv(f_past) * f_past;
    let f_bar = f_t * (DMatrix::identity(n, n) - &p_past);
    let p_bar = pinv(&f_bar) * f_bar;
    let f_all = stack_rows(&[f_past.clone(), f_t.clone()], n);
    let p_all = pinv(&f_all) * f_all;
    (&p_past + &p_bar - p_all).norm()
}
