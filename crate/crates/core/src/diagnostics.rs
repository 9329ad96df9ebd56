//! Error reports, tail bounds, and empirical concentration checks.
//!
//! The quantities here quantify how far a coupled pair of trajectories can
//! drift apart. Per-run reports carry the realized coupling error together
//! with the data-dependent terms of its high-probability bound; aggregate
//! helpers turn a batch of reports into exceedance frequencies with score
//! intervals. The `check_*` functions are self-contained Monte Carlo
//! verdicts on the individual inequalities the bound is assembled from
//! (triangular factor perturbation, iteration stability, scalar and Gram
//! matrix concentration), usable as randomized self-tests at any scale.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::coupling::CoupledRun;
use crate::dynamics::{eval_columns, run_comparison, DynamicsError, FunctionSpec, SystemSpec, Trajectory};
use crate::linalg::{
    cond_sqrt_psd, operator_norm, pinv, sample_gaussian_matrix, sym_operator_norm, UpperTriMatrix,
};
use crate::rng::RngStream;
use crate::state_evolution::SeParams;

/// Two-sided 99% score-interval quantile.
pub const WILSON_Z99: f64 = 2.5758293035489;

/// Sample alignment statistics of a comparison trajectory: `b_n` is the
/// cross-covariance of the noise against the evaluation columns (whitened by
/// the target covariance), `s_n` the whitened Gram matrix of the evaluation
/// columns. At a matched fixpoint both concentrate, `b_n` on the debiasing
/// coefficients and `s_n` on the identity.
#[derive(Debug, Clone)]
pub struct MatchStatistics {
    pub b_n: DMatrix<f64>,
    pub s_n: DMatrix<f64>,
}

fn whitened_gram(omega: &UpperTriMatrix, gram: &DMatrix<f64>) -> DMatrix<f64> {
    omega.inv_congruence(gram).unwrap_or_else(|| {
        let p = pinv(omega.as_matrix());
        p.transpose() * gram * p
    })
}

pub fn match_statistics(
    run: &CoupledRun,
    sys: &SystemSpec,
    params: &SeParams,
) -> Result<MatchStatistics, DynamicsError> {
    let n = run.n as f64;
    let f = eval_columns(sys.f_specs(), &run.y)?;
    let m = eval_columns(&params.m, &run.y)?;
    let w = run.y.as_matrix() - &m;
    let b_n = pinv(&params.sigma) * (w.transpose() * &f) / n;
    let s_n = whitened_gram(&params.omega, &(f.transpose() * &f / n));
    Ok(MatchStatistics { b_n, s_n })
}

/// Realized coupling error of one run together with everything needed to
/// evaluate its high-probability bound.
#[derive(Debug, Clone)]
pub struct ErrorReport {
    pub trial: u64,
    pub n: usize,
    pub t_max: usize,
    /// `||x_t - y_t||` per step.
    pub per_step: Vec<f64>,
    /// `||X - Y||` over the whole horizon.
    pub total: f64,
    /// `||X|| / sqrt(n)`, the natural scale of the trajectories.
    pub x_norm_over_sqrt_n: f64,
    /// Mean mismatch term of the bound (zero in expectation at a matched
    /// fixpoint, order one otherwise).
    pub delta1: f64,
    /// Covariance mismatch term, `52 log2(4T) sqrt(n) |||s_n - I|||`.
    pub delta2: f64,
    /// Column-norm sum of the covariance factor.
    pub omega_21: f64,
    pub lf: f64,
    pub lg: f64,
    pub fallbacks: usize,
}

impl ErrorReport {
    /// Data-dependent bound on `||X - Y||` that holds with probability at
    /// least `1 - 3 e^{-r}` for every `0 <= r <= n`:
    ///
    /// ```text
    /// (1 + 4 Lf + Lg)^{T-1} (delta1 + delta2 + 2 sqrt(T) + sqrt(2r)) ||Omega||_{2,1}
    /// ```
    pub fn tail_bound(&self, r: f64) -> f64 {
        let growth = (1.0 + 4.0 * self.lf + self.lg).powi(self.t_max as i32 - 1);
        let sqrt_t = (self.t_max as f64).sqrt();
        growth * (self.delta1 + self.delta2 + 2.0 * sqrt_t + (2.0 * r).sqrt()) * self.omega_21
    }
}

pub fn error_report(
    run: &CoupledRun,
    sys: &SystemSpec,
    params: &SeParams,
    trial: u64,
) -> Result<ErrorReport, DynamicsError> {
    let n = run.n;
    let t_max = run.t_max;
    let stats = match_statistics(run, sys, params)?;
    let f = eval_columns(sys.f_specs(), &run.y)?;
    let m = eval_columns(&params.m, &run.y)?;
    let g = eval_columns(sys.g_specs(), &run.y)?;
    let omega_21 = params.omega.norm_2_1();

    let residual = &m - &g - &f * &stats.b_n;
    let delta1 = crate::linalg::norm_2_1(&residual) / omega_21;
    let mut dev = stats.s_n.clone();
    for i in 0..t_max {
        dev[(i, i)] -= 1.0;
    }
    let delta2 =
        52.0 * (4.0 * t_max as f64).log2() * (n as f64).sqrt() * sym_operator_norm(&dev);

    let per_step: Vec<f64> = (0..t_max)
        .map(|t| (run.x.col(t) - run.y.col(t)).norm())
        .collect();
    let total = per_step.iter().map(|d| d * d).sum::<f64>().sqrt();

    Ok(ErrorReport {
        trial,
        n,
        t_max,
        per_step,
        total,
        x_norm_over_sqrt_n: run.x.as_matrix().norm() / (n as f64).sqrt(),
        delta1,
        delta2,
        omega_21,
        lf: sys.max_f_lipschitz(),
        lg: sys.max_g_lipschitz(),
        fallbacks: run.fallback_log.len(),
    })
}

/// Population-level mismatch terms, estimated by Monte Carlo over fresh
/// comparison trajectories (no coupling matrix involved).
#[derive(Debug, Clone)]
pub struct PsiEstimate {
    /// Mean normalized mean-mismatch `E ||M - G - F B|| / ||Omega||_{2,1}`.
    pub psi1: f64,
    pub psi1_stderr: f64,
    /// Covariance mismatch `sqrt(n) |||S - I|||` of the whitened mean Gram
    /// matrix.
    pub psi2: f64,
    /// Estimated alignment coefficients.
    pub b_bar: DMatrix<f64>,
    /// Estimated whitened Gram matrix.
    pub s_bar: DMatrix<f64>,
    pub replicates: usize,
}

/// Estimates the population mismatch terms for `(sys, params)`. Runs two
/// passes over the same replicate streams: the first averages the alignment
/// statistics, the second scores the mean residual against that average.
///
/// The plug-in alignment matrix carries Monte Carlo noise of order
/// `1/sqrt(replicates)`, which props up the first mismatch term even when
/// its population value is zero. When the alignment coefficients are known
/// (at a matched fixpoint they equal the debiasing matrix), use
/// [`psi_terms_with_alignment`] to remove that floor.
pub fn psi_terms(
    sys: &SystemSpec,
    params: &SeParams,
    replicates: usize,
    stream: RngStream,
) -> Result<PsiEstimate, DynamicsError> {
    psi_terms_inner(sys, params, None, replicates, stream)
}

/// [`psi_terms`] with externally supplied alignment coefficients instead of
/// the plug-in estimate.
pub fn psi_terms_with_alignment(
    sys: &SystemSpec,
    params: &SeParams,
    alignment: &DMatrix<f64>,
    replicates: usize,
    stream: RngStream,
) -> Result<PsiEstimate, DynamicsError> {
    psi_terms_inner(sys, params, Some(alignment), replicates, stream)
}

fn psi_terms_inner(
    sys: &SystemSpec,
    params: &SeParams,
    alignment: Option<&DMatrix<f64>>,
    replicates: usize,
    stream: RngStream,
) -> Result<PsiEstimate, DynamicsError> {
    let n = params.n;
    let t_max = params.t_max;
    let omega_21 = params.omega.norm_2_1();

    let replicate_y = |k: usize| -> Result<Trajectory, DynamicsError> {
        let z = sample_gaussian_matrix(n, t_max, stream.substream(k as u64));
        let (y, _) = run_comparison(&params.m, &params.omega, &z)?;
        Ok(y)
    };

    type MomentPair = (DMatrix<f64>, DMatrix<f64>);
    let first: Result<Vec<MomentPair>, DynamicsError> = (0..replicates)
        .into_par_iter()
        .map(|k| {
            let y = replicate_y(k)?;
            let f = eval_columns(sys.f_specs(), &y)?;
            let m = eval_columns(&params.m, &y)?;
            let w = y.as_matrix() - &m;
            Ok((w.transpose() * &f / n as f64, f.transpose() * &f / n as f64))
        })
        .collect();
    let first = first?;
    let mut wf_bar = DMatrix::zeros(t_max, t_max);
    let mut ff_bar = DMatrix::zeros(t_max, t_max);
    for (wf, ff) in &first {
        wf_bar += wf;
        ff_bar += ff;
    }
    wf_bar /= replicates as f64;
    ff_bar /= replicates as f64;
    let b_bar = match alignment {
        Some(b) => b.clone(),
        None => pinv(&params.sigma) * wf_bar,
    };
    let s_bar = whitened_gram(&params.omega, &ff_bar);

    let second: Result<Vec<f64>, DynamicsError> = (0..replicates)
        .into_par_iter()
        .map(|k| {
            let y = replicate_y(k)?;
            let f = eval_columns(sys.f_specs(), &y)?;
            let m = eval_columns(&params.m, &y)?;
            let g = eval_columns(sys.g_specs(), &y)?;
            let residual = &m - &g - &f * &b_bar;
            Ok(crate::linalg::norm_2_1(&residual) / omega_21)
        })
        .collect();
    let vals = second?;
    let psi1 = vals.iter().sum::<f64>() / replicates as f64;
    let var = vals.iter().map(|v| (v - psi1).powi(2)).sum::<f64>()
        / (replicates.max(2) - 1) as f64;
    let psi1_stderr = (var / replicates as f64).sqrt();

    let mut dev = s_bar.clone();
    for i in 0..t_max {
        dev[(i, i)] -= 1.0;
    }
    let psi2 = (n as f64).sqrt() * sym_operator_norm(&dev);

    Ok(PsiEstimate {
        psi1,
        psi1_stderr,
        psi2,
        b_bar,
        s_bar,
        replicates,
    })
}

/// Compound stability constant of the full comparison recursion:
///
/// ```text
/// L = log2(2T) + sqrt(T) (Lf + Lg + Lm) (1 + Lm)^{T-1} kappa(Sigma)^{1/2}
/// ```
pub fn composite_lipschitz(t_max: usize, lf: f64, lg: f64, lm: f64, sigma: &DMatrix<f64>) -> f64 {
    (2.0 * t_max as f64).log2()
        + (t_max as f64).sqrt()
            * (lf + lg + lm)
            * (1.0 + lm).powi(t_max as i32 - 1)
            * cond_sqrt_psd(sigma)
}

/// Population bound on `||X - Y||` with the universal constant set to one,
/// holding with probability at least `1 - 5 e^{-r}`; useful for qualitative
/// comparisons across parameter settings rather than as a certified value.
pub fn population_tail_bound(sys: &SystemSpec, params: &SeParams, psi: &PsiEstimate, r: f64) -> f64 {
    let t_max = params.t_max as f64;
    let lf = sys.max_f_lipschitz();
    let lg = sys.max_g_lipschitz();
    let lm = params.m.iter().map(|m| m.lipschitz()).fold(0.0, f64::max);
    let l = composite_lipschitz(params.t_max, lf, lg, lm, &params.sigma);
    (1.0 + 4.0 * lf + lg).powi(params.t_max as i32 - 1)
        * (psi.psi1 + l * psi.psi2 + l.powi(3) * (t_max.sqrt() + r.sqrt()))
        * params.omega.norm_2_1()
}

/// Exceedance of the per-run bound at one tail parameter, with a score
/// interval around the observed frequency.
#[derive(Debug, Clone)]
pub struct TailPoint {
    pub r: f64,
    /// Nominal ceiling `3 e^{-r}` on the exceedance probability.
    pub bound: f64,
    pub observed: f64,
    pub exceed: usize,
    pub trials: usize,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

impl TailPoint {
    /// Whether the observed frequency is statistically consistent with the
    /// nominal ceiling (the lower interval end does not exceed it).
    pub fn consistent(&self) -> bool {
        self.wilson_low <= self.bound
    }
}

/// Frequency with which realized errors exceeded their own per-run bound,
/// for each tail parameter in `r_values`.
pub fn tail_frequency(reports: &[ErrorReport], r_values: &[f64]) -> Vec<TailPoint> {
    r_values
        .iter()
        .map(|&r| {
            let exceed = reports
                .iter()
                .filter(|rep| rep.total > rep.tail_bound(r))
                .count();
            let trials = reports.len();
            let observed = exceed as f64 / trials.max(1) as f64;
            let (wilson_low, wilson_high) = wilson_interval(exceed, trials, WILSON_Z99);
            TailPoint {
                r,
                bound: 3.0 * (-r).exp(),
                observed,
                exceed,
                trials,
                wilson_low,
                wilson_high,
            }
        })
        .collect()
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_interval(successes: usize, trials: usize, z: f64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let center = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0), (center + half).min(1.0))
}

/// Standard normal distribution function.
pub fn standard_normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Kolmogorov-Smirnov statistic of `samples` against the distribution
/// function `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let m = sorted.len() as f64;
    let mut d = 0.0_f64;
    for (i, &x) in sorted.iter().enumerate() {
        let c = cdf(x);
        d = d.max((c - i as f64 / m).abs());
        d = d.max((c - (i as f64 + 1.0) / m).abs());
    }
    d
}

/// Mean Euclidean norm of a standard Gaussian vector in the given dimension,
/// `sqrt(2) Gamma((d+1)/2) / Gamma(d/2)`.
pub fn expected_norm(dim: usize) -> f64 {
    let d = dim as f64;
    (0.5 * std::f64::consts::LN_2 + ln_gamma((d + 1.0) / 2.0) - ln_gamma(d / 2.0)).exp()
}

/// Both perturbation inequalities for a triangular factor `U` against its
/// Gram matrix:
///
/// ```text
/// |||U - I|||   <= 2 log2(4T) |||U^T U - I|||
/// |||U - I|||^2 <= 9 log2(4T) |||U^T U - I|||
/// ```
#[derive(Debug, Clone)]
pub struct PerturbationCheck {
    pub lhs: f64,
    pub gram_deviation: f64,
    pub rhs_linear: f64,
    pub rhs_squared: f64,
}

impl PerturbationCheck {
    pub fn holds(&self) -> bool {
        self.lhs <= self.rhs_linear && self.lhs * self.lhs <= self.rhs_squared
    }
}

pub fn check_triangular_perturbation(u: &UpperTriMatrix) -> PerturbationCheck {
    let t = u.dim();
    let log_term = (4.0 * t as f64).log2();
    let dev = u.as_matrix() - DMatrix::identity(t, t);
    let gram_dev = u.as_matrix().transpose() * u.as_matrix() - DMatrix::identity(t, t);
    let lhs = operator_norm(&dev);
    let gram_deviation = sym_operator_norm(&gram_dev);
    PerturbationCheck {
        lhs,
        gram_deviation,
        rhs_linear: 2.0 * log_term * gram_deviation,
        rhs_squared: 9.0 * log_term * gram_deviation,
    }
}

/// Worst observed ratios of realized deviation to the stability bounds of a
/// controlled recursion `v_t = h_t(v_{<t}) + u_t`:
///
/// * `lipschitz_ratio` compares `||V - V'||` against
///   `sqrt(T) (1 + L)^{T-1} ||U - U'||` for two control sequences;
/// * `control_ratio` compares `||X - V||`, with `X` the zero-control orbit,
///   against `(1 + L)^{T-1} sum_t ||u_t||`.
///
/// Both stay at or below one when the step maps have Lipschitz constant at
/// most `L`.
#[derive(Debug, Clone)]
pub struct StabilityCheck {
    pub lipschitz_ratio: f64,
    pub control_ratio: f64,
    pub trials: usize,
}

impl StabilityCheck {
    pub fn holds(&self) -> bool {
        self.lipschitz_ratio <= 1.0 + 1e-12 && self.control_ratio <= 1.0 + 1e-12
    }
}

fn run_controlled(
    h: &[FunctionSpec],
    n: usize,
    u: &DMatrix<f64>,
) -> Result<Trajectory, DynamicsError> {
    let mut v = Trajectory::new(n);
    for (t, h_t) in h.iter().enumerate() {
        let mut v_t = h_t.eval(v.cols(), n)?;
        v_t += &u.column(t);
        v.push(v_t);
    }
    Ok(v)
}

pub fn check_iteration_stability(
    h: &[FunctionSpec],
    n: usize,
    trials: usize,
    stream: RngStream,
) -> Result<StabilityCheck, DynamicsError> {
    let t_max = h.len();
    let l = h.iter().map(|s| s.lipschitz()).fold(0.0, f64::max);
    let growth = (1.0 + l).powi(t_max as i32 - 1);
    let zero_orbit = run_controlled(h, n, &DMatrix::zeros(n, t_max))?;

    let mut lipschitz_ratio = 0.0_f64;
    let mut control_ratio = 0.0_f64;
    for k in 0..trials {
        let u = sample_gaussian_matrix(n, t_max, stream.substream(2 * k as u64));
        let u_alt = sample_gaussian_matrix(n, t_max, stream.substream(2 * k as u64 + 1));
        let v = run_controlled(h, n, &u)?;
        let v_alt = run_controlled(h, n, &u_alt)?;

        let dv = (v.as_matrix() - v_alt.as_matrix()).norm();
        let du = (&u - &u_alt).norm();
        lipschitz_ratio = lipschitz_ratio.max(dv / ((t_max as f64).sqrt() * growth * du));

        let dx = (zero_orbit.as_matrix() - v.as_matrix()).norm();
        let control_sum: f64 = (0..t_max).map(|t| u.column(t).norm()).sum();
        control_ratio = control_ratio.max(dx / (growth * control_sum));
    }
    Ok(StabilityCheck {
        lipschitz_ratio,
        control_ratio,
        trials,
    })
}

/// Observed exceedance of a concentration inequality at one tail parameter.
#[derive(Debug, Clone)]
pub struct ConcentrationPoint {
    pub r: f64,
    /// Nominal ceiling on the exceedance probability.
    pub bound: f64,
    pub observed: f64,
    pub exceed: usize,
    pub trials: usize,
    pub wilson_low: f64,
    pub wilson_high: f64,
}

impl ConcentrationPoint {
    pub fn consistent(&self) -> bool {
        self.wilson_low <= self.bound
    }
}

fn exceedance_points(
    values: &[f64],
    threshold: impl Fn(f64) -> f64,
    bound: impl Fn(f64) -> f64,
    r_values: &[f64],
) -> Vec<ConcentrationPoint> {
    r_values
        .iter()
        .map(|&r| {
            let cut = threshold(r);
            let exceed = values.iter().filter(|&&v| v >= cut).count();
            let trials = values.len();
            let observed = exceed as f64 / trials.max(1) as f64;
            let (wilson_low, wilson_high) = wilson_interval(exceed, trials, WILSON_Z99);
            ConcentrationPoint {
                r,
                bound: bound(r),
                observed,
                exceed,
                trials,
                wilson_low,
                wilson_high,
            }
        })
        .collect()
}

/// Tail check for an `L`-Lipschitz scalar statistic of a standard Gaussian
/// vector: the frequency of `f(z) >= mean + L sqrt(2r)` is compared against
/// the ceiling `e^{-r}`.
pub fn check_concentration(
    dim: usize,
    lipschitz: f64,
    mean: f64,
    f: impl Fn(&DVector<f64>) -> f64 + Sync,
    r_values: &[f64],
    samples: usize,
    stream: RngStream,
) -> Vec<ConcentrationPoint> {
    let values: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let z = sample_gaussian_matrix(dim, 1, stream.substream(k as u64));
            f(&DVector::from_column_slice(z.as_slice()))
        })
        .collect();
    exceedance_points(
        &values,
        |r| mean + lipschitz * (2.0 * r).sqrt(),
        |r| (-r).exp(),
        r_values,
    )
}

/// Gram deviation threshold `4 sqrt(|||E H^T H|||) L sqrt(2r) + 2 L^2 (2r + 1)`.
pub fn gram_threshold(expected_gram_norm: f64, lipschitz: f64, r: f64) -> f64 {
    4.0 * expected_gram_norm.sqrt() * lipschitz * (2.0 * r).sqrt()
        + 2.0 * lipschitz * lipschitz * (2.0 * r + 1.0)
}

/// Tail check for the Gram matrix of a Gaussian `rows x dim` matrix: the
/// frequency of `|||H^T H - n I||| >= gram_threshold(n, 1, r)` is compared
/// against the ceiling `min(1, 2 * 9^dim * e^{-r})`.
pub fn check_gram_concentration(
    rows: usize,
    dim: usize,
    r_values: &[f64],
    samples: usize,
    stream: RngStream,
) -> Vec<ConcentrationPoint> {
    let expected = DMatrix::identity(dim, dim) * rows as f64;
    let values: Vec<f64> = (0..samples)
        .into_par_iter()
        .map(|k| {
            let h = sample_gaussian_matrix(rows, dim, stream.substream(k as u64));
            sym_operator_norm(&(h.transpose() * &h - &expected))
        })
        .collect();
    exceedance_points(
        &values,
        |r| gram_threshold(rows as f64, 1.0, r),
        |r| (2.0 * 9.0_f64.powi(dim as i32) * (-r).exp()).min(1.0),
        r_values,
    )
}
