//! Self-contained checker battery: every bound and oracle the library
//! promises, exercised at configurable sizes with a pinned seed.
//!
//! The same battery backs the `verify` subcommand (reduced sizes, optional
//! fault injection) and the `oracle-suite` preset (sizes from the config,
//! results written as CSV).

use gfom::conditioning::{
    cond_gaussian, posterior_after, projection_identity_gap, recursive_conditionals,
    AdaptedLinearSystem,
};
use gfom::coupling::{build_coupling, verify_identity};
use gfom::diagnostics::{
    check_concentration, check_gram_concentration, check_iteration_stability,
    check_triangular_perturbation, error_report, expected_norm, ks_statistic,
    standard_normal_cdf, tail_frequency, ErrorReport,
};
use gfom::dynamics::eval_columns;
use gfom::linalg::{sample_gaussian_matrix, PsdOptions, SymMatrix, UpperTriMatrix};
use gfom::state_evolution::{
    amp_state_evolution, b_stein, gaussian_expectation, se_linear_closed_form, LinearCaseSpec,
};
use gfom::wasserstein::{
    ar_alpha_sq, lb_linear_case, linear_marginal_x, linear_marginal_y, w2_squared, GaussianLaw,
};
use gfom::{FunctionSpec, RngStream, ScalarMap};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::presets::{ar_drift, orthogonal_columns, tanh_chain};

/// One checked property: `passed` iff `statistic <= threshold`.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: &'static str,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

fn result(name: &'static str, statistic: f64, threshold: f64, detail: String) -> CheckResult {
    CheckResult {
        name,
        statistic,
        threshold,
        passed: statistic <= threshold,
        detail,
    }
}

fn broken(name: &'static str, err: String) -> CheckResult {
    CheckResult {
        name,
        statistic: f64::INFINITY,
        threshold: 0.0,
        passed: false,
        detail: format!("failed to run: {err}").replace(',', ";"),
    }
}

pub fn all_passed(results: &[CheckResult]) -> bool {
    results.iter().all(|r| r.passed)
}

pub fn render(results: &[CheckResult]) -> String {
    let mut out = String::new();
    for r in results {
        out.push_str(&format!(
            "{} {:<28} statistic {:>13.6e}  threshold {:>13.6e}  {}\n",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.statistic,
            r.threshold,
            r.detail
        ));
    }
    let passed = results.iter().filter(|r| r.passed).count();
    out.push_str(&format!("{passed}/{} checks passed\n", results.len()));
    out
}

/// Problem sizes for one battery run.
#[derive(Debug, Clone)]
pub struct CheckSizes {
    pub n: usize,
    pub t_max: usize,
    pub se_replicates: usize,
    pub tail_trials: usize,
    pub perturbation_cases: usize,
    pub stability_trials: usize,
    pub concentration_samples: usize,
    pub conditioning_instances: usize,
    pub stein_replicates: usize,
}

impl CheckSizes {
    /// Small enough for a routine pre-merge gate, large enough that every
    /// statistic is well inside its threshold at any seed.
    pub fn reduced() -> Self {
        CheckSizes {
            n: 200,
            t_max: 4,
            se_replicates: 600,
            tail_trials: 60,
            perturbation_cases: 200,
            stability_trials: 100,
            concentration_samples: 400,
            conditioning_instances: 20,
            stein_replicates: 600,
        }
    }

    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        CheckSizes {
            n: cfg.n_values[0],
            t_max: cfg.t_max.max(2),
            se_replicates: cfg.se_replicates,
            tail_trials: cfg.trials,
            perturbation_cases: (10 * cfg.trials).min(20_000),
            stability_trials: cfg.trials.min(1000),
            concentration_samples: (5 * cfg.trials).min(5000),
            conditioning_instances: cfg.trials.min(100),
            stein_replicates: cfg.se_replicates.min(2000),
        }
    }
}

/// Runs the full battery. `fault_inject` corrupts the small driver block of
/// one coupled run before the identity is checked; the check must then fail,
/// which is how the detector itself is tested.
pub fn run_checks(seed: u64, fault_inject: bool, sizes: &CheckSizes) -> Vec<CheckResult> {
    let mut out = Vec::new();
    out.extend(coupling_block(seed, fault_inject, sizes));
    out.push(tail_exceedance(seed, sizes));
    out.push(triangular_perturbation(seed, sizes));
    out.push(iteration_stability(seed, sizes));
    out.push(lipschitz_concentration(seed, sizes));
    out.push(gram_concentration(seed, sizes));
    out.push(two_point_closed_form());
    out.push(matched_two_point_diagonal());
    out.push(optimal_covariance_floor());
    out.push(conditioning_joint_assembly(seed, sizes));
    out.push(projection_identity(seed, sizes));
    out.extend(debias_cross_validation(seed, sizes));
    out
}

/// Identity residual, direction orthonormality, triangular-factor
/// consistency, and Gaussianity of the auxiliary columns, all on one
/// debiased tanh-chain run.
fn coupling_block(seed: u64, fault_inject: bool, sizes: &CheckSizes) -> Vec<CheckResult> {
    let names: [&'static str; 4] = [
        "coupling-identity",
        "direction-orthonormality",
        "triangular-factor",
        "auxiliary-gaussianity",
    ];
    let built = (|| {
        let (params, sys) = amp_state_evolution(
            sizes.n,
            tanh_chain(sizes.n, sizes.t_max),
            sizes.se_replicates,
            RngStream::new(seed, 0),
            &PsdOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        let mut run =
            build_coupling(&sys, &params, RngStream::new(seed, 1)).map_err(|e| e.to_string())?;
        if fault_inject {
            let mut block = run.a_prime.as_matrix().clone();
            block[(0, 1)] += 0.05;
            block[(1, 0)] += 0.05;
            run.a_prime = SymMatrix::from_matrix(block).map_err(|e| e.to_string())?;
        }
        Ok::<_, String>((sys, run))
    })();
    let (sys, run) = match built {
        Ok(v) => v,
        Err(e) => return names.iter().map(|n| broken(n, e.clone())).collect(),
    };

    let n = run.n as f64;
    let mut results = Vec::with_capacity(4);

    let residual = verify_identity(&run);
    results.push(result(
        names[0],
        residual,
        1e-8,
        format!("max residual over all step pairs; n={} T={}", run.n, run.t_max),
    ));

    let gram = run.q.transpose() * &run.q / n;
    let ortho = (0..run.t_max)
        .flat_map(|s| (0..run.t_max).map(move |t| (s, t)))
        .map(|(s, t)| (gram[(s, t)] - if s == t { 1.0 } else { 0.0 }).abs())
        .fold(0.0, f64::max);
    results.push(result(
        names[1],
        ortho,
        1e-10,
        "max |Q^T Q / n - I| entry".into(),
    ));

    let qr = match eval_columns(sys.f_specs(), &run.y) {
        Ok(f_y) => {
            let resid = (&f_y - &run.q * run.r.as_matrix()).norm() / f_y.norm().max(1e-300);
            result(names[2], resid, 1e-8, "relative ||F - Q R||".into())
        }
        Err(e) => broken(names[2], e.to_string()),
    };
    results.push(qr);

    let samples: Vec<f64> = run.z.iter().copied().collect();
    let ks = ks_statistic(&samples, standard_normal_cdf);
    let crit = 1.6276 / (samples.len() as f64).sqrt();
    results.push(result(
        names[3],
        ks,
        crit,
        format!("KS distance to the standard normal over {} entries", samples.len()),
    ));
    results
}

fn matched_ar_instance(
    n: usize,
    t_max: usize,
    lambda: f64,
) -> Result<(gfom::SystemSpec, gfom::state_evolution::SeParams, LinearCaseSpec), String> {
    let drift = ar_drift(t_max, lambda);
    let spec = LinearCaseSpec::new(orthogonal_columns(n, t_max), drift.clone(), drift)
        .map_err(|e| e.to_string())?;
    let params = se_linear_closed_form(&spec, &PsdOptions::default()).map_err(|e| e.to_string())?;
    let sys = spec.system().map_err(|e| e.to_string())?;
    Ok((sys, params, spec))
}

/// Exceedance frequency of the per-run error bound against its nominal
/// ceiling, on matched autoregressive trials.
fn tail_exceedance(seed: u64, sizes: &CheckSizes) -> CheckResult {
    const NAME: &str = "tail-exceedance";
    let (sys, params, _) = match matched_ar_instance(sizes.n, 3, 0.5) {
        Ok(v) => v,
        Err(e) => return broken(NAME, e),
    };
    let reports: Result<Vec<ErrorReport>, String> = (0..sizes.tail_trials)
        .into_par_iter()
        .map(|i| {
            let run = build_coupling(&sys, &params, RngStream::new(seed, 100 + i as u64))
                .map_err(|e| e.to_string())?;
            error_report(&run, &sys, &params, i as u64).map_err(|e| e.to_string())
        })
        .collect();
    let reports = match reports {
        Ok(v) => v,
        Err(e) => return broken(NAME, e),
    };
    let points = tail_frequency(&reports, &[1.0, 2.0]);
    let worst = points
        .iter()
        .map(|p| p.wilson_low - p.bound)
        .fold(f64::NEG_INFINITY, f64::max);
    result(
        NAME,
        worst,
        0.0,
        format!(
            "max over r of (interval low - ceiling); exceedances {:?} in {} trials",
            points.iter().map(|p| p.exceed).collect::<Vec<_>>(),
            sizes.tail_trials
        ),
    )
}

/// Operator-norm perturbation inequalities for triangular factors, on a mix
/// of near-identity and wild random factors.
fn triangular_perturbation(seed: u64, sizes: &CheckSizes) -> CheckResult {
    const NAME: &str = "triangular-perturbation";
    let mut violations = 0usize;
    for k in 0..sizes.perturbation_cases {
        let dim = 2 + (k % 5);
        let g = sample_gaussian_matrix(dim, dim, RngStream::new(seed, 200 + k as u64));
        let u = if k % 2 == 0 {
            UpperTriMatrix::from_upper_fn(dim, |i, j| {
                if i == j {
                    g[(i, j)].abs()
                } else {
                    g[(i, j)]
                }
            })
        } else {
            UpperTriMatrix::from_upper_fn(dim, |i, j| {
                let base = if i == j { 1.0 } else { 0.0 };
                let bump = 0.05 * g[(i, j)];
                if i == j {
                    (base + bump).abs()
                } else {
                    base + bump
                }
            })
        };
        if !check_triangular_perturbation(&u).holds() {
            violations += 1;
        }
    }
    result(
        NAME,
        violations as f64,
        0.0,
        format!("violations over {} random factors", sizes.perturbation_cases),
    )
}

/// Worst-case ratios of a controlled recursion against its stability bounds.
fn iteration_stability(seed: u64, sizes: &CheckSizes) -> CheckResult {
    const NAME: &str = "iteration-stability";
    let t_max = 4;
    let mut h = Vec::with_capacity(t_max);
    h.push(FunctionSpec::zero(50));
    for t in 1..t_max {
        h.push(FunctionSpec::separable(ScalarMap::Tanh, &[(t - 1, 0.9)]));
    }
    match check_iteration_stability(&h, 50, sizes.stability_trials, RngStream::new(seed, 300)) {
        Ok(check) => result(
            NAME,
            check.lipschitz_ratio.max(check.control_ratio),
            1.0 + 1e-12,
            format!("worst bound ratio over {} trials", check.trials),
        ),
        Err(e) => broken(NAME, e.to_string()),
    }
}

/// Tail of a 1-Lipschitz statistic of a Gaussian vector against `e^{-r}`.
fn lipschitz_concentration(seed: u64, sizes: &CheckSizes) -> CheckResult {
    const NAME: &str = "lipschitz-concentration";
    let dim = 400;
    let points = check_concentration(
        dim,
        1.0,
        expected_norm(dim),
        |z: &DVector<f64>| z.norm(),
        &[1.0, 2.0],
        sizes.concentration_samples,
        RngStream::new(seed, 400),
    );
    let worst = points
        .iter()
        .map(|p| p.wilson_low - p.bound)
        .fold(f64::NEG_INFINITY, f64::max);
    result(
        NAME,
        worst,
        0.0,
        format!(
            "norm statistic, {} samples, exceedances {:?}",
            sizes.concentration_samples,
            points.iter().map(|p| p.exceed).collect::<Vec<_>>()
        ),
    )
}

/// Tail of the Gram-matrix deviation of a thin Gaussian matrix.
fn gram_concentration(seed: u64, sizes: &CheckSizes) -> CheckResult {
    const NAME: &str = "gram-concentration";
    let samples = (sizes.concentration_samples / 2).max(50);
    let points = check_gram_concentration(300, 3, &[6.0, 9.0], samples, RngStream::new(seed, 500));
    let worst = points
        .iter()
        .map(|p| p.wilson_low - p.bound)
        .fold(f64::NEG_INFINITY, f64::max);
    result(
        NAME,
        worst,
        0.0,
        format!(
            "300x3 Gram deviation, {} samples, exceedances {:?}",
            samples,
            points.iter().map(|p| p.exceed).collect::<Vec<_>>()
        ),
    )
}

/// Closed-form two-point distances against the general Gaussian formula on
/// the assembled marginal laws.
fn two_point_closed_form() -> CheckResult {
    const NAME: &str = "two-point-closed-form";
    let n = 25;
    let t_max = 3;
    let f = DMatrix::from_fn(n, t_max, |i, t| 0.6 + ((i as f64) * (t as f64 + 1.3)).sin());
    let mut lambda = DMatrix::zeros(t_max, t_max);
    lambda[(0, 1)] = 0.4;
    lambda[(0, 2)] = 0.2;
    lambda[(1, 2)] = 0.3;
    let gamma = &lambda * 0.5;
    let spec = match LinearCaseSpec::new(f.clone(), lambda, gamma) {
        Ok(s) => s,
        Err(e) => return broken(NAME, e.to_string()),
    };
    let sigma = f.transpose() * &f * (1.3 / n as f64);
    let lb = match lb_linear_case(&spec, &sigma, n) {
        Ok(l) => l,
        Err(e) => return broken(NAME, e.to_string()),
    };
    let mut worst = 0.0f64;
    for t in 0..t_max {
        let direct = match w2_squared(
            &linear_marginal_x(&spec, n, t),
            &linear_marginal_y(&spec, &sigma, n, t),
        ) {
            Ok(d) => d,
            Err(e) => return broken(NAME, e.to_string()),
        };
        worst = worst.max((direct - lb.w2_sq_per_step[t]).abs());
    }
    result(NAME, worst, 1e-9, "max per-step gap to the general formula".into())
}

/// Matched autoregressive diagonal: per-step squared distance equals the
/// shrink factor times the geometric series, and the series itself is exact.
fn matched_two_point_diagonal() -> CheckResult {
    const NAME: &str = "matched-two-point-diagonal";
    let n = 500;
    let t_max = 4;
    let lambda = 0.5;
    let shrink = (2.0f64.sqrt() - 1.0).powi(2);
    let drift = ar_drift(t_max, lambda);
    let spec = match LinearCaseSpec::new(orthogonal_columns(n, t_max), drift.clone(), drift) {
        Ok(s) => s,
        Err(e) => return broken(NAME, e.to_string()),
    };
    let sigma = DMatrix::identity(t_max, t_max);
    let lb = match lb_linear_case(&spec, &sigma, n) {
        Ok(l) => l,
        Err(e) => return broken(NAME, e.to_string()),
    };
    let mut worst = 0.0f64;
    for t in 0..t_max {
        worst = worst.max((lb.w2_sq_per_step[t] - shrink * ar_alpha_sq(lambda, t + 1)).abs());
    }
    for t in 1..=5 {
        worst = worst.max((ar_alpha_sq(1.0, t) - t as f64).abs());
    }
    worst = worst.max((ar_alpha_sq(2.0, 3) - 21.0).abs());
    result(NAME, worst, 1e-12, "geometric-series diagonal and integer spot values".into())
}

/// The optimally scaled comparison covariance attains the per-step floor.
fn optimal_covariance_floor() -> CheckResult {
    const NAME: &str = "optimal-covariance-floor";
    let n = 300;
    let t_max = 3;
    let nf = n as f64;
    let shrink = 2.0f64.sqrt() - 1.0;
    let drift = ar_drift(t_max, 0.7);
    let spec = match LinearCaseSpec::new(orthogonal_columns(n, t_max), drift.clone(), drift) {
        Ok(s) => s,
        Err(e) => return broken(NAME, e.to_string()),
    };
    let scale = (1.0 + shrink / nf).powi(2);
    let sigma = DMatrix::<f64>::identity(t_max, t_max) * scale;
    let lb = match lb_linear_case(&spec, &sigma, n) {
        Ok(l) => l,
        Err(e) => return broken(NAME, e.to_string()),
    };
    let mut worst = 0.0f64;
    for t in 0..t_max {
        let floor = (nf - 1.0) / nf * shrink * shrink * lb.alpha[t] * lb.alpha[t];
        worst = worst.max((lb.w2_sq_per_step[t] - floor).abs());
    }
    worst = worst.max((lb.w2_sq_per_step.iter().sum::<f64>() - lb.lower_bound).abs());
    result(NAME, worst, 1e-10, "slack above the attainable floor".into())
}

fn symmetrized(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

/// Step-by-step latent conditionals against one-shot conditioning of the
/// assembled joint Gaussian, including rank-deficient designs.
fn conditioning_joint_assembly(seed: u64, sizes: &CheckSizes) -> CheckResult {
    const NAME: &str = "conditioning-joint-assembly";
    let mut worst = 0.0f64;
    for k in 0..sizes.conditioning_instances {
        let n_latent = 2 + (k % 4);
        let t_max = 1 + (k % 3);
        let rows = 1 + (k % 2);
        let mut designs = Vec::with_capacity(t_max);
        for t in 0..t_max {
            let mut f = sample_gaussian_matrix(
                rows,
                n_latent,
                RngStream::new(seed, 600 + (k * 8 + t) as u64),
            );
            if rows == 2 && k % 3 == 0 {
                let first = f.row(0).into_owned();
                f.set_row(1, &first);
            }
            let g = sample_gaussian_matrix(rows, 1, RngStream::new(seed, 900 + (k * 8 + t) as u64));
            designs.push((f, DVector::from_column_slice(g.as_slice())));
        }
        let run = (|| {
            let sys = AdaptedLinearSystem::fixed(n_latent, designs.clone())
                .map_err(|e| e.to_string())?;
            let theta_mat =
                sample_gaussian_matrix(n_latent, 1, RngStream::new(seed, 1200 + k as u64));
            let theta = DVector::from_column_slice(theta_mat.as_slice());
            let xi = sys.simulate(&theta).map_err(|e| e.to_string())?;
            let states = recursive_conditionals(&sys, &xi).map_err(|e| e.to_string())?;

            let mut gap = 0.0f64;
            for t in 1..=t_max {
                let stacked_rows = rows * t;
                let mut f_stack = DMatrix::zeros(stacked_rows, n_latent);
                let mut g_stack = DVector::zeros(stacked_rows);
                let mut xi_stack = DVector::zeros(stacked_rows);
                for s in 0..t {
                    f_stack
                        .view_mut((s * rows, 0), (rows, n_latent))
                        .copy_from(&designs[s].0);
                    g_stack.rows_mut(s * rows, rows).copy_from(&designs[s].1);
                    xi_stack.rows_mut(s * rows, rows).copy_from(&xi[s]);
                }
                let dim = n_latent + stacked_rows;
                let mut cov = DMatrix::zeros(dim, dim);
                cov.view_mut((0, 0), (n_latent, n_latent))
                    .copy_from(&DMatrix::identity(n_latent, n_latent));
                cov.view_mut((0, n_latent), (n_latent, stacked_rows))
                    .copy_from(&f_stack.transpose());
                cov.view_mut((n_latent, 0), (stacked_rows, n_latent))
                    .copy_from(&f_stack);
                cov.view_mut((n_latent, n_latent), (stacked_rows, stacked_rows))
                    .copy_from(&symmetrized(&f_stack * f_stack.transpose()));
                let mut mean = DVector::zeros(dim);
                mean.rows_mut(n_latent, stacked_rows).copy_from(&g_stack);

                let joint = GaussianLaw::new(mean, cov).map_err(|e| e.to_string())?;
                let cond = cond_gaussian(&joint, n_latent).map_err(|e| e.to_string())?;
                let law = cond.law_at(&xi_stack);

                if let Some(state) = states.get(t) {
                    gap = gap.max((&law.mean - &state.theta_mean).norm());
                    gap = gap.max((&law.cov - &state.theta_cov).norm());
                } else {
                    let post = posterior_after(&sys, &xi).map_err(|e| e.to_string())?;
                    gap = gap.max((&law.mean - &post.mean).norm());
                    gap = gap.max((&law.cov - &post.cov).norm());
                }
            }
            Ok::<f64, String>(gap)
        })();
        match run {
            Ok(gap) => worst = worst.max(gap),
            Err(e) => return broken(NAME, e),
        }
    }
    result(
        NAME,
        worst,
        1e-10,
        format!("max deviation over {} instances", sizes.conditioning_instances),
    )
}

/// Pythagoras for stacked pseudo-inverse projections, including designs
/// whose new block is partly or exactly inside the span of the old one.
fn projection_identity(seed: u64, sizes: &CheckSizes) -> CheckResult {
    const NAME: &str = "projection-identity";
    let mut worst = 0.0f64;
    for k in 0..sizes.conditioning_instances {
        if k % 4 == 0 {
            // Rank-deficient innovation with an exactly representable span:
            // an axis-aligned past design, one new row that is an exact
            // combination of it, and one fresh row keeping the innovation
            // block at unit scale so its numerical rank is unambiguous.
            let mut f_past = DMatrix::zeros(2, 5);
            f_past[(0, 0)] = 2.0;
            f_past[(1, 1)] = 0.5;
            let fresh = sample_gaussian_matrix(1, 5, RngStream::new(seed, 1800 + k as u64));
            let mut f_t = DMatrix::zeros(2, 5);
            f_t[(0, 0)] = 3.0;
            f_t[(0, 1)] = -1.0;
            f_t.row_mut(1).copy_from(&fresh.row(0));
            worst = worst.max(projection_identity_gap(&f_past, &f_t));
        } else {
            // General position: strictly fewer past rows than coordinates,
            // so the residual space never degenerates to rounding noise.
            let n_latent = 4 + (k % 3);
            let past_rows = 1 + (k % 3);
            let new_rows = 1 + (k % 2);
            let f_past = sample_gaussian_matrix(
                past_rows,
                n_latent,
                RngStream::new(seed, 1500 + k as u64),
            );
            let f_t = sample_gaussian_matrix(
                new_rows,
                n_latent,
                RngStream::new(seed, 1800 + k as u64),
            );
            worst = worst.max(projection_identity_gap(&f_past, &f_t));
        }
    }
    result(
        NAME,
        worst,
        1e-10,
        format!("max gap over {} instances", sizes.conditioning_instances),
    )
}

/// Moment-form debiasing coefficients against the derivative form, and the
/// first coefficient of the tanh chain against deterministic quadrature.
fn debias_cross_validation(seed: u64, sizes: &CheckSizes) -> Vec<CheckResult> {
    const NAME_CROSS: &str = "debias-cross-validation";
    const NAME_QUAD: &str = "debias-quadrature-anchor";
    let n = 300;
    let t_max = 3;
    let built = (|| {
        let (params, sys) = amp_state_evolution(
            n,
            tanh_chain(n, t_max),
            sizes.se_replicates.max(600),
            RngStream::new(seed, 2000),
            &PsdOptions::default(),
        )
        .map_err(|e| e.to_string())?;
        let est = b_stein(
            &sys,
            &params,
            sizes.stein_replicates.max(400),
            2,
            RngStream::new(seed, 2100),
        )
        .map_err(|e| e.to_string())?;
        Ok::<_, String>((params, est))
    })();
    let (params, est) = match built {
        Ok(v) => v,
        Err(e) => return vec![broken(NAME_CROSS, e.clone()), broken(NAME_QUAD, e)],
    };

    let mc = params.mc.as_ref().expect("Monte Carlo parameters carry meta");
    let mut standardized = 0.0f64;
    for t in 0..t_max {
        for s in 0..t {
            let se = (mc.b_stderr[(s, t)].powi(2) + est.stderr[(s, t)].powi(2))
                .sqrt()
                .max(1e-12);
            standardized = standardized.max((params.b[(s, t)] - est.b[(s, t)]).abs() / se);
        }
    }
    let cross = result(
        NAME_CROSS,
        standardized,
        3.0,
        "max standardized gap between the two coefficient estimators".into(),
    );

    let quad = gaussian_expectation(|x| 1.0 - x.tanh().powi(2), 0.0, 1.0, 128);
    let anchor = 0.6057055096021588;
    let se01 = mc.b_stderr[(0, 1)].max(1e-12);
    let stat = if (quad - anchor).abs() > 1e-9 {
        f64::INFINITY
    } else {
        (params.b[(0, 1)] - quad).abs() / se01
    };
    let quad_check = result(
        NAME_QUAD,
        stat,
        3.0,
        format!("quadrature value {quad:.16}; estimate standardized against it"),
    );
    vec![cross, quad_check]
}
