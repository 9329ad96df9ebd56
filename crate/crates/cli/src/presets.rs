//! Shipped experiment presets and the system builders behind them.

use gfom::dynamics::{amp_from_f, DynamicsError, ScalarMap};
use gfom::linalg::{cholesky_upper, PsdOptions};
use gfom::state_evolution::{
    amp_state_evolution, se_linear_closed_form, LinearCaseSpec, SeError, SeParams,
};
use gfom::{FunctionSpec, RngStream, SystemSpec};
use nalgebra::DMatrix;
use thiserror::Error;

use crate::config::{ExperimentConfig, SystemFamily};

pub const PRESET_NAMES: [&str; 5] = [
    "matched-amp-tanh",
    "mismatch-sweep",
    "linear-ar",
    "tail-check",
    "oracle-suite",
];

/// Key/value overlay for a named preset, or `None` if the name is unknown.
/// `seed` is intentionally absent: every run must pin one explicitly.
pub fn preset(name: &str) -> Option<Vec<(&'static str, String)>> {
    let kv: Vec<(&'static str, &str)> = match name {
        // Dimension-free coupling error of the debiased tanh chain: the
        // realized ||X - Y|| medians should be flat across n while ||X||
        // grows like sqrt(n).
        "matched-amp-tanh" => vec![
            ("mode", "coupling"),
            ("system", "tanh-amp"),
            ("t_max", "4"),
            ("n", "250,1000,4000"),
            ("trials", "100"),
            ("se_source", "monte-carlo"),
            ("se_replicates", "4000"),
            ("psi_replicates", "400"),
            ("r_grid", "1,2,3"),
            ("sigma_scale", "1.0"),
        ],
        // Deliberately mis-scaled comparison covariance on the orthogonal
        // family: psi2 = sqrt(n) |1/scale - 1| exactly, and the per-run
        // covariance mismatch term reacts the same way.
        "mismatch-sweep" => vec![
            ("mode", "coupling"),
            ("system", "orthogonal"),
            ("t_max", "3"),
            ("n", "500"),
            ("trials", "100"),
            ("se_source", "closed-form"),
            ("psi_replicates", "400"),
            ("r_grid", "1,2,3"),
            ("sigma_scale", "0.5,1.0,2.0"),
        ],
        // Autoregressive linear case with exact two-point distances: the
        // wasserstein table reproduces the geometric-series diagonal.
        "linear-ar" => vec![
            ("mode", "coupling"),
            ("system", "linear-ar"),
            ("lambda", "0.5"),
            ("t_max", "4"),
            ("n", "500"),
            ("trials", "200"),
            ("se_source", "closed-form"),
            ("r_grid", "1,2,3"),
            ("sigma_scale", "1.0"),
        ],
        // Exceedance of the per-run error bound against its nominal ceiling
        // 3 e^{-r}.
        "tail-check" => vec![
            ("mode", "coupling"),
            ("system", "linear-ar"),
            ("lambda", "0.5"),
            ("t_max", "3"),
            ("n", "500"),
            ("trials", "500"),
            ("se_source", "closed-form"),
            ("r_grid", "1,2,3"),
            ("sigma_scale", "1.0"),
        ],
        // Checker battery (identity, perturbation, stability, concentration,
        // conditioning, two-point distances) written as a CSV report.
        "oracle-suite" => vec![
            ("mode", "oracle"),
            ("system", "linear-ar"),
            ("t_max", "3"),
            ("n", "400"),
            ("trials", "200"),
            ("se_source", "closed-form"),
            ("r_grid", "1,2,3"),
        ],
        _ => return None,
    };
    Some(kv.into_iter().map(|(k, v)| (k, v.to_string())).collect())
}

#[derive(Debug, Error)]
pub enum BuildError {
    #[error("state evolution failed: {0}")]
    Se(#[from] SeError),
    #[error("system construction failed: {0}")]
    Dynamics(#[from] DynamicsError),
}

/// A system together with the comparison parameters it will be coupled to.
pub struct Instance {
    pub sys: SystemSpec,
    pub params: SeParams,
    /// Present for the linear families; drives the two-point distance table.
    pub linear: Option<LinearCaseSpec>,
}

/// The tanh chain: a constant first direction followed by coordinatewise
/// tanh of the previous iterate.
pub fn tanh_chain(n: usize, t_max: usize) -> Vec<FunctionSpec> {
    let mut f = Vec::with_capacity(t_max);
    f.push(FunctionSpec::constant(nalgebra::DVector::from_element(n, 1.0)));
    for t in 1..t_max {
        f.push(FunctionSpec::separable(ScalarMap::Tanh, &[(t - 1, 1.0)]));
    }
    f
}

/// Constant orthogonal directions `sqrt(n) e_t` as map columns.
pub fn orthogonal_columns(n: usize, t_max: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, t_max, |i, j| if i == j { (n as f64).sqrt() } else { 0.0 })
}

/// First-subdiagonal drift matrix of an order-one autoregression.
pub fn ar_drift(t_max: usize, lambda: f64) -> DMatrix<f64> {
    DMatrix::from_fn(t_max, t_max, |s, t| if t == s + 1 { lambda } else { 0.0 })
}

fn linear_spec(cfg: &ExperimentConfig, n: usize) -> Result<LinearCaseSpec, SeError> {
    let lambda = match cfg.system {
        SystemFamily::Orthogonal => 0.0,
        _ => cfg.lambda,
    };
    let drift = ar_drift(cfg.t_max, lambda);
    LinearCaseSpec::new(orthogonal_columns(n, cfg.t_max), drift.clone(), drift)
}

/// Builds the systems and matched parameters for every dimension in the
/// config, from a single parameter estimate where the family allows it.
///
/// For the tanh chain the covariance recursion runs once at the smallest
/// dimension (its scalars do not depend on n) and the debiasing coefficients
/// are transplanted to the other dimensions; the linear families are exact
/// at every n.
pub fn build_instances(
    cfg: &ExperimentConfig,
    se_stream: RngStream,
) -> Result<Vec<Instance>, BuildError> {
    let opts = PsdOptions::default();
    match cfg.system {
        SystemFamily::TanhAmp => {
            let pilot_n = *cfg.n_values.iter().min().expect("validated non-empty");
            let (pilot_params, _) = amp_state_evolution(
                pilot_n,
                tanh_chain(pilot_n, cfg.t_max),
                cfg.se_replicates,
                se_stream,
                &opts,
            )?;
            cfg.n_values
                .iter()
                .map(|&n| {
                    let sys = amp_from_f(n, tanh_chain(n, cfg.t_max), &pilot_params.b)?;
                    let params = pilot_params.rebuild_for(&sys)?;
                    Ok(Instance {
                        sys,
                        params,
                        linear: None,
                    })
                })
                .collect()
        }
        SystemFamily::Orthogonal | SystemFamily::LinearAr => cfg
            .n_values
            .iter()
            .map(|&n| {
                let spec = linear_spec(cfg, n)?;
                let params = se_linear_closed_form(&spec, &opts)?;
                let sys = spec.system()?;
                Ok(Instance {
                    sys,
                    params,
                    linear: Some(spec),
                })
            })
            .collect(),
    }
}

/// Same system, comparison covariance multiplied by `scale` (1 = matched).
/// The mean maps and debiasing coefficients are kept, so the mean side stays
/// matched while the noise side is deliberately off.
pub fn scale_params(params: &SeParams, scale: f64) -> Result<SeParams, BuildError> {
    if scale == 1.0 {
        return Ok(params.clone());
    }
    let sigma = &params.sigma * scale;
    let chol = cholesky_upper(&sigma, &PsdOptions::default()).map_err(|e| {
        BuildError::Se(SeError::InvalidInput(format!(
            "scaled covariance lost positive semidefiniteness: {e}"
        )))
    })?;
    Ok(SeParams {
        n: params.n,
        t_max: params.t_max,
        sigma,
        omega: chol.omega,
        b: params.b.clone(),
        m: params.m.clone(),
        mc: params.mc.clone(),
    })
}
