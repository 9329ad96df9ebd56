//! Iteration maps and trajectory runners.
//!
//! A system is a pair of map sequences `(f_t, g_t)`, each reading a stated
//! subset of the earlier iterates. The matrix-driven run is
//! `x_t = A f_t(x_{<t}) + g_t(x_{<t})`; the comparison run replaces the
//! matrix term with correlated Gaussian noise, `y_t = m_t(y_{<t}) + w_t`
//! where `w_t = sum_{s<=t} Omega_{st} z_s`.
//!
//! Maps are stored symbolically so that derived quantities (Onsager-style
//! correction sums, comparison means) reference the same underlying `f_s`
//! evaluations instead of opaque closures.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::linalg::{operator_norm, SymMatrix, UpperTriMatrix};

#[derive(Debug, Clone, thiserror::Error)]
pub enum DynamicsError {
    #[error("map reads history index {index} but only {available} iterates are available")]
    MissingHistory { index: usize, available: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value produced at step {step}")]
    NonFinite { step: usize },
    #[error("invalid system: {0}")]
    InvalidSystem(String),
}

/// Scalar maps applied coordinatewise by separable specs. All of them are
/// 1-Lipschitz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarMap {
    Identity,
    Tanh,
    /// `sign(x) * max(|x| - theta, 0)`
    SoftThreshold(f64),
    Relu,
}

impl ScalarMap {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ScalarMap::Identity => x,
            ScalarMap::Tanh => x.tanh(),
            ScalarMap::SoftThreshold(theta) => x.signum() * (x.abs() - theta).max(0.0),
            ScalarMap::Relu => x.max(0.0),
        }
    }

    pub fn lipschitz(self) -> f64 {
        1.0
    }

    /// False for maps with kinks, where derivative-based estimators fall back
    /// to a subgradient convention.
    pub fn is_smooth(self) -> bool {
        matches!(self, ScalarMap::Identity | ScalarMap::Tanh)
    }
}

#[derive(Debug, Clone)]
enum FunctionKind {
    Constant(DVector<f64>),
    /// `sum_s coeff_s * x_s`
    Linear(Vec<(usize, f64)>),
    /// `map` applied coordinatewise to `sum_s coeff_s * x_s`
    Separable { map: ScalarMap, combo: Vec<(usize, f64)> },
    /// `M * x_index`
    MatrixLinear { matrix: Arc<DMatrix<f64>>, index: usize },
    /// `sum_j weight_j * spec_j`, used for correction sums and comparison
    /// means without losing the constituent maps.
    Combination(Vec<(f64, FunctionSpec)>),
}

/// One iteration map together with its declared Lipschitz constant and the
/// set of history indices it reads.
#[derive(Debug, Clone)]
pub struct FunctionSpec {
    kind: FunctionKind,
    lipschitz: f64,
    memory: BTreeSet<usize>,
}

fn merge_terms(terms: &[(usize, f64)]) -> Vec<(usize, f64)> {
    let mut merged: Vec<(usize, f64)> = Vec::new();
    for &(idx, c) in terms {
        match merged.iter_mut().find(|(i, _)| *i == idx) {
            Some((_, acc)) => *acc += c,
            None => merged.push((idx, c)),
        }
    }
    merged.retain(|&(_, c)| c != 0.0);
    merged.sort_by_key(|&(i, _)| i);
    merged
}

impl FunctionSpec {
    pub fn constant(v: DVector<f64>) -> Self {
        Self {
            kind: FunctionKind::Constant(v),
            lipschitz: 0.0,
            memory: BTreeSet::new(),
        }
    }

    pub fn zero(n: usize) -> Self {
        Self::constant(DVector::zeros(n))
    }

    /// `sum_s coeff_s * x_s` over the given `(index, coeff)` terms.
    pub fn linear(terms: &[(usize, f64)]) -> Self {
        let terms = merge_terms(terms);
        let l = terms.iter().map(|&(_, c)| c * c).sum::<f64>().sqrt();
        let memory = terms.iter().map(|&(i, _)| i).collect();
        Self {
            kind: FunctionKind::Linear(terms),
            lipschitz: l,
            memory,
        }
    }

    /// `map` applied coordinatewise to `sum_s coeff_s * x_s`.
    pub fn separable(map: ScalarMap, combo: &[(usize, f64)]) -> Self {
        let combo = merge_terms(combo);
        let l = map.lipschitz() * combo.iter().map(|&(_, c)| c * c).sum::<f64>().sqrt();
        let memory = combo.iter().map(|&(i, _)| i).collect();
        Self {
            kind: FunctionKind::Separable { map, combo },
            lipschitz: l,
            memory,
        }
    }

    /// `M * x_index` for a square matrix `M`.
    pub fn matrix_linear(matrix: Arc<DMatrix<f64>>, index: usize) -> Self {
        let l = operator_norm(&matrix);
        Self {
            kind: FunctionKind::MatrixLinear { matrix, index },
            lipschitz: l,
            memory: [index].into_iter().collect(),
        }
    }

    /// Weighted sum of existing specs. The default Lipschitz constant is the
    /// triangle-inequality bound `sum_j |w_j| L_j`; use [`with_lipschitz`]
    /// when a sharper constant is known.
    ///
    /// [`with_lipschitz`]: FunctionSpec::with_lipschitz
    pub fn combination(terms: Vec<(f64, FunctionSpec)>) -> Self {
        let mut memory = BTreeSet::new();
        let mut l = 0.0;
        for (w, spec) in &terms {
            memory.extend(spec.memory.iter().copied());
            l += w.abs() * spec.lipschitz;
        }
        Self {
            kind: FunctionKind::Combination(terms),
            lipschitz: l,
            memory,
        }
    }

    /// Overrides the declared Lipschitz constant.
    pub fn with_lipschitz(mut self, l: f64) -> Self {
        assert!(l >= 0.0 && l.is_finite());
        self.lipschitz = l;
        self
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// History indices this map reads (directly or through nested specs).
    pub fn memory(&self) -> &BTreeSet<usize> {
        &self.memory
    }

    pub fn reads_history(&self) -> bool {
        !self.memory.is_empty()
    }

    /// True when the map or any nested map has a kink (relu, soft threshold).
    pub fn has_kink(&self) -> bool {
        match &self.kind {
            FunctionKind::Separable { map, .. } => !map.is_smooth(),
            FunctionKind::Combination(terms) => terms.iter().any(|(_, s)| s.has_kink()),
            _ => false,
        }
    }

    fn combo_eval(
        combo: &[(usize, f64)],
        history: &[DVector<f64>],
        n: usize,
    ) -> Result<DVector<f64>, DynamicsError> {
        let mut acc = DVector::zeros(n);
        for &(idx, c) in combo {
            let col = history.get(idx).ok_or(DynamicsError::MissingHistory {
                index: idx,
                available: history.len(),
            })?;
            if col.len() != n {
                return Err(DynamicsError::DimensionMismatch(format!(
                    "history column {idx} has length {}, expected {n}",
                    col.len()
                )));
            }
            acc.axpy(c, col, 1.0);
        }
        Ok(acc)
    }

    /// Evaluates the map on the history prefix `x_{<t}`; the output always
    /// has length `n`.
    pub fn eval(&self, history: &[DVector<f64>], n: usize) -> Result<DVector<f64>, DynamicsError> {
        match &self.kind {
            FunctionKind::Constant(v) => {
                if v.len() != n {
                    return Err(DynamicsError::DimensionMismatch(format!(
                        "constant of length {} in a system of dimension {n}",
                        v.len()
                    )));
                }
                Ok(v.clone())
            }
            FunctionKind::Linear(terms) => Self::combo_eval(terms, history, n),
            FunctionKind::Separable { map, combo } => {
                let mut acc = Self::combo_eval(combo, history, n)?;
                for v in acc.iter_mut() {
                    *v = map.apply(*v);
                }
                Ok(acc)
            }
            FunctionKind::MatrixLinear { matrix, index } => {
                let col = history.get(*index).ok_or(DynamicsError::MissingHistory {
                    index: *index,
                    available: history.len(),
                })?;
                if matrix.nrows() != n || matrix.ncols() != col.len() {
                    return Err(DynamicsError::DimensionMismatch(format!(
                        "{}x{} matrix applied to column of length {} in dimension {n}",
                        matrix.nrows(),
                        matrix.ncols(),
                        col.len()
                    )));
                }
                Ok(matrix.as_ref() * col)
            }
            FunctionKind::Combination(terms) => {
                let mut acc = DVector::zeros(n);
                for (w, spec) in terms {
                    let part = spec.eval(history, n)?;
                    acc.axpy(*w, &part, 1.0);
                }
                Ok(acc)
            }
        }
    }
}

/// Column-ordered iterates of one run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    n: usize,
    cols: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn new(n: usize) -> Self {
        Self { n, cols: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn push(&mut self, col: DVector<f64>) {
        assert_eq!(col.len(), self.n, "trajectory column length");
        self.cols.push(col);
    }

    pub fn col(&self, t: usize) -> &DVector<f64> {
        &self.cols[t]
    }

    pub fn cols(&self) -> &[DVector<f64>] {
        &self.cols
    }

    pub fn as_matrix(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.cols.len());
        for (t, c) in self.cols.iter().enumerate() {
            m.set_column(t, c);
        }
        m
    }
}

/// The pair `(f_t, g_t)` defining a matrix-driven iteration of a fixed
/// length. The first step of each sequence must be memory-free.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    n: usize,
    f: Vec<FunctionSpec>,
    g: Vec<FunctionSpec>,
}

impl SystemSpec {
    pub fn new(n: usize, f: Vec<FunctionSpec>, g: Vec<FunctionSpec>) -> Result<Self, DynamicsError> {
        if n == 0 {
            return Err(DynamicsError::InvalidSystem("dimension must be positive".into()));
        }
        if f.is_empty() || f.len() != g.len() {
            return Err(DynamicsError::InvalidSystem(format!(
                "need equal nonempty map sequences, got {} and {}",
                f.len(),
                g.len()
            )));
        }
        for (name, seq) in [("f", &f), ("g", &g)] {
            if seq[0].reads_history() {
                return Err(DynamicsError::InvalidSystem(format!(
                    "{name}[0] must not read history"
                )));
            }
            for (t, spec) in seq.iter().enumerate() {
                if let Some(&bad) = spec.memory().iter().find(|&&s| s >= t) {
                    return Err(DynamicsError::InvalidSystem(format!(
                        "{name}[{t}] reads index {bad}, which is not strictly earlier"
                    )));
                }
            }
        }
        Ok(Self { n, f, g })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn t_max(&self) -> usize {
        self.f.len()
    }

    pub fn f(&self, t: usize) -> &FunctionSpec {
        &self.f[t]
    }

    pub fn g(&self, t: usize) -> &FunctionSpec {
        &self.g[t]
    }

    pub fn f_specs(&self) -> &[FunctionSpec] {
        &self.f
    }

    pub fn g_specs(&self) -> &[FunctionSpec] {
        &self.g
    }

    pub fn max_f_lipschitz(&self) -> f64 {
        self.f.iter().map(|s| s.lipschitz()).fold(0.0, f64::max)
    }

    pub fn max_g_lipschitz(&self) -> f64 {
        self.g.iter().map(|s| s.lipschitz()).fold(0.0, f64::max)
    }
}

/// Runs `x_t = A f_t(x_{<t}) + g_t(x_{<t})` for all steps of the system.
pub fn run_gfom(sys: &SystemSpec, a: &SymMatrix) -> Result<Trajectory, DynamicsError> {
    let n = sys.dim();
    if a.dim() != n {
        return Err(DynamicsError::DimensionMismatch(format!(
            "coupling matrix is {}x{} but the system dimension is {n}",
            a.dim(),
            a.dim()
        )));
    }
    let mut x = Trajectory::new(n);
    for t in 0..sys.t_max() {
        let ft = sys.f(t).eval(x.cols(), n)?;
        let gt = sys.g(t).eval(x.cols(), n)?;
        let mut xt = a.mul_vec(&ft);
        xt += &gt;
        if !xt.iter().all(|v| v.is_finite()) {
            return Err(DynamicsError::NonFinite { step: t });
        }
        x.push(xt);
    }
    Ok(x)
}

/// Runs the comparison process `y_t = m_t(y_{<t}) + w_t` with
/// `w_t = sum_{s<=t} Omega_{st} z_s`, returning the trajectory and the noise
/// columns `W = Z Omega`.
pub fn run_comparison(
    m: &[FunctionSpec],
    omega: &UpperTriMatrix,
    z: &DMatrix<f64>,
) -> Result<(Trajectory, DMatrix<f64>), DynamicsError> {
    let t_max = m.len();
    let n = z.nrows();
    if omega.dim() != t_max || z.ncols() != t_max {
        return Err(DynamicsError::DimensionMismatch(format!(
            "{} mean maps, {}x{} factor, {} noise columns",
            t_max,
            omega.dim(),
            omega.dim(),
            z.ncols()
        )));
    }
    let mut w = DMatrix::zeros(n, t_max);
    let mut y = Trajectory::new(n);
    for (t, m_t) in m.iter().enumerate() {
        let mut wt = DVector::zeros(n);
        for s in 0..=t {
            wt.axpy(omega.entry(s, t), &z.column(s).into_owned(), 1.0);
        }
        let mut yt = m_t.eval(y.cols(), n)?;
        yt += &wt;
        if !yt.iter().all(|v| v.is_finite()) {
            return Err(DynamicsError::NonFinite { step: t });
        }
        w.set_column(t, &wt);
        y.push(yt);
    }
    Ok((y, w))
}

/// Columns `spec_t(y_{<t})` for `t = 0..len`, e.g. `F(Y)`, `G(Y)`, `M(Y)`.
pub fn eval_columns(specs: &[FunctionSpec], traj: &Trajectory) -> Result<DMatrix<f64>, DynamicsError> {
    let n = traj.dim();
    let mut out = DMatrix::zeros(n, specs.len());
    for (t, spec) in specs.iter().enumerate() {
        let col = spec.eval(&traj.cols()[..t.min(traj.len())], n)?;
        out.set_column(t, &col);
    }
    Ok(out)
}

/// Builds the iteration `x_t = A f_t(x_{<t}) - sum_{s<t} b_{st} f_s(x_{<s})`
/// from the maps `f_t` and a strictly upper-triangular coefficient matrix.
/// The correction maps keep references to the same `f_s` specs, and their
/// declared Lipschitz constant is `sqrt(sum_s b_{st}^2) * max_s L(f_s)`.
pub fn amp_from_f(
    n: usize,
    f: Vec<FunctionSpec>,
    b: &DMatrix<f64>,
) -> Result<SystemSpec, DynamicsError> {
    let t_max = f.len();
    if b.nrows() != t_max || b.ncols() != t_max {
        return Err(DynamicsError::DimensionMismatch(format!(
            "{}x{} coefficient matrix for {} maps",
            b.nrows(),
            b.ncols(),
            t_max
        )));
    }
    for t in 0..t_max {
        for s in t..t_max {
            if b[(s, t)] != 0.0 {
                return Err(DynamicsError::InvalidSystem(
                    "correction coefficients must be strictly upper triangular".into(),
                ));
            }
        }
    }
    let lf = f.iter().map(|spec| spec.lipschitz()).fold(0.0, f64::max);
    let mut g = Vec::with_capacity(t_max);
    for t in 0..t_max {
        let terms: Vec<(f64, FunctionSpec)> = (0..t)
            .filter(|&s| b[(s, t)] != 0.0)
            .map(|s| (-b[(s, t)], f[s].clone()))
            .collect();
        if terms.is_empty() {
            g.push(FunctionSpec::zero(n));
        } else {
            let coeff_norm = terms.iter().map(|(w, _)| w * w).sum::<f64>().sqrt();
            g.push(FunctionSpec::combination(terms).with_lipschitz(coeff_norm * lf));
        }
    }
    SystemSpec::new(n, f, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::sample_gaussian_matrix;
    use crate::rng::RngStream;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn hist(cols: &[&[f64]]) -> Vec<DVector<f64>> {
        cols.iter().map(|c| DVector::from_column_slice(c)).collect()
    }

    #[test]
    fn scalar_maps_match_hand_values() {
        assert_eq!(ScalarMap::SoftThreshold(1.0).apply(2.5), 1.5);
        assert_eq!(ScalarMap::SoftThreshold(1.0).apply(-2.5), -1.5);
        assert_eq!(ScalarMap::SoftThreshold(1.0).apply(0.3), 0.0);
        assert_eq!(ScalarMap::Relu.apply(-3.0), 0.0);
        assert_eq!(ScalarMap::Relu.apply(3.0), 3.0);
        assert_relative_eq!(ScalarMap::Tanh.apply(0.5), 0.5f64.tanh());
    }

    #[test]
    fn linear_and_separable_eval() {
        let h = hist(&[&[1.0, -2.0], &[3.0, 0.5]]);
        let lin = FunctionSpec::linear(&[(0, 2.0), (1, -1.0)]);
        let v = lin.eval(&h, 2).unwrap();
        assert_eq!(v.as_slice(), &[-1.0, -4.5]);
        assert_relative_eq!(lin.lipschitz(), 5.0f64.sqrt());

        let sep = FunctionSpec::separable(ScalarMap::Tanh, &[(1, 1.0)]);
        let v = sep.eval(&h, 2).unwrap();
        assert_relative_eq!(v[0], 3.0f64.tanh());
        assert_relative_eq!(v[1], 0.5f64.tanh());
    }

    #[test]
    fn missing_history_is_reported() {
        let h = hist(&[&[1.0, 1.0]]);
        let f = FunctionSpec::linear(&[(3, 1.0)]);
        match f.eval(&h, 2) {
            Err(DynamicsError::MissingHistory { index: 3, available: 1 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn combination_references_shared_maps() {
        let h = hist(&[&[0.5, -0.5], &[1.0, 2.0]]);
        let f0 = FunctionSpec::separable(ScalarMap::Tanh, &[(0, 1.0)]);
        let f1 = FunctionSpec::linear(&[(1, 1.0)]);
        let c = FunctionSpec::combination(vec![(2.0, f0.clone()), (-0.5, f1.clone())]);
        let v = c.eval(&h, 2).unwrap();
        let expect = 2.0 * f0.eval(&h, 2).unwrap() - 0.5 * f1.eval(&h, 2).unwrap();
        assert_eq!(v, expect);
        assert_eq!(c.memory().iter().copied().collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn system_rejects_forward_references() {
        let f = vec![
            FunctionSpec::constant(DVector::from_element(2, 1.0)),
            FunctionSpec::linear(&[(1, 1.0)]),
        ];
        let g = vec![FunctionSpec::zero(2), FunctionSpec::zero(2)];
        assert!(SystemSpec::new(2, f, g).is_err());
    }

    #[test]
    fn gfom_run_matches_hand_computation() {
        // A = [[0, 1], [1, 0]] swaps coordinates.
        let a = SymMatrix::from_matrix(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]))
            .unwrap();
        let f = vec![
            FunctionSpec::constant(DVector::from_column_slice(&[1.0, 2.0])),
            FunctionSpec::linear(&[(0, 1.0)]),
        ];
        let g = vec![
            FunctionSpec::constant(DVector::from_column_slice(&[0.5, 0.0])),
            FunctionSpec::separable(ScalarMap::Relu, &[(0, -1.0)]),
        ];
        let sys = SystemSpec::new(2, f, g).unwrap();
        let x = run_gfom(&sys, &a).unwrap();
        // x0 = A[1,2] + [0.5,0] = [2.5, 1]
        assert_eq!(x.col(0).as_slice(), &[2.5, 1.0]);
        // x1 = A x0 + relu(-x0) = [1, 2.5] + [0, 0]
        assert_eq!(x.col(1).as_slice(), &[1.0, 2.5]);
    }

    #[test]
    fn non_finite_reports_step() {
        let a = SymMatrix::from_matrix(DMatrix::identity(2, 2)).unwrap();
        let f = vec![
            FunctionSpec::constant(DVector::from_element(2, 2.0)),
            FunctionSpec::linear(&[(0, 1.0)]),
        ];
        let g = vec![FunctionSpec::zero(2), FunctionSpec::linear(&[(0, 1e308)])];
        let sys = SystemSpec::new(2, f, g).unwrap();
        match run_gfom(&sys, &a) {
            Err(DynamicsError::NonFinite { step: 1 }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn comparison_noise_reconstructs_z_omega() {
        let n = 40;
        let t_max = 4;
        let z = sample_gaussian_matrix(n, t_max, RngStream::new(5, 0));
        let omega = UpperTriMatrix::from_upper_fn(t_max, |i, j| 0.3 + i as f64 + 0.1 * j as f64);
        let m: Vec<FunctionSpec> = (0..t_max)
            .map(|t| {
                if t == 0 {
                    FunctionSpec::zero(n)
                } else {
                    FunctionSpec::separable(ScalarMap::Tanh, &[(t - 1, 0.7)])
                }
            })
            .collect();
        let (y, w) = run_comparison(&m, &omega, &z).unwrap();
        let direct = &z * omega.as_matrix();
        assert!((&w - &direct).norm() <= 1e-12 * direct.norm().max(1.0));
        // y_t - m_t(y_{<t}) == w_t
        for (t, m_t) in m.iter().enumerate() {
            let mt = m_t.eval(&y.cols()[..t], n).unwrap();
            let resid = y.col(t) - mt - w.column(t);
            assert!(resid.norm() <= 1e-12);
        }
    }

    #[test]
    fn amp_builder_sets_correction_and_lipschitz() {
        let n = 3;
        let f = vec![
            FunctionSpec::constant(DVector::from_element(n, 1.0)),
            FunctionSpec::separable(ScalarMap::Tanh, &[(0, 1.0)]),
            FunctionSpec::separable(ScalarMap::Tanh, &[(1, 1.0)]),
        ];
        let mut b = DMatrix::zeros(3, 3);
        b[(0, 1)] = 0.5;
        b[(0, 2)] = -0.25;
        b[(1, 2)] = 0.75;
        let sys = amp_from_f(n, f, &b).unwrap();
        assert_relative_eq!(sys.g(1).lipschitz(), 0.5);
        assert_relative_eq!(sys.g(2).lipschitz(), (0.0625f64 + 0.5625).sqrt());
        // g_2(x) = 0.25 f_0 - 0.75 f_1(x), and f_1 reads x_0
        let h = hist(&[&[0.2, -0.1, 0.0], &[1.0, -1.0, 0.5]]);
        let got = sys.g(2).eval(&h, n).unwrap();
        for i in 0..n {
            let expect = 0.25 * 1.0 - 0.75 * h[0][i].tanh();
            assert_relative_eq!(got[i], expect, max_relative = 1e-14);
        }
    }

    #[test]
    fn eval_columns_stacks_prefix_evaluations() {
        let n = 2;
        let mut traj = Trajectory::new(n);
        traj.push(DVector::from_column_slice(&[1.0, -1.0]));
        traj.push(DVector::from_column_slice(&[2.0, 0.0]));
        let specs = vec![
            FunctionSpec::constant(DVector::from_element(n, 3.0)),
            FunctionSpec::linear(&[(0, 2.0)]),
        ];
        let m = eval_columns(&specs, &traj).unwrap();
        assert_eq!(m.column(0).as_slice(), &[3.0, 3.0]);
        assert_eq!(m.column(1).as_slice(), &[2.0, -2.0]);
    }

    proptest! {
        // The declared constant is a true Lipschitz bound (up to 5% slack)
        // for randomized inputs.
        #[test]
        fn declared_lipschitz_bounds_real_variation(
            c0 in -2.0f64..2.0,
            c1 in -2.0f64..2.0,
            theta in 0.0f64..1.0,
            seed in 0u64..1000,
        ) {
            let n = 6;
            let u = hist_rand(n, 2, seed);
            let v = hist_rand(n, 2, seed + 7);
            for spec in [
                FunctionSpec::linear(&[(0, c0), (1, c1)]),
                FunctionSpec::separable(ScalarMap::Tanh, &[(0, c0), (1, c1)]),
                FunctionSpec::separable(ScalarMap::SoftThreshold(theta), &[(1, c1)]),
                FunctionSpec::separable(ScalarMap::Relu, &[(0, c0)]),
            ] {
                let fu = spec.eval(&u, n).unwrap();
                let fv = spec.eval(&v, n).unwrap();
                let dist: f64 = u.iter().zip(&v).map(|(a, b)| (a - b).norm_squared()).sum::<f64>().sqrt();
                prop_assert!(fu.norm() - fv.norm() <= 1.05 * spec.lipschitz() * dist + 1e-12);
                prop_assert!((fu - fv).norm() <= 1.05 * spec.lipschitz() * dist + 1e-12);
            }
        }

        // Mutating history outside the declared memory never changes output.
        #[test]
        fn memory_mutation_invariance(seed in 0u64..500, bump in -5.0f64..5.0) {
            let n = 4;
            let mut h = hist_rand(n, 3, seed);
            let spec = FunctionSpec::separable(ScalarMap::Tanh, &[(1, 1.3)]);
            let before = spec.eval(&h, n).unwrap();
            h[0].add_scalar_mut(bump);
            h[2].add_scalar_mut(bump * 0.5);
            let after = spec.eval(&h, n).unwrap();
            prop_assert_eq!(before, after);
        }
    }

    fn hist_rand(n: usize, cols: usize, seed: u64) -> Vec<DVector<f64>> {
        let m = sample_gaussian_matrix(n, cols, RngStream::new(seed, 0));
        (0..cols).map(|j| m.column(j).into_owned()).collect()
    }
}
