//! Dense linear algebra and Gaussian sampling primitives.
//!
//! Conventions used throughout: the coupling matrix is `n x n` symmetric with
//! `N(0, 2/n)` diagonal and `N(0, 1/n)` off-diagonal entries; covariance
//! factors are upper triangular with nonnegative diagonal, so `S = U^T U`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::rng::RngStream;

#[derive(Debug, Clone, thiserror::Error)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix is not upper triangular")]
    NotUpperTriangular,
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eig:.6e}, tolerance {tol:.6e})")]
    NotPositiveSemidefinite { min_eig: f64, tol: f64 },
}

/// Symmetric matrix with mirrored storage; `a[(i, j)] == a[(j, i)]` exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Wraps a matrix that is already exactly symmetric.
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self, LinalgError> {
        if m.nrows() != m.ncols() {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} matrix cannot be symmetric",
                m.nrows(),
                m.ncols()
            )));
        }
        let mut asym = 0.0f64;
        for j in 0..m.ncols() {
            for i in 0..j {
                asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if asym > 0.0 {
            return Err(LinalgError::NotSymmetric(asym));
        }
        Ok(Self { m })
    }

    /// Builds from the upper triangle (including diagonal), mirroring below.
    pub fn from_upper_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            for i in 0..=j {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self { m }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.m * v
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }
}

/// Upper-triangular matrix; entries strictly below the diagonal are exactly 0.
#[derive(Debug, Clone, PartialEq)]
pub struct UpperTriMatrix {
    m: DMatrix<f64>,
}

impl UpperTriMatrix {
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self, LinalgError> {
        if m.nrows() != m.ncols() {
            return Err(LinalgError::DimensionMismatch(format!(
                "{}x{} matrix cannot be triangular",
                m.nrows(),
                m.ncols()
            )));
        }
        for j in 0..m.ncols() {
            for i in j + 1..m.nrows() {
                if m[(i, j)] != 0.0 {
                    return Err(LinalgError::NotUpperTriangular);
                }
            }
        }
        Ok(Self { m })
    }

    /// Builds from a function over the upper triangle; the rest is zero.
    pub fn from_upper_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DMatrix::zeros(dim, dim);
        for j in 0..dim {
            for i in 0..=j {
                m[(i, j)] = f(i, j);
            }
        }
        Self { m }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            m: DMatrix::identity(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    /// Sum of column Euclidean norms, `||U||_{2,1}`.
    pub fn norm_2_1(&self) -> f64 {
        norm_2_1(&self.m)
    }

    /// Smallest diagonal magnitude; zero means the factor is singular.
    pub fn min_diag(&self) -> f64 {
        (0..self.dim()).map(|i| self.m[(i, i)].abs()).fold(f64::INFINITY, f64::min)
    }

    /// Leading `k x k` block.
    pub fn leading_block(&self, k: usize) -> UpperTriMatrix {
        UpperTriMatrix {
            m: self.m.view((0, 0), (k, k)).into_owned(),
        }
    }

    /// `U^{-T} M U^{-1}` via two triangular solves; `None` if the diagonal
    /// has a zero.
    pub fn inv_congruence(&self, m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
        let lt = self.m.transpose();
        let half = lt.solve_lower_triangular(m)?;
        let full = lt.solve_lower_triangular(&half.transpose())?;
        Some(full.transpose())
    }
}

/// Standard Gaussian matrix, entries iid `N(0, 1)` drawn in column-major
/// order.
pub fn sample_gaussian_matrix(rows: usize, cols: usize, stream: RngStream) -> DMatrix<f64> {
    sample_gaussian_matrix_from(rows, cols, &mut stream.rng())
}

/// Like [`sample_gaussian_matrix`] but consuming an existing generator, for
/// callers that draw several objects from one stream in a fixed order.
pub fn sample_gaussian_matrix_from(rows: usize, cols: usize, rng: &mut impl Rng) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    DMatrix::from_vec(rows, cols, data)
}

/// Symmetric Gaussian coupling matrix: diagonal `N(0, 2/n)`, off-diagonal
/// `N(0, 1/n)`, mirrored. The draw order (upper triangle, column by column)
/// is part of the reproducibility contract.
pub fn sample_goe(n: usize, stream: RngStream) -> SymMatrix {
    sample_goe_block(n, n, stream)
}

/// Leading `dim x dim` block of an `n x n` matrix with the same law as
/// [`sample_goe`]; used where only a small corner of an independent copy is
/// needed.
pub fn sample_goe_block(dim: usize, n: usize, stream: RngStream) -> SymMatrix {
    sample_goe_block_from(dim, n, &mut stream.rng())
}

/// [`sample_goe`] variant consuming an existing generator.
pub fn sample_goe_from(n: usize, rng: &mut impl Rng) -> SymMatrix {
    sample_goe_block_from(n, n, rng)
}

/// [`sample_goe_block`] variant consuming an existing generator.
pub fn sample_goe_block_from(dim: usize, n: usize, rng: &mut impl Rng) -> SymMatrix {
    let diag = (2.0 / n as f64).sqrt();
    let off = (1.0 / n as f64).sqrt();
    SymMatrix::from_upper_fn(dim, |i, j| {
        let z: f64 = rng.sample(StandardNormal);
        if i == j {
            z * diag
        } else {
            z * off
        }
    })
}

/// PSD acceptance tolerance for a covariance estimate: `1e-10 * tr(S) / dim`.
pub fn psd_tolerance(s: &DMatrix<f64>) -> f64 {
    1e-10 * s.trace().max(0.0) / s.nrows().max(1) as f64
}

#[derive(Debug, Clone, Copy)]
pub struct PsdOptions {
    /// Diagonal jitter added before factorization; 0 disables it.
    pub jitter: f64,
}

impl Default for PsdOptions {
    fn default() -> Self {
        Self { jitter: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    pub omega: UpperTriMatrix,
    /// Smallest eigenvalue of the (jittered) input.
    pub min_eigenvalue: f64,
    /// Set when the input is within tolerance of singular; the factor is
    /// still returned, with zeroed pivot rows.
    pub near_singular: bool,
    /// Jitter that was actually applied to the diagonal.
    pub jitter: f64,
}

/// Upper-triangular Cholesky factor with nonnegative diagonal, `S = U^T U`.
///
/// Accepts positive semidefinite input: eigenvalues are allowed down to
/// `-psd_tolerance(S)`, nonpositive pivots produce a zero row instead of a
/// failure, and the `near_singular` flag reports rank deficiency.
pub fn cholesky_upper(s: &DMatrix<f64>, opts: &PsdOptions) -> Result<CholeskyFactor, LinalgError> {
    let dim = s.nrows();
    if dim != s.ncols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "{}x{} input to cholesky_upper",
            s.nrows(),
            s.ncols()
        )));
    }
    let scale = s.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let mut asym = 0.0f64;
    for j in 0..dim {
        for i in 0..j {
            asym = asym.max((s[(i, j)] - s[(j, i)]).abs());
        }
    }
    if asym > 1e-12 * scale.max(1e-300) {
        return Err(LinalgError::NotSymmetric(asym));
    }

    let mut work = s.clone();
    if opts.jitter > 0.0 {
        for i in 0..dim {
            work[(i, i)] += opts.jitter;
        }
    }
    let tol = psd_tolerance(&work);
    let min_eig = min_symmetric_eigenvalue(&work);
    if min_eig < -tol {
        return Err(LinalgError::NotPositiveSemidefinite { min_eig, tol });
    }

    let mut u = DMatrix::zeros(dim, dim);
    for j in 0..dim {
        let mut piv = work[(j, j)];
        for k in 0..j {
            piv -= u[(k, j)] * u[(k, j)];
        }
        if piv > tol {
            let d = piv.sqrt();
            u[(j, j)] = d;
            for t in j + 1..dim {
                let mut v = work[(j, t)];
                for k in 0..j {
                    v -= u[(k, j)] * u[(k, t)];
                }
                u[(j, t)] = v / d;
            }
        }
        // piv <= tol: the row stays zero; for a PSD input the untreated
        // residual column is itself within tolerance of zero.
    }
    let near_singular = min_eig < tol;
    Ok(CholeskyFactor {
        omega: UpperTriMatrix { m: u },
        min_eigenvalue: min_eig,
        near_singular,
        jitter: opts.jitter.max(0.0),
    })
}

/// Smallest eigenvalue of a symmetric matrix (dense eigendecomposition; meant
/// for desk-size inputs).
pub fn min_symmetric_eigenvalue(s: &DMatrix<f64>) -> f64 {
    if s.nrows() == 0 {
        return 0.0;
    }
    let eig = s.clone().symmetric_eigenvalues();
    eig.iter().fold(f64::INFINITY, |a, &v| a.min(v))
}

/// Operator norm of a symmetric matrix via dense eigendecomposition.
pub fn sym_operator_norm(s: &DMatrix<f64>) -> f64 {
    if s.nrows() == 0 {
        return 0.0;
    }
    let eig = s.clone().symmetric_eigenvalues();
    eig.iter().fold(0.0f64, |a, &v| a.max(v.abs()))
}

/// `sqrt(lambda_max / lambda_min)` of a PSD matrix; infinite when singular
/// beyond the clipping tolerance.
pub fn cond_sqrt_psd(s: &DMatrix<f64>) -> f64 {
    if s.nrows() == 0 {
        return 1.0;
    }
    let eig = s.clone().symmetric_eigenvalues();
    let max = eig.iter().fold(0.0f64, |a, &v| a.max(v));
    let min = eig.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if min <= 1e-12 * max.max(1e-300) {
        f64::INFINITY
    } else {
        (max / min).sqrt()
    }
}

/// PSD square root via eigendecomposition. Eigenvalues are clipped at zero;
/// values below `-1e-12 * tr(S)` are rejected.
pub fn sqrt_psd(s: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let dim = s.nrows();
    if dim != s.ncols() {
        return Err(LinalgError::DimensionMismatch(format!(
            "{}x{} input to sqrt_psd",
            s.nrows(),
            s.ncols()
        )));
    }
    if dim == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let tol = 1e-12 * s.trace().abs().max(1e-300);
    let eig = nalgebra::linalg::SymmetricEigen::new(s.clone());
    let mut min_eig = f64::INFINITY;
    for &v in eig.eigenvalues.iter() {
        min_eig = min_eig.min(v);
    }
    if min_eig < -tol {
        return Err(LinalgError::NotPositiveSemidefinite { min_eig, tol });
    }
    let roots = DVector::from_iterator(dim, eig.eigenvalues.iter().map(|&v| v.max(0.0).sqrt()));
    let scaled = &eig.eigenvectors * DMatrix::from_diagonal(&roots);
    Ok(&scaled * eig.eigenvectors.transpose())
}

#[derive(Debug, Clone, Copy)]
pub struct MatrixNorms {
    pub frobenius: f64,
    pub operator: f64,
    /// Sum of column Euclidean norms.
    pub two_one: f64,
}

/// Sum of column Euclidean norms.
pub fn norm_2_1(m: &DMatrix<f64>) -> f64 {
    (0..m.ncols()).map(|j| m.column(j).norm()).sum()
}

/// Dimension below which operator norms go through an exact SVD instead of
/// power iteration.
pub const EXACT_SVD_DIM: usize = 64;

/// Operator norm; exact SVD for small matrices, power iteration on `M^T M`
/// otherwise (tolerance 1e-10 on the successive relative change, at most
/// `ceil(10 ln n)` iterations).
pub fn operator_norm(m: &DMatrix<f64>) -> f64 {
    let small = m.nrows().min(m.ncols());
    if small == 0 {
        return 0.0;
    }
    if small <= EXACT_SVD_DIM {
        let svd = nalgebra::linalg::SVD::new(m.clone(), false, false);
        svd.singular_values.iter().fold(0.0f64, |a, &v| a.max(v))
    } else {
        let n = m.nrows().max(m.ncols());
        let max_iter = (10.0 * (n as f64).ln()).ceil() as usize;
        power_iteration_norm(m, 1e-10, max_iter)
    }
}

/// Power-iteration estimate of the operator norm. The starting vector is a
/// fixed pseudorandom direction, so the result is deterministic.
pub fn power_iteration_norm(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    let (rows, cols) = (m.nrows(), m.ncols());
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let mut rng = RngStream::new(0x9e37_79b9_7f4a_7c15, 0).rng();
    let mut v = DVector::from_fn(cols, |_, _| rng.sample::<f64, _>(StandardNormal));
    let nv = v.norm();
    if nv == 0.0 {
        return 0.0;
    }
    v /= nv;
    let mut sigma2 = 0.0f64;
    for _ in 0..max_iter.max(1) {
        let u = m * &v;
        let mut w = m.transpose() * &u;
        let lambda = w.norm(); // |M^T M v| with unit v
        if lambda == 0.0 {
            return 0.0;
        }
        w /= lambda;
        let rel = ((lambda - sigma2) / lambda).abs();
        sigma2 = lambda;
        v = w;
        if rel < tol {
            break;
        }
    }
    sigma2.sqrt()
}

/// Frobenius, operator, and `(2,1)` norms in one pass.
pub fn norms(m: &DMatrix<f64>) -> MatrixNorms {
    MatrixNorms {
        frobenius: m.norm(),
        operator: operator_norm(m),
        two_one: norm_2_1(m),
    }
}

/// Moore-Penrose pseudo-inverse with singular values below
/// `eps * max(rows, cols) * sigma_max` treated as zero.
pub fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = (m.nrows(), m.ncols());
    if rows == 0 || cols == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let svd = nalgebra::linalg::SVD::new(m.clone(), true, true);
    let smax = svd.singular_values.iter().fold(0.0f64, |a, &v| a.max(v));
    let tol = f64::EPSILON * rows.max(cols) as f64 * smax;
    if let Ok(p) = svd.pseudo_inverse(tol) {
        // The iterative SVD can silently return a factorization that does
        // not reproduce the input (seen on matrices with exactly repeated
        // rows). Accept the result only if it behaves like a pseudo-inverse.
        let scale = m.norm();
        if scale == 0.0 || (m * &p * m - m).norm() <= 1e-10 * rows.max(cols) as f64 * scale {
            return p;
        }
    }
    cod_pinv(m)
}

/// Pseudo-inverse from a complete orthogonal decomposition: column-pivoted
/// QR to expose the rank, then a second QR to fold the trailing block into
/// a square triangular factor. Direct (no iteration), so it has no silent
/// failure mode; used when the SVD result fails validation.
fn cod_pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = (m.nrows(), m.ncols());
    let (q, r, perm) = m.clone().col_piv_qr().unpack();
    let k = rows.min(cols);
    // Cut at the same relative level as the SVD path; the Frobenius norm
    // dominates the largest singular value, unlike the leading pivot.
    let tol = f64::EPSILON * rows.max(cols) as f64 * m.norm();
    let rank = (0..k).take_while(|&i| r[(i, i)].abs() > tol).count();
    if rank == 0 {
        return DMatrix::zeros(cols, rows);
    }
    let r_top = r.rows(0, rank).into_owned();
    let q_r = q.columns(0, rank).into_owned();
    let qr2 = r_top.transpose().qr();
    let (q2, r2) = (qr2.q(), qr2.r());
    // m = q_r r2^T q2^T P^{-1} with P the recorded column permutation, so
    // the pseudo-inverse is P q2 r2^{-T} q_r^T.
    let z = r2
        .transpose()
        .solve_lower_triangular(&q_r.transpose())
        .unwrap_or_else(|| DMatrix::zeros(rank, rows));
    let mut x = q2 * z;
    perm.inv_permute_rows(&mut x);
    x
}
