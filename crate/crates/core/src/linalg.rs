//! Dense linear-algebra kernels: SPD factorizations, log-determinants,
//! projection onto the Stiefel manifold and seeded random frames.
//!
//! Matrices are `nalgebra` dynamic matrices. Two newtypes carry the
//! invariants the rest of the crate relies on:
//!
//! * [`SpdMatrix`] holds a symmetric positive definite matrix together with
//!   its Cholesky factor. It can only be built through a successful
//!   factorization.
//! * [`StiefelPoint`] holds an `n x d` matrix with orthonormal columns,
//!   `||U^T U - I_d||_F <= 1e-10`.

use std::ops::Deref;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen, SVD};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// Tolerance of the Stiefel invariant `||U^T U - I||_F`.
pub const STIEFEL_TOL: f64 = 1e-10;

/// Relative scale of the diagonal shift applied when a factorization fails once.
pub const REGULARIZATION_SCALE: f64 = 1e-6;

/// Absolute lower bound of the diagonal shift, so that an all-zero matrix
/// (identical samples) can still be regularized.
pub const REGULARIZATION_MIN: f64 = 1e-10;

/// Symmetric positive definite matrix with a cached lower Cholesky factor.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    matrix: Matrix,
    chol: Cholesky<f64, Dyn>,
}

impl SpdMatrix {
    /// Factors `m` without any regularization.
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidShape(format!(
                "SPD matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let m = symmetrize(m);
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::NotPositiveDefinite);
        }
        match Cholesky::new(m.clone()) {
            Some(chol) => Ok(Self { matrix: m, chol }),
            None => Err(Error::NotPositiveDefinite),
        }
    }

    /// Factors `m`; on failure retries once with `m + eps I`, where
    /// `eps = max(1e-6 trace(m)/dim, 1e-10)`.
    pub fn regularized(m: Matrix) -> Result<Self> {
        match Self::new(m.clone()) {
            Ok(s) => Ok(s),
            Err(Error::NotPositiveDefinite) => {
                let dim = m.nrows().max(1) as f64;
                let eps = (REGULARIZATION_SCALE * m.trace() / dim).max(REGULARIZATION_MIN);
                if !eps.is_finite() {
                    return Err(Error::NotPositiveDefinite);
                }
                let shifted = m + Matrix::identity(dim as usize, dim as usize) * eps;
                log::debug!("SPD regularization applied, eps = {eps:e}");
                Self::new(shifted)
            }
            Err(e) => Err(e),
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> Matrix {
        self.matrix
    }

    /// Lower-triangular factor `L` with `L L^T = M`.
    pub fn cholesky_factor(&self) -> Matrix {
        self.chol.l()
    }

    pub fn logdet(&self) -> f64 {
        let l = self.chol.l_dirty();
        2.0 * (0..self.dim()).map(|i| l[(i, i)].ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &Matrix) -> Matrix {
        self.chol.solve(b)
    }

    pub fn solve_vec(&self, b: &Vector) -> Vector {
        self.chol.solve(b)
    }

    /// `L^{-1}`, used for batched whitening `Z = (X - mu) L^{-T}`.
    pub fn inverse_cholesky_factor(&self) -> Matrix {
        let n = self.dim();
        self.chol
            .l_dirty()
            .solve_lower_triangular(&Matrix::identity(n, n))
            .expect("Cholesky diagonal is positive")
            .lower_triangle()
    }

    /// Squared Mahalanobis norm `v^T M^{-1} v` via one triangular solve.
    pub fn mahalanobis_sq(&self, v: &Vector) -> f64 {
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(v)
            .expect("Cholesky diagonal is positive");
        z.norm_squared()
    }
}

impl Deref for SpdMatrix {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.matrix
    }
}

/// An `n x d` matrix with orthonormal columns.
#[derive(Clone, Debug, PartialEq)]
pub struct StiefelPoint(Matrix);

impl StiefelPoint {
    /// Wraps `u` after checking the orthonormality invariant.
    pub fn new(u: Matrix) -> Result<Self> {
        if u.ncols() > u.nrows() {
            return Err(Error::InvalidShape(format!(
                "Stiefel point needs d <= n, got {}x{}",
                u.nrows(),
                u.ncols()
            )));
        }
        let err = orthonormality_error(&u);
        if err > STIEFEL_TOL {
            return Err(Error::InvalidShape(format!(
                "columns not orthonormal: ||U^T U - I||_F = {err:e}"
            )));
        }
        Ok(Self(u))
    }

    fn from_projection(u: Matrix) -> Self {
        debug_assert!(
            orthonormality_error(&u) <= STIEFEL_TOL,
            "Stiefel invariant violated: {:e}",
            orthonormality_error(&u)
        );
        Self(u)
    }

    /// The identity frame `[I_d; 0]`.
    pub fn identity(n: usize, d: usize) -> Self {
        Self(Matrix::identity(n, d))
    }

    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

impl Deref for StiefelPoint {
    type Target = Matrix;
    fn deref(&self) -> &Matrix {
        &self.0
    }
}

/// `||U^T U - I_d||_F`.
pub fn orthonormality_error(u: &Matrix) -> f64 {
    let d = u.ncols();
    (u.transpose() * u - Matrix::identity(d, d)).norm()
}

fn symmetrize(m: Matrix) -> Matrix {
    (&m + m.transpose()) * 0.5
}

pub fn cholesky_spd(m: &SpdMatrix) -> Matrix {
    m.cholesky_factor()
}

pub fn logdet_spd(m: &SpdMatrix) -> f64 {
    m.logdet()
}

pub fn solve_spd(m: &SpdMatrix, b: &Matrix) -> Result<Matrix> {
    if b.nrows() != m.dim() {
        return Err(Error::InvalidShape(format!(
            "right-hand side has {} rows, matrix is {}x{}",
            b.nrows(),
            m.dim(),
            m.dim()
        )));
    }
    Ok(m.solve(b))
}

/// Nearest point on the Stiefel manifold in Frobenius norm: the orthonormal
/// polar factor `P Q^T` of the thin SVD `A = P diag(s) Q^T`.
pub fn project_stiefel(a: &Matrix) -> Result<StiefelPoint> {
    let (n, d) = a.shape();
    if d > n || d == 0 {
        return Err(Error::InvalidShape(format!("cannot project {n}x{d} onto St(d,n)")));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::RankDeficient { ratio: f64::NAN });
    }
    let svd = SVD::new(a.clone(), true, true);
    let s = &svd.singular_values;
    let smax = s.max();
    let smin = s.min();
    if !(smax > 0.0) || smin < 1e-12 * smax {
        return Err(Error::RankDeficient { ratio: smin / smax });
    }
    let p = svd.u.expect("requested U");
    let qt = svd.v_t.expect("requested V^T");
    Ok(StiefelPoint::from_projection(p * qt))
}

/// Schulz iteration `X <- X (I + (I - X^T X)/2)` for the polar factor.
///
/// Only converges when `||I - A^T A||_F < 1`; outside that region
/// [`Error::ConvergenceDomainViolated`] is returned and callers should use
/// [`project_stiefel`].
pub fn schulz_polar(a: &Matrix) -> Result<StiefelPoint> {
    let (n, d) = a.shape();
    if d > n || d == 0 {
        return Err(Error::InvalidShape(format!("cannot project {n}x{d} onto St(d,n)")));
    }
    let eye = Matrix::identity(d, d);
    let start = (&eye - a.transpose() * a).norm();
    if !(start < 1.0) {
        return Err(Error::ConvergenceDomainViolated { norm: start });
    }
    let mut x = a.clone();
    for _ in 0..200 {
        let defect = &eye - x.transpose() * &x;
        if defect.norm() < 1e-15 {
            break;
        }
        x = &x * (&eye + defect * 0.5);
    }
    if orthonormality_error(&x) > STIEFEL_TOL {
        // Converged only to within the quadratic rate floor; finish on the SVD path.
        return project_stiefel(&x);
    }
    Ok(StiefelPoint::from_projection(x))
}

/// Deterministic random frame: polar factor of a standard-normal `n x d` matrix.
pub fn random_stiefel(n: usize, d: usize, seed: u64) -> Result<StiefelPoint> {
    if d > n {
        return Err(Error::InvalidShape(format!("d = {d} exceeds n = {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = standard_normal_matrix(n, d, &mut rng);
    project_stiefel(&g)
}

pub(crate) fn standard_normal_matrix<R: rand::Rng>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng))
}

/// Eigenpairs of a symmetric matrix sorted by descending eigenvalue.
pub fn sorted_symmetric_eigen(m: &Matrix) -> (Vector, Matrix) {
    let eig = SymmetricEigen::new(symmetrize(m.clone()));
    let mut order: Vec<usize> = (0..m.nrows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let values = Vector::from_iterator(order.len(), order.iter().map(|&i| eig.eigenvalues[i]));
    let vectors = Matrix::from_columns(
        &order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>(),
    );
    (values, vectors)
}

/// Largest principal angle (radians) between the column spans of two frames.
pub fn max_principal_angle(a: &Matrix, b: &Matrix) -> f64 {
    let qa = project_stiefel(a).expect("full-rank frame");
    let qb = project_stiefel(b).expect("full-rank frame");
    let cross = qa.transpose() * qb.matrix();
    let s = cross.singular_values();
    s.min().clamp(-1.0, 1.0).acos()
}
