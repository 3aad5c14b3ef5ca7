//! PCA-reduced Gaussian mixture model.
//!
//! Component `k` models a sample `x` through its coordinates in an affine
//! `d`-dimensional subspace, `U_k^T (x - b_k) ~ N(mu_k, Sigma_k)`, and an
//! isotropic Gaussian residual of variance `sigma^2` orthogonal to it. The
//! equivalent full-dimensional Gaussian ("lifted" component) is
//!
//! ```text
//! mu~    = U mu + b
//! Sigma~ = U Sigma U^T + sigma^2 (I - U U^T)
//! ```
//!
//! The E-step never forms `Sigma~`: it evaluates the `d`-dimensional density
//! of the projected sample and the squared residual norm. The M-step reduces
//! the data to weighted moments `(alpha, m, C)` and minimizes the objective
//! `G(U, b)` of [`crate::palm`] per component.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::em::{
    assign_nearest, kmeans_pp_seeds, least_explained_sample, normalize_log_weights,
    sample_covariance, seeded_rng, weighted_covariance, weighted_moments, EmConfig, EmIteration,
    EmLog, Responsibilities,
};
use crate::error::{Error, Result};
use crate::gmm::check_simplex;
use crate::linalg::{sorted_symmetric_eigen, Matrix, SpdMatrix, StiefelPoint, Vector};
use crate::palm::{minimize, MStepProblem, SolverConfig};

#[derive(Clone, Debug)]
pub struct PcaComponent {
    pub u: StiefelPoint,
    pub b: Vector,
    pub mu: Vector,
    pub cov: SpdMatrix,
}

#[derive(Clone, Debug)]
pub struct PcaGmmModel {
    /// Standard deviation of the residual orthogonal to each subspace.
    pub sigma: f64,
    pub alpha: Vec<f64>,
    pub components: Vec<PcaComponent>,
}

impl PcaGmmModel {
    pub fn new(sigma: f64, alpha: Vec<f64>, components: Vec<PcaComponent>) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::InvalidShape(format!("sigma must be positive, got {sigma}")));
        }
        if components.is_empty() || alpha.len() != components.len() {
            return Err(Error::InvalidShape("component counts disagree".into()));
        }
        let (n, d) = (components[0].u.n(), components[0].u.d());
        for c in &components {
            if c.u.n() != n || c.u.d() != d || c.b.len() != n || c.mu.len() != d || c.cov.dim() != d {
                return Err(Error::InvalidShape("component dimensions disagree".into()));
            }
        }
        check_simplex(&alpha)?;
        Ok(Self { sigma, alpha, components })
    }

    pub fn n_components(&self) -> usize {
        self.alpha.len()
    }

    /// Ambient dimension.
    pub fn n(&self) -> usize {
        self.components[0].u.n()
    }

    /// Subspace dimension.
    pub fn d(&self) -> usize {
        self.components[0].u.d()
    }

    pub fn lifted(&self) -> Result<Vec<LiftedGaussian>> {
        self.components
            .iter()
            .map(|c| lift_component(&c.u, &c.b, &c.mu, &c.cov, self.sigma))
            .collect()
    }
}

/// Full-dimensional Gaussian equivalent to one PCA-GMM component.
#[derive(Clone, Debug)]
pub struct LiftedGaussian {
    pub mu: Vector,
    pub cov: SpdMatrix,
}

/// Weighted count, first and second moments of the samples of one component.
#[derive(Clone, Debug, PartialEq)]
pub struct SufficientStats {
    pub alpha_raw: f64,
    pub m: Vector,
    pub c: Matrix,
}

impl SufficientStats {
    pub fn from_weighted(x: &Matrix, w: &Vector) -> Self {
        let (alpha_raw, m, c) = weighted_moments(x, w, 0.0);
        Self { alpha_raw, m, c }
    }
}

pub fn lift_component(
    u: &StiefelPoint,
    b: &Vector,
    mu: &Vector,
    cov: &SpdMatrix,
    sigma: f64,
) -> Result<LiftedGaussian> {
    let (n, d) = (u.n(), u.d());
    if b.len() != n || mu.len() != d || cov.dim() != d {
        return Err(Error::InvalidShape("component dimensions disagree".into()));
    }
    let var = sigma * sigma;
    let uut = u.matrix() * u.transpose();
    let full = u.matrix() * cov.matrix() * u.transpose() + (Matrix::identity(n, n) - uut) * var;
    let mean = u.matrix() * mu + b;
    Ok(LiftedGaussian { mu: mean, cov: SpdMatrix::new(full)? })
}

/// `log alpha_k + log f(U^T y | mu, Sigma) - |(I - U U^T) y|^2 / (2 sigma^2)`
/// for every sample, with `y = x - b`.
fn log_weighted_terms(model: &PcaGmmModel, x: &Matrix) -> Result<Matrix> {
    let n = model.n();
    if x.ncols() != n {
        return Err(Error::InvalidShape(format!("samples have dimension {}, model {n}", x.ncols())));
    }
    let d = model.d();
    let half_inv_var = 0.5 / (model.sigma * model.sigma);
    let cols: Vec<Vector> = model
        .components
        .par_iter()
        .zip(model.alpha.par_iter())
        .map(|(c, &alpha)| {
            let mut y = x.clone();
            for j in 0..n {
                y.column_mut(j).add_scalar_mut(-c.b[j]);
            }
            let mut proj = &y * c.u.matrix();
            let residual: Vec<f64> = y
                .row_iter()
                .zip(proj.row_iter())
                .map(|(yr, pr)| (yr.norm_squared() - pr.norm_squared()).max(0.0))
                .collect();
            for j in 0..d {
                proj.column_mut(j).add_scalar_mut(-c.mu[j]);
            }
            let z = proj * c.cov.inverse_cholesky_factor().transpose();
            let constant = alpha.ln() - 0.5 * d as f64 * (2.0 * PI).ln() - 0.5 * c.cov.logdet();
            Vector::from_iterator(
                x.nrows(),
                z.row_iter()
                    .zip(residual)
                    .map(|(zr, r)| constant - 0.5 * zr.norm_squared() - half_inv_var * r),
            )
        })
        .collect();
    Ok(Matrix::from_columns(&cols))
}

/// The PCA-GMM objective `F`, evaluated with `d`-dimensional densities.
///
/// Relates to the negative log-likelihood `L` of the lifted mixture by
/// `F = L - N (n - d) log sqrt(2 pi sigma^2)`.
pub fn pcagmm_objective(model: &PcaGmmModel, x: &Matrix) -> Result<f64> {
    let terms = log_weighted_terms(model, x)?;
    Ok(-terms
        .row_iter()
        .map(|r| crate::em::logsumexp(r.iter().copied()))
        .sum::<f64>())
}

pub(crate) fn pcagmm_estep_with_objective(
    model: &PcaGmmModel,
    x: &Matrix,
) -> Result<(Responsibilities, f64)> {
    normalize_log_weights(log_weighted_terms(model, x)?)
}

pub fn pcagmm_estep(model: &PcaGmmModel, x: &Matrix) -> Result<Responsibilities> {
    Ok(pcagmm_estep_with_objective(model, x)?.0)
}

pub fn accumulate_stats(x: &Matrix, beta: &Responsibilities, k: usize) -> Result<SufficientStats> {
    if x.nrows() != beta.n_samples() || k >= beta.n_components() {
        return Err(Error::InvalidShape("responsibilities do not match samples".into()));
    }
    Ok(SufficientStats::from_weighted(x, &beta.column(k)))
}

/// Smallest `alpha_raw` for which a component is recovered.
pub const MIN_COMPONENT_MASS: f64 = 1e-12;

/// `mu = U^T d / alpha`, `Sigma = U^T S U / alpha` at the optimized `(U, b)`.
pub fn recover_component(stats: &SufficientStats, u: &StiefelPoint, b: &Vector) -> Result<(Vector, SpdMatrix)> {
    let alpha = stats.alpha_raw;
    if !(alpha >= MIN_COMPONENT_MASS) {
        return Err(Error::EmptyComponent { component: 0 });
    }
    if u.n() != stats.m.len() || b.len() != stats.m.len() {
        return Err(Error::InvalidShape("frame does not match statistics".into()));
    }
    let d = &stats.m - b * alpha;
    let mbt = &stats.m * b.transpose();
    let s = &stats.c - &mbt - mbt.transpose() + b * b.transpose() * alpha;
    let mu = u.transpose() * d / alpha;
    let cov = u.transpose() * s * u.matrix() / alpha;
    Ok((mu, SpdMatrix::regularized(cov)?))
}

/// Everything about a component that `fit_pcagmm` decides in one M-step.
struct ComponentStep {
    component: PcaComponent,
    weight: f64,
    offset: f64,
    solver_iters: usize,
}

/// EM for a `k`-component PCA-GMM with subspace dimension `d` and residual
/// standard deviation `sigma`.
pub fn fit_pcagmm(
    x: &Matrix,
    k: usize,
    d: usize,
    sigma: f64,
    em_config: &EmConfig,
    solver_config: &SolverConfig,
    seed: u64,
) -> Result<(PcaGmmModel, EmLog)> {
    let (n_samples, n) = x.shape();
    if k == 0 || n_samples < k {
        return Err(Error::InvalidShape(format!("need N >= K, got N = {n_samples}, K = {k}")));
    }
    if d == 0 || d > n {
        return Err(Error::InvalidShape(format!("need 1 <= d <= n, got d = {d}, n = {n}")));
    }
    let mut model = initialize(x, k, d, sigma, seed)?;
    let (_, global_cov) = sample_covariance(x);
    let ridge = eigen_floor(&global_cov);
    let reseed_template = principal_component(&global_cov, &Vector::zeros(n), d, ridge)?;

    let mut log = EmLog::default();
    for iter in 0..em_config.max_iters.max(1) {
        let (beta, objective) = pcagmm_estep_with_objective(&model, x)?;
        log.iterations.push(EmIteration { objective, ..Default::default() });
        log::debug!("pcagmm em iter {iter}: F = {objective:.6}");
        if let [.., prev, last] = log.objectives()[..] {
            if (prev - last) / last.abs().max(1e-300) < em_config.tol {
                log.converged = true;
                break;
            }
        }
        if iter + 1 == em_config.max_iters {
            break;
        }

        let steps: Vec<Option<ComponentStep>> = model
            .components
            .par_iter()
            .enumerate()
            .map(|(c, previous)| {
                let w = beta.column(c);
                let (alpha_raw, m, cm) = weighted_moments(x, &w, em_config.prune_below);
                if alpha_raw < MIN_COMPONENT_MASS.max(1e-12 * n_samples as f64) {
                    return Ok(None);
                }
                // a small ridge keeps U^T S U invertible for components
                // supported on fewer than d directions
                let c = cm + Matrix::identity(n, n) * (alpha_raw * ridge);
                let stats = SufficientStats { alpha_raw, m, c };
                mstep_component(&stats, previous, sigma, solver_config).map(Some)
            })
            .collect::<Result<_>>()?;

        let mut taken = Vec::new();
        let mut weights = Vec::with_capacity(k);
        let it = log.iterations.last_mut().expect("pushed above");
        for (c, step) in steps.into_iter().enumerate() {
            match step {
                Some(s) => {
                    weights.push(s.weight / n_samples as f64);
                    it.mean_offsets.push(s.offset);
                    it.solver_iters += s.solver_iters;
                    model.components[c] = s.component;
                }
                None => {
                    let i = least_explained_sample(&beta, &taken);
                    taken.push(i);
                    it.reseeded.push(c);
                    it.mean_offsets.push(0.0);
                    weights.push(1.0 / n_samples as f64);
                    let mut fresh = reseed_template.clone();
                    fresh.b = x.row(i).transpose();
                    model.components[c] = fresh;
                    log::warn!("pcagmm component {c} starved; reseeded at sample {i}");
                }
            }
        }
        let total: f64 = weights.iter().sum();
        model.alpha = weights.into_iter().map(|w| w / total).collect();
    }
    Ok((model, log))
}

fn mstep_component(
    stats: &SufficientStats,
    previous: &PcaComponent,
    sigma: f64,
    solver_config: &SolverConfig,
) -> Result<ComponentStep> {
    let alpha = stats.alpha_raw;
    // Shift b along span(U) so that U^T d = 0. G is unchanged along
    // ker(U^T) and at U^T d = 0 equals the exactly profiled likelihood, so
    // the warm start cannot be worse than the previous parameters.
    let u = &previous.u;
    let mean = &stats.m / alpha;
    let b_start = &previous.b + u.matrix() * (u.transpose() * (&mean - &previous.b));
    let problem = MStepProblem::new(stats.clone(), sigma)?;
    let (u_hat, b_hat, iters) = match minimize(&problem, u, &b_start, solver_config) {
        Ok(res) => (res.u, res.b, res.iterations),
        Err(e) if e.is_numerical() => {
            log::warn!("M-step solver failed ({e}); keeping the previous frame");
            (u.clone(), b_start, 0)
        }
        Err(e) => return Err(e),
    };
    let (mu, cov) = recover_component(stats, &u_hat, &b_hat)?;
    let offset = mu.norm();
    Ok(ComponentStep {
        component: PcaComponent { u: u_hat, b: b_hat, mu, cov },
        weight: alpha,
        offset,
        solver_iters: iters,
    })
}

fn eigen_floor(cov: &Matrix) -> f64 {
    (1e-6 * cov.trace() / cov.nrows() as f64).max(1e-10)
}

/// Frame of the top-`d` eigenvectors of `cov`, offset `b`, `mu = 0` and
/// `Sigma = diag(top-d eigenvalues)`.
fn principal_component(cov: &Matrix, b: &Vector, d: usize, floor: f64) -> Result<PcaComponent> {
    let (values, vectors) = sorted_symmetric_eigen(cov);
    let u = crate::linalg::project_stiefel(&vectors.columns(0, d).into_owned())?;
    let diag = Vector::from_iterator(d, values.iter().take(d).map(|&v| v.max(floor)));
    Ok(PcaComponent {
        u,
        b: b.clone(),
        mu: Vector::zeros(d),
        cov: SpdMatrix::new(Matrix::from_diagonal(&diag))?,
    })
}

/// k-means++ seeding, one nearest-seed assignment, then per-cluster PCA.
fn initialize(x: &Matrix, k: usize, d: usize, sigma: f64, seed: u64) -> Result<PcaGmmModel> {
    let mut rng = seeded_rng(seed);
    let seeds = kmeans_pp_seeds(x, k, &mut rng);
    let centers: Vec<Vector> = seeds.iter().map(|&i| x.row(i).transpose()).collect();
    let labels = assign_nearest(x, &centers);
    let (_, global_cov) = sample_covariance(x);
    let floor = eigen_floor(&global_cov);
    let components = (0..k)
        .map(|c| {
            let w = Vector::from_iterator(x.nrows(), labels.iter().map(|&l| if l == c { 1.0 } else { 0.0 }));
            let (count, mean, cov) = weighted_covariance(x, &w, 0.0);
            if count < 2.0 {
                principal_component(&global_cov, &centers[c], d, floor)
            } else {
                principal_component(&cov, &mean, d, floor)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    PcaGmmModel::new(sigma, vec![1.0 / k as f64; k], components)
}
