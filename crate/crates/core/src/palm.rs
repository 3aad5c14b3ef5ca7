//! The M-step objective `G(U, b)` of a PCA-GMM component and its
//! minimization over `St(d, n) x R^n` by PALM and inertial PALM.
//!
//! With sufficient statistics `(alpha, m, C)` and the derived quantities
//! `d = m - alpha b` and `S = C - m b^T - b m^T + alpha b b^T`,
//!
//! ```text
//! G(U, b) = -(tr(U^T S U) - |d|^2 / alpha) / sigma^2
//!           - d^T U (U^T S U)^{-1} U^T d
//!           + alpha log det(U^T S U)
//! ```
//!
//! Writing `M = U^T S U`, `v = U^T d` and `w = M^{-1} v`, the partial
//! gradients are
//!
//! ```text
//! grad_U G = 2 (-S U / sigma^2 - d w^T + S U w w^T + alpha S U M^{-1})
//! grad_b G = -2 (d - U v) / sigma^2 - 2 (v^T w) U w
//! ```
//!
//! Both solvers take block-wise proximal gradient steps: a projected
//! gradient step on `U` (the proximal map of the Stiefel indicator is the
//! polar projection) followed by a gradient step on `b`. Step sizes come
//! from backtracking on a sufficient-decrease test, so the objective trace is
//! nonincreasing by construction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{project_stiefel, standard_normal_matrix, Matrix, SpdMatrix, StiefelPoint, Vector};
use crate::pcagmm::SufficientStats;

/// Curvature slack of the sufficient-decrease test: a step of inverse size
/// `tau` is accepted when it decreases `G` by `tau (1 - 1/SLACK)/2 |step|^2`.
const DECREASE_SLACK: f64 = 1.1;
/// Growth steps before a step-size search gives up.
const MAX_BACKTRACKS: usize = 60;
/// Growth steps tried on an inertial candidate before falling back to PALM.
const MAX_INERTIAL_BACKTRACKS: usize = 8;
/// Relative change of `G` below which a rejected search counts as converged.
const STALL_RESOLUTION: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct MStepProblem {
    pub stats: SufficientStats,
    pub sigma: f64,
}

impl MStepProblem {
    pub fn new(stats: SufficientStats, sigma: f64) -> Result<Self> {
        if !(stats.alpha_raw > 0.0) {
            return Err(Error::EmptyComponent { component: 0 });
        }
        if !(sigma > 0.0) {
            return Err(Error::InvalidShape(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { stats, sigma })
    }

    pub fn n(&self) -> usize {
        self.stats.m.len()
    }

    /// `d = m - alpha b`.
    pub fn offset(&self, b: &Vector) -> Vector {
        &self.stats.m - b * self.stats.alpha_raw
    }

    /// `S = C - m b^T - b m^T + alpha b b^T`, the scatter about `b`.
    pub fn scatter(&self, b: &Vector) -> Matrix {
        let st = &self.stats;
        let mbt = &st.m * b.transpose();
        &st.c - &mbt - mbt.transpose() + b * b.transpose() * st.alpha_raw
    }
}

/// Everything needed for the value and both gradients at one point.
struct Evaluation {
    value: f64,
    d: Vector,
    su: Matrix,
    m: SpdMatrix,
    v: Vector,
    w: Vector,
}

fn evaluate(problem: &MStepProblem, u: &Matrix, b: &Vector) -> Result<Evaluation> {
    let alpha = problem.stats.alpha_raw;
    let inv_var = 1.0 / (problem.sigma * problem.sigma);
    let d = problem.offset(b);
    let s = problem.scatter(b);
    let su = &s * u;
    let m = SpdMatrix::new(u.transpose() * &su)?;
    let v = u.transpose() * &d;
    let w = m.solve_vec(&v);
    let value = -inv_var * (m.trace() - d.norm_squared() / alpha) - v.dot(&w) + alpha * m.logdet();
    if !value.is_finite() {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(Evaluation { value, d, su, m, v, w })
}

impl Evaluation {
    fn grad_u(&self, problem: &MStepProblem) -> Matrix {
        let alpha = problem.stats.alpha_raw;
        let inv_var = 1.0 / (problem.sigma * problem.sigma);
        let dim = self.m.dim();
        let m_inv = self.m.solve(&Matrix::identity(dim, dim));
        let suw = &self.su * &self.w;
        (&self.su * (-inv_var) - &self.d * self.w.transpose()
            + suw * self.w.transpose()
            + &self.su * m_inv * alpha)
            * 2.0
    }

    fn grad_b(&self, problem: &MStepProblem, u: &Matrix) -> Vector {
        let inv_var = 1.0 / (problem.sigma * problem.sigma);
        let residual = &self.d - u * &self.v;
        let uw = u * &self.w;
        residual * (-2.0 * inv_var) - uw * (2.0 * self.v.dot(&self.w))
    }
}

pub fn eval_g(problem: &MStepProblem, u: &Matrix, b: &Vector) -> Result<f64> {
    check_shapes(problem, u, b)?;
    Ok(evaluate(problem, u, b)?.value)
}

pub fn grad_g_u(problem: &MStepProblem, u: &Matrix, b: &Vector) -> Result<Matrix> {
    check_shapes(problem, u, b)?;
    Ok(evaluate(problem, u, b)?.grad_u(problem))
}

pub fn grad_g_b(problem: &MStepProblem, u: &Matrix, b: &Vector) -> Result<Vector> {
    check_shapes(problem, u, b)?;
    Ok(evaluate(problem, u, b)?.grad_b(problem, u))
}

fn check_shapes(problem: &MStepProblem, u: &Matrix, b: &Vector) -> Result<()> {
    let n = problem.n();
    if u.nrows() != n || b.len() != n || u.ncols() > n || u.ncols() == 0 {
        return Err(Error::InvalidShape(format!(
            "U is {}x{}, b has {} entries, statistics live in R^{n}",
            u.nrows(),
            u.ncols(),
            b.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Extrapolation {
    /// Plain PALM.
    None,
    /// Inertial PALM with extrapolation `(r - 1)/(r + 2)` at iteration `r`.
    Dynamic,
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub max_iters: usize,
    /// Stop when `sqrt(|dU|^2 + |db|^2)` falls below this. `None` uses
    /// `1e-7 sqrt(n d + n)`.
    pub tol_step: Option<f64>,
    /// Factor applied to the previous step-size estimate before each search.
    pub backtrack_factor: f64,
    /// Factor by which the Lipschitz estimate grows on a rejected step.
    pub lipschitz_growth: f64,
    pub extrapolation: Extrapolation,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol_step: None,
            backtrack_factor: 0.5,
            lipschitz_growth: 2.0,
            extrapolation: Extrapolation::Dynamic,
        }
    }
}

impl SolverConfig {
    pub fn palm() -> Self {
        Self { extrapolation: Extrapolation::None, ..Self::default() }
    }

    fn validate(&self) -> Result<()> {
        let ok = self.max_iters > 0
            && self.tol_step.is_none_or(|t| t > 0.0)
            && self.backtrack_factor > 0.0
            && self.backtrack_factor < 1.0
            && self.lipschitz_growth > 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidShape(format!("invalid solver configuration {self:?}")))
        }
    }

    fn tolerance(&self, n: usize, d: usize) -> f64 {
        self.tol_step.unwrap_or_else(|| 1e-7 * ((n * d + n) as f64).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct SolverResult {
    pub u: StiefelPoint,
    pub b: Vector,
    /// `G` at the start and after every iteration.
    pub trace: Vec<f64>,
    pub iterations: usize,
    /// Iterations whose inertial step had to be replaced by a PALM step.
    pub fallbacks: usize,
}

pub fn palm_minimize(
    problem: &MStepProblem,
    u0: &StiefelPoint,
    b0: &Vector,
    config: &SolverConfig,
) -> Result<SolverResult> {
    let config = SolverConfig { extrapolation: Extrapolation::None, ..config.clone() };
    minimize(problem, u0, b0, &config)
}

pub fn ipalm_minimize(
    problem: &MStepProblem,
    u0: &StiefelPoint,
    b0: &Vector,
    config: &SolverConfig,
) -> Result<SolverResult> {
    minimize(problem, u0, b0, config)
}

/// Dispatches on `config.extrapolation`.
pub fn minimize(
    problem: &MStepProblem,
    u0: &StiefelPoint,
    b0: &Vector,
    config: &SolverConfig,
) -> Result<SolverResult> {
    config.validate()?;
    check_shapes(problem, u0, b0)?;
    let (n, d) = (u0.n(), u0.d());
    let tol = config.tolerance(n, d);

    let (mut u, mut current) = match evaluate(problem, u0, b0) {
        Ok(e) => (u0.clone(), e),
        Err(Error::NotPositiveDefinite) => {
            let perturbed = perturb(u0)?;
            let e = evaluate(problem, &perturbed, b0)?;
            log::debug!("M-step start perturbed to escape a degenerate U^T S U");
            (perturbed, e)
        }
        Err(e) => return Err(e),
    };
    let mut b = b0.clone();
    let mut u_prev = u.clone().into_matrix();
    let mut b_prev = b.clone();
    let mut tau_u = initial_lipschitz_u(problem, &u, &b, &current);
    let mut tau_b = initial_lipschitz_b(problem, &u, &b, &current);
    let mut trace = vec![current.value];
    let mut fallbacks = 0;
    let mut iterations = 0;

    for r in 1..=config.max_iters {
        iterations = r;
        let gamma = match config.extrapolation {
            Extrapolation::None => 0.0,
            Extrapolation::Dynamic => (r as f64 - 1.0) / (r as f64 + 2.0),
        };

        // U block
        let mut u_step = None;
        if gamma > 0.0 {
            let y = u.matrix() + (u.matrix() - &u_prev) * gamma;
            if let Ok(at_y) = evaluate(problem, &y, &b) {
                let grad = at_y.grad_u(problem);
                u_step = search_u(problem, &u, &b, &y, &grad, current.value, tau_u, config, MAX_INERTIAL_BACKTRACKS)?
                    .accepted();
            }
            if u_step.is_none() {
                fallbacks += 1;
            }
        }
        let u_step = match u_step {
            Some(step) => Search::Accepted(step),
            None => {
                let grad = current.grad_u(problem);
                search_u(problem, &u, &b, u.matrix(), &grad, current.value, tau_u, config, MAX_BACKTRACKS)?
            }
        };
        let mut du = 0.0;
        match u_step {
            Search::Accepted((u_next, at_u_next, tau)) => {
                tau_u = tau;
                du = (u_next.matrix() - u.matrix()).norm_squared();
                u_prev = std::mem::replace(&mut u, u_next).into_matrix();
                current = at_u_next;
            }
            ref rejected if stalled(rejected, current.value) => {
                u_prev = u.matrix().clone();
            }
            Search::Rejected { .. } => return Err(Error::LineSearchFailed { halvings: MAX_BACKTRACKS }),
        }

        // b block
        let mut b_step = None;
        if gamma > 0.0 {
            let y = &b + (&b - &b_prev) * gamma;
            if let Ok(at_y) = evaluate(problem, &u, &y) {
                let grad = at_y.grad_b(problem, &u);
                b_step = search_b(problem, &u, &b, &y, &grad, current.value, tau_b, config, MAX_INERTIAL_BACKTRACKS)?
                    .accepted();
            }
        }
        let b_step = match b_step {
            Some(step) => Search::Accepted(step),
            None => {
                let grad = current.grad_b(problem, &u);
                search_b(problem, &u, &b, &b, &grad, current.value, tau_b, config, MAX_BACKTRACKS)?
            }
        };
        let mut db = 0.0;
        match b_step {
            Search::Accepted((b_next, at_b_next, tau)) => {
                tau_b = tau;
                db = (&b_next - &b).norm_squared();
                b_prev = std::mem::replace(&mut b, b_next);
                current = at_b_next;
            }
            ref rejected if stalled(rejected, current.value) => {
                b_prev = b.clone();
            }
            Search::Rejected { .. } => return Err(Error::LineSearchFailed { halvings: MAX_BACKTRACKS }),
        }

        trace.push(current.value);
        if (du + db).sqrt() < tol {
            break;
        }
    }

    Ok(SolverResult { u, b, trace, iterations, fallbacks })
}

type UStep = (StiefelPoint, Evaluation, f64);
type BStep = (Vector, Evaluation, f64);

enum Search<T> {
    Accepted(T),
    /// No trial was accepted. Carries the largest increase of `G` over the
    /// trials that could be evaluated.
    Rejected { increase: f64 },
}

impl<T> Search<T> {
    fn accepted(self) -> Option<T> {
        match self {
            Search::Accepted(t) => Some(t),
            Search::Rejected { .. } => None,
        }
    }
}

/// Projected gradient step from `base`, backtracking on the Lipschitz
/// estimate until `G(U+, b) <= G(U, b) - c tau |U+ - U|^2` holds.
#[allow(clippy::too_many_arguments)]
fn search_u(
    problem: &MStepProblem,
    u: &StiefelPoint,
    b: &Vector,
    base: &Matrix,
    grad: &Matrix,
    value: f64,
    tau_prev: f64,
    config: &SolverConfig,
    budget: usize,
) -> Result<Search<UStep>> {
    let mut tau = tau_prev * config.backtrack_factor;
    let mut increase = f64::NEG_INFINITY;
    for _ in 0..=budget {
        let candidate = project_stiefel(&(base - grad / tau));
        if let Ok(next) = candidate {
            let step = (next.matrix() - u.matrix()).norm_squared();
            if let Ok(e) = evaluate(problem, &next, b) {
                if e.value <= value - sufficient_decrease(tau, step) {
                    return Ok(Search::Accepted((next, e, tau)));
                }
                increase = increase.max(e.value - value);
            }
        }
        tau *= config.lipschitz_growth;
    }
    Ok(Search::Rejected { increase })
}

#[allow(clippy::too_many_arguments)]
fn search_b(
    problem: &MStepProblem,
    u: &StiefelPoint,
    b: &Vector,
    base: &Vector,
    grad: &Vector,
    value: f64,
    tau_prev: f64,
    config: &SolverConfig,
    budget: usize,
) -> Result<Search<BStep>> {
    let mut tau = tau_prev * config.backtrack_factor;
    let mut increase = f64::NEG_INFINITY;
    for _ in 0..=budget {
        let next = base - grad / tau;
        let step = (&next - b).norm_squared();
        if let Ok(e) = evaluate(problem, u, &next) {
            if e.value <= value - sufficient_decrease(tau, step) {
                return Ok(Search::Accepted((next, e, tau)));
            }
            increase = increase.max(e.value - value);
        }
        tau *= config.lipschitz_growth;
    }
    Ok(Search::Rejected { increase })
}

/// A rejected search is a stall, not a failure, when no trial raised `G`
/// by more than `STALL_RESOLUTION` relative: the point is stationary to working precision.
fn stalled<T>(search: &Search<T>, value: f64) -> bool {
    match *search {
        Search::Accepted(_) => false,
        Search::Rejected { increase } => {
            increase.is_finite() && increase <= STALL_RESOLUTION * value.abs().max(1.0)
        }
    }
}

fn sufficient_decrease(tau: f64, step_sq: f64) -> f64 {
    0.5 * tau * (1.0 - 1.0 / DECREASE_SLACK) * step_sq
}

/// Secant estimate `|grad(x + h) - grad(x)| / |h|` along the negative
/// gradient; falls back to 1 when the probe leaves the domain.
fn initial_lipschitz_u(problem: &MStepProblem, u: &StiefelPoint, b: &Vector, at: &Evaluation) -> f64 {
    let g = at.grad_u(problem);
    let gn = g.norm();
    if !(gn > 0.0) {
        return 1.0;
    }
    let h = &g * (-1e-4 / gn);
    let probe = u.matrix() + &h;
    match evaluate(problem, &probe, b) {
        Ok(e) => positive_or_one((e.grad_u(problem) - g).norm() / h.norm()),
        Err(_) => 1.0,
    }
}

fn initial_lipschitz_b(problem: &MStepProblem, u: &StiefelPoint, b: &Vector, at: &Evaluation) -> f64 {
    let g = at.grad_b(problem, u);
    let gn = g.norm();
    if !(gn > 0.0) {
        return 1.0;
    }
    let h = &g * (-1e-4 / gn);
    let probe = b + &h;
    match evaluate(problem, u, &probe) {
        Ok(e) => positive_or_one((e.grad_b(problem, u) - g).norm() / h.norm()),
        Err(_) => 1.0,
    }
}

fn positive_or_one(v: f64) -> f64 {
    if v.is_finite() && v > 0.0 {
        v
    } else {
        1.0
    }
}

/// `Pi_St(U + 1e-6 xi)` for a random tangent direction `xi`.
fn perturb(u: &StiefelPoint) -> Result<StiefelPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let g = standard_normal_matrix(u.n(), u.d(), &mut rng);
    let utg = u.transpose() * &g;
    let tangent = &g - u.matrix() * (&utg + utg.transpose()) * 0.5;
    project_stiefel(&(u.matrix() + tangent * 1e-6))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_principal_angle, random_stiefel, sorted_symmetric_eigen};
    use rand::Rng;

    fn problem_from(c: Matrix, m: Vector, alpha: f64, sigma: f64) -> MStepProblem {
        MStepProblem::new(SufficientStats { alpha_raw: alpha, m, c }, sigma).unwrap()
    }

    fn toy() -> MStepProblem {
        problem_from(Matrix::from_diagonal(&Vector::from_vec(vec![4.0, 1.0])), Vector::zeros(2), 1.0, 1.0)
    }

    fn rotation_frame(theta: f64) -> Matrix {
        Matrix::from_column_slice(2, 1, &[theta.cos(), theta.sin()])
    }

    /// Stats of random weighted samples, so `S(b)` is SPD for every `b`.
    fn random_problem(n: usize, seed: u64) -> (MStepProblem, Matrix, Vector) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = 3 * n + 5;
        let x = standard_normal_matrix(count, n, &mut rng);
        let scale = Vector::from_fn(n, |i, _| 1.0 + i as f64 * 0.3);
        let x = Matrix::from_fn(count, n, |i, j| x[(i, j)] * scale[j] + 0.5);
        let w = Vector::from_fn(count, |_, _| rng.random_range(0.2..1.0));
        let stats = SufficientStats::from_weighted(&x, &w);
        let sigma = rng.random_range(0.3..1.5);
        (MStepProblem::new(stats, sigma).unwrap(), x, w)
    }

    #[test]
    fn value_examples() {
        let p = problem_from(Matrix::identity(5, 5), Vector::zeros(5), 1.0, 1.0);
        let u = random_stiefel(5, 3, 1).unwrap();
        assert!((eval_g(&p, &u, &Vector::zeros(5)).unwrap() + 3.0).abs() < 1e-12);

        let p = toy();
        for theta in [0.0f64, 0.4, 1.1, 2.5] {
            let t = 4.0 * theta.cos().powi(2) + theta.sin().powi(2);
            let g = eval_g(&p, &rotation_frame(theta), &Vector::zeros(2)).unwrap();
            assert!((g - (-t + t.ln())).abs() < 1e-12);
        }
        let g0 = eval_g(&p, &rotation_frame(0.0), &Vector::zeros(2)).unwrap();
        assert!((g0 - (-2.613706)).abs() < 1e-6);
    }

    #[test]
    fn value_differences_match_the_data_form() {
        use crate::pcagmm::recover_component;
        for seed in 0..10 {
            let (p, x, w) = random_problem(6, seed);
            // G1 + G2 + alpha log|Sigma| with (mu, Sigma) recovered at (U, b).
            let data_form = |u: &StiefelPoint, b: &Vector| {
                let (mu, cov) = recover_component(&p.stats, u, b).unwrap();
                let mut total = p.stats.alpha_raw * cov.logdet();
                for i in 0..x.nrows() {
                    let y = x.row(i).transpose() - b;
                    let proj = u.transpose() * &y;
                    let resid = &y - u.matrix() * &proj;
                    total += w[i] * resid.norm_squared() / (p.sigma * p.sigma);
                    total += w[i] * cov.mahalanobis_sq(&(proj - &mu));
                }
                total
            };
            let u1 = random_stiefel(6, 2, seed).unwrap();
            let u2 = random_stiefel(6, 2, seed + 100).unwrap();
            let b1 = Vector::from_element(6, 0.3);
            let b2 = Vector::from_fn(6, |i, _| 0.1 * i as f64);
            let direct = eval_g(&p, &u1, &b1).unwrap() - eval_g(&p, &u2, &b2).unwrap();
            let other = data_form(&u1, &b1) - data_form(&u2, &b2);
            assert!((direct - other).abs() < 1e-8 * direct.abs().max(1.0), "{direct} vs {other}");
        }
    }

    fn fd_grad_u(p: &MStepProblem, u: &Matrix, b: &Vector, h: f64) -> Matrix {
        Matrix::from_fn(u.nrows(), u.ncols(), |i, j| {
            let mut plus = u.clone();
            let mut minus = u.clone();
            plus[(i, j)] += h;
            minus[(i, j)] -= h;
            (eval_g(p, &plus, b).unwrap() - eval_g(p, &minus, b).unwrap()) / (2.0 * h)
        })
    }

    fn fd_grad_b(p: &MStepProblem, u: &Matrix, b: &Vector, h: f64) -> Vector {
        Vector::from_fn(b.len(), |i, _| {
            let mut plus = b.clone();
            let mut minus = b.clone();
            plus[i] += h;
            minus[i] -= h;
            (eval_g(p, u, &plus).unwrap() - eval_g(p, u, &minus).unwrap()) / (2.0 * h)
        })
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let (p, _, _) = random_problem(5, seed);
            let u = random_stiefel(5, 2, seed).unwrap();
            let b = Vector::from_fn(5, |i, _| 0.2 * i as f64 - 0.1);
            let gu = grad_g_u(&p, &u, &b).unwrap();
            let fu = fd_grad_u(&p, &u, &b, 1e-6);
            assert!((&gu - &fu).norm() / fu.norm() < 1e-5);
            let gb = grad_g_b(&p, &u, &b).unwrap();
            let fb = fd_grad_b(&p, &u, &b, 1e-6);
            assert!((&gb - &fb).norm() / fb.norm() < 1e-5);
        }
    }

    #[test]
    fn isotropic_gradient_is_normal_to_the_manifold() {
        let p = problem_from(Matrix::identity(6, 6), Vector::zeros(6), 1.0, 0.7);
        let u = random_stiefel(6, 2, 3).unwrap();
        let g = grad_g_u(&p, &u, &Vector::zeros(6)).unwrap();
        let off = &g - u.matrix() * (u.transpose() * &g);
        assert!(off.norm() < 1e-8);
    }

    #[test]
    fn chain_rule_on_the_circle() {
        let p = toy();
        let b = Vector::zeros(2);
        for theta in [0.3f64, 0.9, 1.7] {
            let t = 4.0 * theta.cos().powi(2) + theta.sin().powi(2);
            let dt = -6.0 * theta.cos() * theta.sin();
            let expected = (-1.0 + 1.0 / t) * dt;
            let du = Matrix::from_column_slice(2, 1, &[-theta.sin(), theta.cos()]);
            let g = grad_g_u(&p, &rotation_frame(theta), &b).unwrap();
            assert!((g.dot(&du) - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn centered_offset_kills_the_residual_gradient() {
        let (p, _, _) = random_problem(5, 4);
        let u = random_stiefel(5, 2, 4).unwrap();
        let b = &p.stats.m / p.stats.alpha_raw;
        let g = grad_g_b(&p, &u, &b).unwrap();
        let off = &g - u.matrix() * (u.transpose() * &g);
        assert!(off.norm() < 1e-8 * g.norm().max(1.0));
    }

    #[test]
    fn b_gradient_is_affine_along_the_residual_space() {
        let (p, _, _) = random_problem(6, 5);
        let u = random_stiefel(6, 2, 5).unwrap();
        let proj = Matrix::identity(6, 6) - u.matrix() * u.transpose();
        let b1 = Vector::from_element(6, 0.2);
        let b2 = &b1 + &proj * Vector::from_fn(6, |i, _| (i as f64).sin());
        let mid = (&b1 + &b2) * 0.5;
        let g = |b: &Vector| grad_g_b(&p, &u, b).unwrap();
        let defect = g(&b1) + g(&b2) - g(&mid) * 2.0;
        assert!(defect.norm() < 1e-9 * g(&b1).norm().max(1.0));
    }

    #[test]
    fn value_is_invariant_under_frame_rotation() {
        let (p, _, _) = random_problem(6, 6);
        let u = random_stiefel(6, 3, 6).unwrap();
        let r = random_stiefel(3, 3, 7).unwrap();
        let b = Vector::from_element(6, 0.1);
        let g1 = eval_g(&p, &u, &b).unwrap();
        let g2 = eval_g(&p, &(u.matrix() * r.matrix()), &b).unwrap();
        assert!((g1 - g2).abs() < 1e-9 * g1.abs().max(1.0));
    }

    #[test]
    fn stationary_start_terminates_immediately() {
        let p = toy();
        let u0 = StiefelPoint::new(rotation_frame(0.0)).unwrap();
        let res = palm_minimize(&p, &u0, &Vector::zeros(2), &SolverConfig::palm()).unwrap();
        assert_eq!(res.iterations, 1);
        assert!((res.trace[0] - res.trace[1]).abs() < 1e-14);
    }

    #[test]
    fn iterating_past_convergence_stalls_without_error() {
        let (p, _, _) = random_problem(6, 12);
        let u0 = random_stiefel(6, 2, 12).unwrap();
        let config = SolverConfig { max_iters: 3000, tol_step: Some(1e-300), ..Default::default() };
        let res = minimize(&p, &u0, &Vector::zeros(6), &config).unwrap();
        assert_eq!(res.iterations, 3000);
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn palm_finds_the_closed_form_minimum() {
        let p = toy();
        let u0 = StiefelPoint::new(rotation_frame(1.2)).unwrap();
        let config = SolverConfig { max_iters: 2000, ..SolverConfig::palm() };
        let res = palm_minimize(&p, &u0, &Vector::zeros(2), &config).unwrap();
        let target = -4.0 + 4f64.ln();
        assert!((res.trace.last().unwrap() - target).abs() < 1e-6);
        assert!(res.u[(0, 0)].abs() > 1.0 - 1e-6);
        assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));

        let ires = ipalm_minimize(&p, &u0, &Vector::zeros(2), &SolverConfig { max_iters: 2000, ..Default::default() }).unwrap();
        assert!((ires.trace.last().unwrap() - target).abs() < 1e-6);
        assert!(ires.iterations <= 2 * res.iterations);
    }

    #[test]
    fn ipalm_without_extrapolation_is_palm() {
        let (p, _, _) = random_problem(6, 8);
        let u0 = random_stiefel(6, 2, 8).unwrap();
        let b0 = Vector::from_element(6, 0.4);
        let a = palm_minimize(&p, &u0, &b0, &SolverConfig::palm()).unwrap();
        let b = ipalm_minimize(&p, &u0, &b0, &SolverConfig::palm()).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.u, b.u);
    }

    #[test]
    fn ipalm_descends_from_random_starts() {
        for seed in 0..20 {
            let (p, _, _) = random_problem(7, 50 + seed);
            let u0 = random_stiefel(7, 3, seed).unwrap();
            let b0 = Vector::zeros(7);
            let res = ipalm_minimize(&p, &u0, &b0, &SolverConfig::default()).unwrap();
            assert!(res.trace.last().unwrap() <= &res.trace[0]);
            assert!(res.trace.windows(2).all(|w| w[1] <= w[0]));
            assert!(crate::linalg::orthonormality_error(&res.u) <= 1e-10);
        }
    }

    #[test]
    fn palm_beats_random_search() {
        let (p, _, _) = random_problem(6, 9);
        let u0 = random_stiefel(6, 2, 9).unwrap();
        let b0 = &p.stats.m / p.stats.alpha_raw;
        let config = SolverConfig { max_iters: 500, ..SolverConfig::palm() };
        let res = palm_minimize(&p, &u0, &b0, &config).unwrap();
        let best = *res.trace.last().unwrap();
        let mean = &p.stats.m / p.stats.alpha_raw;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for s in 0..1000u64 {
            let u = random_stiefel(6, 2, 10_000 + s).unwrap();
            let shift = Vector::from_fn(6, |_, _| [-0.5, 0.0, 0.5][rng.random_range(0..3)]);
            let g = eval_g(&p, &u, &(&mean + shift)).unwrap();
            assert!(best <= g + 1e-9);
        }
    }

    #[test]
    fn small_sigma_recovers_principal_subspace() {
        let (p, _, _) = random_problem(8, 10);
        let p = MStepProblem::new(p.stats.clone(), 1e-3).unwrap();
        let mean = &p.stats.m / p.stats.alpha_raw;
        let s = p.scatter(&mean);
        let (_, vecs) = sorted_symmetric_eigen(&s);
        let top = vecs.columns(0, 3).into_owned();
        let u0 = random_stiefel(8, 3, 10).unwrap();
        let config = SolverConfig { max_iters: 3000, ..Default::default() };
        let res = ipalm_minimize(&p, &u0, &mean, &config).unwrap();
        assert!(max_principal_angle(&res.u, &top) < 0.02);
    }

    #[test]
    fn rejects_bad_configuration() {
        let p = toy();
        let u0 = StiefelPoint::new(rotation_frame(0.5)).unwrap();
        let bad = SolverConfig { lipschitz_growth: 0.5, ..Default::default() };
        assert!(palm_minimize(&p, &u0, &Vector::zeros(2), &bad).is_err());
    }
}
