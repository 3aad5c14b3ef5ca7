//! Pieces shared by both EM drivers: responsibilities, log-domain
//! normalization, configuration, iteration logs and k-means++ seeding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{Matrix, Vector};

#[derive(Clone, Debug)]
pub struct EmConfig {
    pub max_iters: usize,
    /// Stop once the relative objective decrease falls below this.
    pub tol: f64,
    /// Responsibilities at or below this value are skipped when the M-step
    /// accumulates moments. `0.0` accumulates every sample exactly.
    pub prune_below: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self { max_iters: 100, tol: 1e-5, prune_below: 1e-10 }
    }
}

#[derive(Clone, Debug, Default)]
pub struct EmIteration {
    /// Negative log-likelihood (GMM) or PCA-GMM objective of the parameters
    /// entering this iteration.
    pub objective: f64,
    /// Per-component `||U^T d||/alpha` after the M-step (PCA-GMM only).
    pub mean_offsets: Vec<f64>,
    /// Inner solver iterations summed over components (PCA-GMM only).
    pub solver_iters: usize,
    /// Components reseeded because they received no mass.
    pub reseeded: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct EmLog {
    pub iterations: Vec<EmIteration>,
    pub converged: bool,
}

impl EmLog {
    pub fn objectives(&self) -> Vec<f64> {
        self.iterations.iter().map(|it| it.objective).collect()
    }

    /// True when no logged objective exceeds its predecessor by more than
    /// `rel_slack` relative.
    pub fn is_monotone(&self, rel_slack: f64) -> bool {
        self.objectives()
            .windows(2)
            .all(|w| w[1] <= w[0] + rel_slack * w[0].abs().max(1.0))
    }

    /// `(iteration, previous, next)` for every violation of [`Self::is_monotone`].
    pub fn monotonicity_violations(&self, rel_slack: f64) -> Vec<(usize, f64, f64)> {
        self.objectives()
            .windows(2)
            .enumerate()
            .filter(|(_, w)| w[1] > w[0] + rel_slack * w[0].abs().max(1.0))
            .map(|(i, w)| (i + 1, w[0], w[1]))
            .collect()
    }
}

/// Posterior component probabilities, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Responsibilities {
    beta: Matrix,
}

impl Responsibilities {
    pub fn new(beta: Matrix) -> Result<Self> {
        for (i, row) in beta.row_iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&b| !(b >= 0.0)) || (sum - 1.0).abs() > 1e-10 {
                return Err(Error::InvalidShape(format!(
                    "responsibility row {i} is not stochastic (sum {sum})"
                )));
            }
        }
        Ok(Self { beta })
    }

    pub fn n_samples(&self) -> usize {
        self.beta.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.beta.ncols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.beta
    }

    pub fn column(&self, k: usize) -> Vector {
        self.beta.column(k).into_owned()
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.beta.column_iter().map(|c| c.sum()).collect()
    }
}

pub fn logsumexp(values: impl IntoIterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    if max == f64::INFINITY {
        return max;
    }
    max + values.into_iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes a matrix of `log(alpha_k) + log f_k(x_i)` row-wise.
/// Returns the responsibilities and `-sum_i log sum_k exp(.)`.
pub(crate) fn normalize_log_weights(mut logw: Matrix) -> Result<(Responsibilities, f64)> {
    let (n, k) = logw.shape();
    let mut nll = 0.0;
    for i in 0..n {
        let row = logw.row(i);
        let lse = logsumexp(row.iter().copied());
        if !lse.is_finite() {
            return Err(Error::DegenerateDensity { sample: i });
        }
        nll -= lse;
        for j in 0..k {
            logw[(i, j)] = (logw[(i, j)] - lse).exp();
        }
    }
    Ok((Responsibilities { beta: logw }, nll))
}

/// Weighted moments of the rows of `x`: `(sum w, sum w x, sum w x x^T)`.
/// Rows whose weight is `<= floor` are skipped.
pub(crate) fn weighted_moments(x: &Matrix, w: &Vector, floor: f64) -> (f64, Vector, Matrix) {
    let n = x.ncols();
    let active: Vec<usize> = (0..x.nrows()).filter(|&i| w[i] > floor).collect();
    let mut alpha = 0.0;
    let mut m = Vector::zeros(n);
    let mut scaled = Matrix::zeros(active.len(), n);
    for (r, &i) in active.iter().enumerate() {
        let wi = w[i];
        alpha += wi;
        let sw = wi.sqrt();
        for j in 0..n {
            let v = x[(i, j)];
            m[j] += wi * v;
            scaled[(r, j)] = sw * v;
        }
    }
    let mut c = scaled.transpose() * &scaled;
    // exact symmetry
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (c[(i, j)] + c[(j, i)]);
            c[(i, j)] = v;
            c[(j, i)] = v;
        }
    }
    (alpha, m, c)
}

/// Weighted covariance about the weighted mean, computed from centered rows.
pub(crate) fn weighted_covariance(x: &Matrix, w: &Vector, floor: f64) -> (f64, Vector, Matrix) {
    let n = x.ncols();
    let active: Vec<usize> = (0..x.nrows()).filter(|&i| w[i] > floor).collect();
    let alpha: f64 = active.iter().map(|&i| w[i]).sum();
    let mut mean = Vector::zeros(n);
    for &i in &active {
        for j in 0..n {
            mean[j] += w[i] * x[(i, j)];
        }
    }
    if alpha > 0.0 {
        mean /= alpha;
    }
    let mut scaled = Matrix::zeros(active.len(), n);
    for (r, &i) in active.iter().enumerate() {
        let sw = w[i].sqrt();
        for j in 0..n {
            scaled[(r, j)] = sw * (x[(i, j)] - mean[j]);
        }
    }
    let mut cov = scaled.transpose() * &scaled;
    if alpha > 0.0 {
        cov /= alpha;
    }
    let cov = (&cov + cov.transpose()) * 0.5;
    (alpha, mean, cov)
}

pub fn sample_covariance(x: &Matrix) -> (Vector, Matrix) {
    let w = Vector::from_element(x.nrows(), 1.0);
    let (_, mean, cov) = weighted_covariance(x, &w, 0.0);
    (mean, cov)
}

/// k-means++ seeding; returns the indices of the chosen seed rows.
pub(crate) fn kmeans_pp_seeds(x: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = x.nrows();
    let mut seeds = Vec::with_capacity(k);
    seeds.push(rng.random_range(0..n));
    let mut dist: Vec<f64> = (0..n).map(|i| row_dist_sq(x, i, seeds[0])).collect();
    while seeds.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in dist.iter().enumerate() {
                if target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        seeds.push(next);
        dist.par_iter_mut().enumerate().for_each(|(i, d)| {
            *d = d.min(row_dist_sq(x, i, next));
        });
    }
    seeds
}

/// Nearest-center labels.
pub(crate) fn assign_nearest(x: &Matrix, centers: &[Vector]) -> Vec<usize> {
    (0..x.nrows())
        .into_par_iter()
        .map(|i| {
            let mut best = (f64::INFINITY, 0);
            for (c, center) in centers.iter().enumerate() {
                let d: f64 = (0..x.ncols()).map(|j| (x[(i, j)] - center[j]).powi(2)).sum();
                if d < best.0 {
                    best = (d, c);
                }
            }
            best.1
        })
        .collect()
}

fn row_dist_sq(x: &Matrix, a: usize, b: usize) -> f64 {
    (0..x.ncols()).map(|j| (x[(a, j)] - x[(b, j)]).powi(2)).sum()
}

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sample with the smallest maximum responsibility among those not yet used.
pub(crate) fn least_explained_sample(beta: &Responsibilities, taken: &[usize]) -> usize {
    let m = beta.matrix();
    (0..m.nrows())
        .filter(|i| !taken.contains(i))
        .min_by(|&a, &b| {
            let ma = m.row(a).max();
            let mb = m.row(b).max();
            ma.total_cmp(&mb)
        })
        .unwrap_or(0)
}
