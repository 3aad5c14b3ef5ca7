//! Full-covariance Gaussian mixture model with the textbook EM algorithm.
//!
//! This is both the baseline mixture of the superresolution comparison and
//! the numerical foundation the PCA-reduced model builds on. All densities
//! are evaluated in the log domain.

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::em::{
    kmeans_pp_seeds, least_explained_sample, normalize_log_weights, sample_covariance,
    seeded_rng, weighted_covariance, EmConfig, EmIteration, EmLog, Responsibilities,
};
use crate::error::{Error, Result};
use crate::linalg::{Matrix, SpdMatrix, Vector};

/// Mixture weights, means and covariances of a `K`-component mixture in `R^n`.
#[derive(Clone, Debug)]
pub struct GmmParams {
    pub alpha: Vec<f64>,
    pub mu: Vec<Vector>,
    pub sigma: Vec<SpdMatrix>,
}

impl GmmParams {
    pub fn new(alpha: Vec<f64>, mu: Vec<Vector>, sigma: Vec<SpdMatrix>) -> Result<Self> {
        let k = alpha.len();
        if k == 0 || mu.len() != k || sigma.len() != k {
            return Err(Error::InvalidShape("component counts disagree".into()));
        }
        let n = mu[0].len();
        if mu.iter().any(|m| m.len() != n) || sigma.iter().any(|s| s.dim() != n) {
            return Err(Error::InvalidShape("component dimensions disagree".into()));
        }
        check_simplex(&alpha)?;
        Ok(Self { alpha, mu, sigma })
    }

    pub fn n_components(&self) -> usize {
        self.alpha.len()
    }

    pub fn dim(&self) -> usize {
        self.mu[0].len()
    }
}

pub(crate) fn check_simplex(alpha: &[f64]) -> Result<()> {
    let sum: f64 = alpha.iter().sum();
    if alpha.iter().any(|&a| !(a >= 0.0)) || (sum - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidShape(format!("weights not on the simplex (sum {sum})")));
    }
    Ok(())
}

/// `log f(x | mu, sigma)` for a single point.
pub fn gauss_logpdf(x: &Vector, mu: &Vector, sigma: &SpdMatrix) -> Result<f64> {
    let n = x.len();
    if mu.len() != n || sigma.dim() != n {
        return Err(Error::InvalidShape("density arguments disagree in dimension".into()));
    }
    let diff = x - mu;
    let quad = sigma.mahalanobis_sq(&diff);
    Ok(-0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * sigma.logdet() - 0.5 * quad)
}

/// Log-densities of every row of `x` under one Gaussian.
pub(crate) fn gauss_logpdf_rows(x: &Matrix, mu: &Vector, sigma: &SpdMatrix) -> Vector {
    let n = x.ncols();
    let mut centered = x.clone();
    for j in 0..n {
        centered.column_mut(j).add_scalar_mut(-mu[j]);
    }
    let z = centered * sigma.inverse_cholesky_factor().transpose();
    let constant = -0.5 * n as f64 * (2.0 * PI).ln() - 0.5 * sigma.logdet();
    Vector::from_iterator(z.nrows(), z.row_iter().map(|r| constant - 0.5 * r.norm_squared()))
}

fn log_weighted_densities(params: &GmmParams, x: &Matrix) -> Result<Matrix> {
    if x.ncols() != params.dim() {
        return Err(Error::InvalidShape(format!(
            "samples have dimension {}, model {}",
            x.ncols(),
            params.dim()
        )));
    }
    let cols: Vec<Vector> = (0..params.n_components())
        .into_par_iter()
        .map(|k| {
            let mut col = gauss_logpdf_rows(x, &params.mu[k], &params.sigma[k]);
            col.add_scalar_mut(params.alpha[k].ln());
            col
        })
        .collect();
    Ok(Matrix::from_columns(&cols))
}

/// E-step and negative log-likelihood in one pass.
pub(crate) fn gmm_estep_with_nll(params: &GmmParams, x: &Matrix) -> Result<(Responsibilities, f64)> {
    normalize_log_weights(log_weighted_densities(params, x)?)
}

pub fn gmm_nll(params: &GmmParams, x: &Matrix) -> Result<f64> {
    if x.nrows() == 0 {
        return Ok(0.0);
    }
    let logw = log_weighted_densities(params, x)?;
    Ok(-logw
        .row_iter()
        .map(|r| crate::em::logsumexp(r.iter().copied()))
        .sum::<f64>())
}

pub fn gmm_estep(params: &GmmParams, x: &Matrix) -> Result<Responsibilities> {
    Ok(gmm_estep_with_nll(params, x)?.0)
}

pub fn gmm_mstep(x: &Matrix, beta: &Responsibilities) -> Result<GmmParams> {
    mstep_floor(x, beta, 0.0).and_then(|parts| {
        let mut alpha = Vec::with_capacity(parts.len());
        let mut mu = Vec::with_capacity(parts.len());
        let mut sigma = Vec::with_capacity(parts.len());
        for (k, p) in parts.into_iter().enumerate() {
            let (a, m, s) = p.ok_or(Error::EmptyComponent { component: k })?;
            alpha.push(a);
            mu.push(m);
            sigma.push(s);
        }
        normalize(&mut alpha);
        GmmParams::new(alpha, mu, sigma)
    })
}

type ComponentUpdate = Option<(f64, Vector, SpdMatrix)>;

/// Per-component updates; `None` marks a component without mass.
fn mstep_floor(x: &Matrix, beta: &Responsibilities, floor: f64) -> Result<Vec<ComponentUpdate>> {
    if x.nrows() != beta.n_samples() {
        return Err(Error::InvalidShape("responsibilities do not match samples".into()));
    }
    let n_samples = x.nrows() as f64;
    (0..beta.n_components())
        .into_par_iter()
        .map(|k| {
            let w = beta.column(k);
            let (mass, mean, cov) = weighted_covariance(x, &w, floor);
            if mass < 1e-12 * n_samples {
                return Ok(None);
            }
            let sigma = SpdMatrix::regularized(cov)?;
            Ok(Some((mass / n_samples, mean, sigma)))
        })
        .collect()
}

fn normalize(alpha: &mut [f64]) {
    let s: f64 = alpha.iter().sum();
    alpha.iter_mut().for_each(|a| *a /= s);
}

/// EM for a `k`-component GMM, seeded by k-means++.
pub fn fit_gmm(x: &Matrix, k: usize, config: &EmConfig, seed: u64) -> Result<(GmmParams, EmLog)> {
    let n_samples = x.nrows();
    if k == 0 || n_samples < k {
        return Err(Error::InvalidShape(format!("need N >= K, got N = {n_samples}, K = {k}")));
    }
    let mut rng = seeded_rng(seed);
    let (_, global_cov) = sample_covariance(x);
    let global = SpdMatrix::regularized(global_cov)?;
    let seeds = kmeans_pp_seeds(x, k, &mut rng);
    let mut params = GmmParams {
        alpha: vec![1.0 / k as f64; k],
        mu: seeds.iter().map(|&i| x.row(i).transpose()).collect(),
        sigma: vec![global.clone(); k],
    };

    let mut log = EmLog::default();
    for iter in 0..config.max_iters.max(1) {
        let (beta, nll) = gmm_estep_with_nll(&params, x)?;
        log.iterations.push(EmIteration { objective: nll, ..Default::default() });
        log::debug!("gmm em iter {iter}: nll = {nll:.6}");
        if let [.., prev, last] = log.objectives()[..] {
            if (prev - last) / last.abs().max(1e-300) < config.tol {
                log.converged = true;
                break;
            }
        }
        if iter + 1 == config.max_iters {
            break;
        }
        let updates = mstep_floor(x, &beta, config.prune_below)?;
        let mut taken = Vec::new();
        let mut reseeded = Vec::new();
        let mut alpha = Vec::with_capacity(k);
        for (c, update) in updates.into_iter().enumerate() {
            match update {
                Some((a, m, s)) => {
                    alpha.push(a);
                    params.mu[c] = m;
                    params.sigma[c] = s;
                }
                None => {
                    let i = least_explained_sample(&beta, &taken);
                    taken.push(i);
                    reseeded.push(c);
                    alpha.push(1.0 / n_samples as f64);
                    params.mu[c] = x.row(i).transpose();
                    params.sigma[c] = global.clone();
                    log::warn!("gmm component {c} starved; reseeded at sample {i}");
                }
            }
        }
        normalize(&mut alpha);
        params.alpha = alpha;
        if let Some(last) = log.iterations.last_mut() {
            last.reseeded = reseeded;
        }
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::weighted_covariance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal<R: rand::Rng>(rng: &mut R) -> f64 {
        StandardNormal.sample(rng)
    }

    fn spd(m: Matrix) -> SpdMatrix {
        SpdMatrix::new(m).unwrap()
    }

    fn inverse3(m: &Matrix) -> (f64, Matrix) {
        let det = m[(0, 0)] * (m[(1, 1)] * m[(2, 2)] - m[(1, 2)] * m[(2, 1)])
            - m[(0, 1)] * (m[(1, 0)] * m[(2, 2)] - m[(1, 2)] * m[(2, 0)])
            + m[(0, 2)] * (m[(1, 0)] * m[(2, 1)] - m[(1, 1)] * m[(2, 0)]);
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| {
            m[(r0, c0)] * m[(r1, c1)] - m[(r0, c1)] * m[(r1, c0)]
        };
        let adj = Matrix::from_row_slice(
            3,
            3,
            &[
                cof(1, 2, 1, 2),
                -cof(0, 2, 1, 2),
                cof(0, 1, 1, 2),
                -cof(1, 2, 0, 2),
                cof(0, 2, 0, 2),
                -cof(0, 1, 0, 2),
                cof(1, 2, 0, 1),
                -cof(0, 2, 0, 1),
                cof(0, 1, 0, 1),
            ],
        );
        (det, adj / det)
    }

    fn random_params(k: usize, n: usize, rng: &mut ChaCha8Rng) -> GmmParams {
        let mut alpha: Vec<f64> = (0..k).map(|_| 0.5 + rand::Rng::random::<f64>(rng)).collect();
        normalize(&mut alpha);
        let mu = (0..k)
            .map(|_| Vector::from_fn(n, |_, _| 2.0 * normal(rng)))
            .collect();
        let sigma = (0..k)
            .map(|_| {
                let a = Matrix::from_fn(n, n, |_, _| normal(rng));
                spd(&a * a.transpose() * 0.3 + Matrix::identity(n, n) * 0.5)
            })
            .collect();
        GmmParams::new(alpha, mu, sigma).unwrap()
    }

    fn random_samples(count: usize, n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(count, n, |_, _| scale * normal(rng))
    }

    #[test]
    fn logpdf_examples() {
        let mu = Vector::from_vec(vec![0.3, -1.0, 2.0, 0.0]);
        let v = gauss_logpdf(&mu, &mu, &spd(Matrix::identity(4, 4))).unwrap();
        assert!((v + 2.0 * (2.0 * PI).ln()).abs() < 1e-14);

        let zero = Vector::zeros(1);
        let v = gauss_logpdf(&zero, &zero, &spd(Matrix::identity(1, 1))).unwrap();
        assert!((v + 0.9189385332046727).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let p = random_params(1, 3, &mut rng);
            let x = Vector::from_fn(3, |_, _| normal(&mut rng));
            let (det, inv) = inverse3(p.sigma[0].matrix());
            let diff = &x - &p.mu[0];
            let quad = (diff.transpose() * inv * &diff)[(0, 0)];
            let direct = ((2.0 * PI).powi(3) * det).sqrt().recip().ln() - 0.5 * quad;
            let v = gauss_logpdf(&x, &p.mu[0], &p.sigma[0]).unwrap();
            assert!((v - direct).abs() < 1e-10 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn batched_logpdf_matches_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_params(1, 5, &mut rng);
        let x = random_samples(30, 5, 2.0, &mut rng);
        let rows = gauss_logpdf_rows(&x, &p.mu[0], &p.sigma[0]);
        for i in 0..30 {
            let single = gauss_logpdf(&x.row(i).transpose(), &p.mu[0], &p.sigma[0]).unwrap();
            assert!((rows[i] - single).abs() < 1e-10 * single.abs().max(1.0));
        }
    }

    #[test]
    fn nll_examples() {
        let mu = Vector::from_vec(vec![1.0, 2.0]);
        let p = GmmParams::new(vec![1.0], vec![mu.clone()], vec![spd(Matrix::identity(2, 2))]).unwrap();
        let x = Matrix::from_row_slice(1, 2, mu.as_slice());
        assert!((gmm_nll(&p, &x).unwrap() - (2.0 * PI).ln()).abs() < 1e-14);
        assert_eq!(gmm_nll(&p, &Matrix::zeros(0, 2)).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = random_params(2, 1, &mut rng);
        let x = random_samples(10, 1, 1.5, &mut rng);
        let naive: f64 = -(0..10)
            .map(|i| {
                (0..2)
                    .map(|k| {
                        let s = p.sigma[k][(0, 0)];
                        let d = x[(i, 0)] - p.mu[k][0];
                        p.alpha[k] * (-(d * d) / (2.0 * s)).exp() / (2.0 * PI * s).sqrt()
                    })
                    .sum::<f64>()
                    .ln()
            })
            .sum::<f64>();
        let v = gmm_nll(&p, &x).unwrap();
        assert!((v - naive).abs() < 1e-10 * naive.abs());
    }

    #[test]
    fn estep_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_samples(12, 2, 1.0, &mut rng);
        let one = random_params(1, 2, &mut rng);
        let beta = gmm_estep(&one, &x).unwrap();
        assert!(beta.matrix().iter().all(|&b| b == 1.0));

        let twin = GmmParams::new(
            vec![0.5, 0.5],
            vec![one.mu[0].clone(), one.mu[0].clone()],
            vec![one.sigma[0].clone(), one.sigma[0].clone()],
        )
        .unwrap();
        let beta = gmm_estep(&twin, &x).unwrap();
        assert!(beta.matrix().iter().all(|&b| (b - 0.5).abs() < 1e-15));

        let p = random_params(3, 2, &mut rng);
        let x = random_samples(10, 2, 2.0, &mut rng);
        let beta = gmm_estep(&p, &x).unwrap();
        for i in 0..10 {
            let xi = x.row(i).transpose();
            let dens: Vec<f64> = (0..3)
                .map(|k| p.alpha[k] * gauss_logpdf(&xi, &p.mu[k], &p.sigma[k]).unwrap().exp())
                .collect();
            let total: f64 = dens.iter().sum();
            for k in 0..3 {
                assert!((beta.matrix()[(i, k)] - dens[k] / total).abs() < 1e-10);
            }
            assert!((beta.matrix().row(i).sum() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn mstep_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_samples(40, 3, 1.0, &mut rng);
        let beta = Responsibilities::new(Matrix::from_element(40, 1, 1.0)).unwrap();
        let p = gmm_mstep(&x, &beta).unwrap();
        let mean = x.row_mean().transpose();
        assert!((&p.mu[0] - &mean).norm() < 1e-12);
        let mut cov = Matrix::zeros(3, 3);
        for i in 0..40 {
            let d = x.row(i).transpose() - &mean;
            cov += &d * d.transpose();
        }
        cov /= 40.0;
        assert!((p.sigma[0].matrix() - cov).norm() < 1e-12);

        // hard partition
        let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let hard = Matrix::from_fn(40, 2, |i, k| if labels[i] == k { 1.0 } else { 0.0 });
        let p = gmm_mstep(&x, &Responsibilities::new(hard).unwrap()).unwrap();
        for k in 0..2 {
            let rows: Vec<usize> = (0..40).filter(|&i| labels[i] == k).collect();
            let mean: Vector = rows.iter().map(|&i| x.row(i).transpose()).sum::<Vector>() / 20.0;
            let mut cov = Matrix::zeros(3, 3);
            for &i in &rows {
                let d = x.row(i).transpose() - &mean;
                cov += &d * d.transpose();
            }
            cov /= 20.0;
            assert!((p.alpha[k] - 0.5).abs() < 1e-15);
            assert!((&p.mu[k] - mean).norm() < 1e-12);
            assert!((p.sigma[k].matrix() - cov).norm() < 1e-12);
        }

        let same = Matrix::from_fn(5, 2, |_, j| j as f64 + 0.25);
        let beta = Responsibilities::new(Matrix::from_element(5, 1, 1.0)).unwrap();
        let p = gmm_mstep(&same, &beta).unwrap();
        assert!(p.sigma[0][(0, 0)] > 0.0 && p.sigma[0][(0, 0)] < 1e-9);

        let starved = Matrix::from_fn(5, 2, |_, k| if k == 0 { 1.0 } else { 0.0 });
        assert!(matches!(
            gmm_mstep(&same, &Responsibilities::new(starved).unwrap()),
            Err(Error::EmptyComponent { component: 1 })
        ));
    }

    #[test]
    fn single_component_em_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_samples(50, 3, 1.0, &mut rng);
        let ones = Vector::from_element(50, 1.0);
        let (_, mean, cov) = weighted_covariance(&x, &ones, 0.0);
        let p = GmmParams::new(vec![1.0], vec![mean.clone()], vec![spd(cov.clone())]).unwrap();
        let next = gmm_mstep(&x, &gmm_estep(&p, &x).unwrap()).unwrap();
        assert!((&next.mu[0] - mean).norm() < 1e-12);
        assert!((next.sigma[0].matrix() - cov).norm() < 1e-12);
    }

    #[test]
    fn fit_recovers_single_gaussian_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let truth = Vector::from_vec(vec![1.0, -2.0]);
        let count = 2000;
        let x = Matrix::from_fn(count, 2, |_, j| truth[j] + normal(&mut rng));
        let (p, log) = fit_gmm(&x, 1, &EmConfig::default(), 1).unwrap();
        let se = 1.0 / (count as f64).sqrt();
        assert!((&p.mu[0] - truth).amax() < 3.0 * se);
        assert!(log.is_monotone(1e-8));
    }

    #[test]
    fn fit_separates_two_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Matrix::from_fn(600, 1, |i, _| {
            let center = if i % 2 == 0 { -5.0 } else { 5.0 };
            center + 0.5 * normal(&mut rng)
        });
        let (p, log) = fit_gmm(&x, 2, &EmConfig::default(), 3).unwrap();
        let mut means: Vec<f64> = p.mu.iter().map(|m| m[0]).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 5.0).abs() < 0.1 && (means[1] - 5.0).abs() < 0.1);
        assert!(log.is_monotone(1e-8));
    }

    #[test]
    fn fit_with_n_equal_k_terminates() {
        let x = Matrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
        let (p, _) = fit_gmm(&x, 3, &EmConfig::default(), 0).unwrap();
        assert_eq!(p.n_components(), 3);
        assert!(fit_gmm(&x, 4, &EmConfig::default(), 0).is_err());
    }

    #[test]
    fn responsibilities_stay_stochastic_during_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_samples(300, 2, 3.0, &mut rng);
        let (p, log) = fit_gmm(&x, 4, &EmConfig { max_iters: 30, ..Default::default() }, 5).unwrap();
        let beta = gmm_estep(&p, &x).unwrap();
        for s in beta.matrix().row_iter().map(|r| r.sum()) {
            assert!((s - 1.0).abs() < 1e-10);
        }
        assert!(log.is_monotone(1e-8), "{:?}", log.monotonicity_violations(1e-8));
    }
}
