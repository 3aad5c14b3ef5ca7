//! The 2-D benchmark: train on the upper-left quarter of an image, degrade
//! the whole image, reconstruct it and report PSNRs.

use crate::baselines::{bicubic_upsample, psnr};
use crate::degrade::degrade;
use crate::em::EmConfig;
use crate::error::{Error, Result};
use crate::gmm::fit_gmm;
use crate::image::Image;
use crate::palm::SolverConfig;
use crate::patches::{extract_pairs, PatchGeometry};
use crate::pcagmm::fit_pcagmm;
use crate::superres::{reconstruct, Mixture};

#[derive(Clone, Debug)]
pub struct BenchmarkConfig {
    pub q: usize,
    pub tau: usize,
    pub components: usize,
    /// Subspace dimensions of the PCA-GMM runs.
    pub reduced_dims: Vec<usize>,
    pub sigma: f64,
    pub gamma: f64,
    pub blur_std: f64,
    pub noise_std: f64,
    pub em: EmConfig,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            q: 2,
            tau: 4,
            components: 100,
            reduced_dims: vec![20, 12, 4],
            sigma: 0.02,
            gamma: 0.1,
            blur_std: 0.5,
            noise_std: 0.02,
            em: EmConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BenchmarkRow {
    /// `bicubic`, `gmm` or `pcagmm d=<d>`.
    pub method: String,
    pub psnr: f64,
    pub em_iterations: usize,
}

/// Runs bicubic, GMM and one PCA-GMM per reduced dimension on `truth`.
/// Reconstructions are clipped to `[0, 1]` before scoring.
pub fn run_benchmark(truth: &Image, config: &BenchmarkConfig) -> Result<Vec<BenchmarkRow>> {
    if truth.ndim() != 2 {
        return Err(Error::InvalidShape("the benchmark needs a 2-D image".into()));
    }
    let q = config.q;
    let dims = truth.dims();
    let quarter: Vec<usize> = dims.iter().map(|d| (d / 2) / q * q).collect();
    let train_high = truth.crop(&[0, 0], &quarter)?;
    let train_low = degrade(&train_high, q, config.blur_std, config.noise_std, config.seed)?;
    let test_low = degrade(truth, q, config.blur_std, config.noise_std, config.seed.wrapping_add(1))?;
    let geom = PatchGeometry::new(config.tau, q, 2)?;
    let pairs = extract_pairs(&train_high, &train_low, &geom, 1, usize::MAX, config.seed)?;
    log::info!("benchmark: {} training patches of dimension {}", pairs.data.nrows(), geom.n());

    let mut rows = vec![BenchmarkRow {
        method: "bicubic".into(),
        psnr: psnr(truth, &bicubic_upsample(&test_low, q)?.clipped())?,
        em_iterations: 0,
    }];
    let mut score = |method: String, model: Mixture, iters: usize| -> Result<()> {
        let out = reconstruct(&test_low, &model, &geom, config.gamma)?.clipped();
        let value = psnr(truth, &out)?;
        log::info!("benchmark: {method} {value:.2} dB after {iters} EM iterations");
        rows.push(BenchmarkRow { method, psnr: value, em_iterations: iters });
        Ok(())
    };

    let (gmm, log) = fit_gmm(&pairs.data, config.components, &config.em, config.seed)?;
    score("gmm".into(), Mixture::Gmm(gmm), log.iterations.len())?;
    for &d in &config.reduced_dims {
        let (model, log) = fit_pcagmm(
            &pairs.data,
            config.components,
            d,
            config.sigma,
            &config.em,
            &SolverConfig::default(),
            config.seed,
        )?;
        score(format!("pcagmm d={d}"), Mixture::PcaGmm(model), log.iterations.len())?;
    }
    Ok(rows)
}
