//! Patch-wise MMSE superresolution with a joint high/low mixture model.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gmm::{gauss_logpdf_rows, GmmParams};
use crate::image::Image;
use crate::linalg::{Matrix, SpdMatrix, Vector};
use crate::patches::{aggregate, extract_low, PatchGeometry};
use crate::pcagmm::PcaGmmModel;

/// Either kind of trained mixture.
#[derive(Clone, Debug)]
pub enum Mixture {
    Gmm(GmmParams),
    PcaGmm(PcaGmmModel),
}

impl Mixture {
    pub fn n_components(&self) -> usize {
        match self {
            Mixture::Gmm(g) => g.n_components(),
            Mixture::PcaGmm(m) => m.n_components(),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Mixture::Gmm(g) => g.dim(),
            Mixture::PcaGmm(m) => m.n(),
        }
    }

    pub fn alpha(&self) -> &[f64] {
        match self {
            Mixture::Gmm(g) => &g.alpha,
            Mixture::PcaGmm(m) => &m.alpha,
        }
    }

    /// Full-dimensional means and covariances of every component.
    pub fn gaussians(&self) -> Result<Vec<(Vector, SpdMatrix)>> {
        match self {
            Mixture::Gmm(g) => Ok(g.mu.iter().cloned().zip(g.sigma.iter().cloned()).collect()),
            Mixture::PcaGmm(m) => Ok(m.lifted()?.into_iter().map(|l| (l.mu, l.cov)).collect()),
        }
    }
}

/// Blocks of one component's Gaussian split into high (`H`) and low (`L`)
/// resolution parts.
#[derive(Clone, Debug)]
pub struct ConditionalBlocks {
    /// Index of the component in the mixture.
    pub component: usize,
    pub log_alpha: f64,
    pub mu_h: Vector,
    pub mu_l: Vector,
    pub sigma_l: SpdMatrix,
    pub sigma_h: Matrix,
    /// `Sigma_HL Sigma_L^{-1}`.
    pub gain: Matrix,
}

impl ConditionalBlocks {
    /// `Sigma_H - gain Sigma_LH`.
    pub fn conditional_covariance(&self) -> Matrix {
        let sigma_lh = self.sigma_l.matrix() * self.gain.transpose();
        &self.sigma_h - &self.gain * sigma_lh
    }
}

pub fn precompute_conditionals(model: &Mixture, geom: &PatchGeometry) -> Result<Vec<ConditionalBlocks>> {
    if model.dim() != geom.n() {
        return Err(Error::InvalidShape(format!(
            "model dimension {} does not match patch dimension {}",
            model.dim(),
            geom.n()
        )));
    }
    let (nh, nl) = (geom.n_high(), geom.n_low());
    let gaussians = model.gaussians()?;
    let blocks: Vec<ConditionalBlocks> = gaussians
        .into_par_iter()
        .zip(model.alpha().par_iter())
        .enumerate()
        .filter_map(|(k, ((mu, cov), &alpha))| {
            let c = cov.matrix();
            let sigma_l = match SpdMatrix::regularized(c.view((nh, nh), (nl, nl)).into_owned()) {
                Ok(s) => s,
                Err(e) => {
                    log::warn!("component {k} excluded from selection: {e}");
                    return None;
                }
            };
            let sigma_lh = c.view((nh, 0), (nl, nh)).into_owned();
            let gain = sigma_l.solve(&sigma_lh).transpose();
            Some(ConditionalBlocks {
                component: k,
                log_alpha: alpha.ln(),
                mu_h: mu.rows(0, nh).into_owned(),
                mu_l: mu.rows(nh, nl).into_owned(),
                sigma_h: c.view((0, 0), (nh, nh)).into_owned(),
                sigma_l,
                gain,
            })
        })
        .collect();
    if blocks.is_empty() {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(blocks)
}

/// Position in `blocks` of the most likely component for each row of `x_l`.
/// Ties go to the smallest component index.
pub fn select_components(blocks: &[ConditionalBlocks], x_l: &Matrix) -> Vec<usize> {
    let scores: Vec<Vector> = blocks
        .par_iter()
        .map(|b| gauss_logpdf_rows(x_l, &b.mu_l, &b.sigma_l).add_scalar(b.log_alpha))
        .collect();
    (0..x_l.nrows())
        .map(|i| {
            let mut best = 0;
            for (j, s) in scores.iter().enumerate().skip(1) {
                if s[i] > scores[best][i] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn select_component(blocks: &[ConditionalBlocks], x_l: &Vector) -> usize {
    select_components(blocks, &Matrix::from_row_slice(1, x_l.len(), x_l.as_slice()))[0]
}

/// `mu_H + gain (x_L - mu_L)`.
pub fn mmse_patch(block: &ConditionalBlocks, x_l: &Vector) -> Vector {
    &block.mu_h + &block.gain * (x_l - &block.mu_l)
}

/// Conditional means for every row of `x_l`, grouped by selected component.
fn mmse_rows(blocks: &[ConditionalBlocks], x_l: &Matrix, choice: &[usize]) -> Matrix {
    let nh = blocks[0].mu_h.len();
    let groups: Vec<Vec<usize>> = (0..blocks.len())
        .map(|b| (0..choice.len()).filter(|&i| choice[i] == b).collect())
        .collect();
    let parts: Vec<(Vec<usize>, Matrix)> = groups
        .into_par_iter()
        .enumerate()
        .filter(|(_, rows)| !rows.is_empty())
        .map(|(b, rows)| {
            let block = &blocks[b];
            let innov = Matrix::from_fn(rows.len(), x_l.ncols(), |r, j| x_l[(rows[r], j)] - block.mu_l[j]);
            let mut est = innov * block.gain.transpose();
            for (j, m) in block.mu_h.iter().enumerate() {
                est.column_mut(j).add_scalar_mut(*m);
            }
            (rows, est)
        })
        .collect();
    let mut out = Matrix::zeros(x_l.nrows(), nh);
    for (rows, est) in parts {
        for (r, &i) in rows.iter().enumerate() {
            out.row_mut(i).copy_from(&est.row(r));
        }
    }
    out
}

/// Upscales `low` by `geom.q`: every stride-1 low patch is mapped to its
/// conditional mean under the most likely component, and the estimates are
/// blended with Gaussian weights of strength `gamma`.
pub fn reconstruct(low: &Image, model: &Mixture, geom: &PatchGeometry, gamma: f64) -> Result<Image> {
    let blocks = precompute_conditionals(model, geom)?;
    reconstruct_with(low, &blocks, geom, gamma)
}

pub fn reconstruct_with(
    low: &Image,
    blocks: &[ConditionalBlocks],
    geom: &PatchGeometry,
    gamma: f64,
) -> Result<Image> {
    if low.ndim() != geom.dims {
        return Err(Error::InvalidShape(format!("geometry is {}-D, image {}-D", geom.dims, low.ndim())));
    }
    let patches = extract_low(low, geom.tau, 1)?;
    let choice = select_components(blocks, &patches.data);
    let highs = mmse_rows(blocks, &patches.data, &choice);
    let out_dims: Vec<usize> = low.dims().iter().map(|d| d * geom.q).collect();
    aggregate(&highs, &patches.origins, geom, gamma, &out_dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::degrade;
    use crate::gmm::gauss_logpdf;
    use crate::linalg::{random_stiefel, standard_normal_matrix, StiefelPoint};
    use crate::pcagmm::PcaComponent;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> SpdMatrix {
        let a = standard_normal_matrix(d, d, rng);
        SpdMatrix::new(&a * a.transpose() * (1.0 / d as f64) + Matrix::identity(d, d) * 0.1).unwrap()
    }

    fn small_geom() -> PatchGeometry {
        PatchGeometry::new(1, 2, 2).unwrap()
    }

    fn random_gmm(k: usize, n: usize, rng: &mut ChaCha8Rng) -> GmmParams {
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.5..1.5)).collect();
        let s: f64 = raw.iter().sum();
        GmmParams::new(
            raw.iter().map(|a| a / s).collect(),
            (0..k).map(|_| Vector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))).collect(),
            (0..k).map(|_| random_spd(n, rng)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn conditional_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let geom = small_geom();
        let mut cov = Matrix::zeros(5, 5);
        cov.view_mut((0, 0), (4, 4)).copy_from(random_spd(4, &mut rng).matrix());
        cov[(4, 4)] = 2.0;
        let g = GmmParams::new(vec![1.0], vec![Vector::zeros(5)], vec![SpdMatrix::new(cov).unwrap()]).unwrap();
        let blocks = precompute_conditionals(&Mixture::Gmm(g), &geom).unwrap();
        assert_eq!(blocks[0].gain.norm(), 0.0);

        let g = random_gmm(3, 5, &mut rng);
        let model = Mixture::Gmm(g.clone());
        let blocks = precompute_conditionals(&model, &geom).unwrap();
        for (b, sigma) in blocks.iter().zip(&g.sigma) {
            let residual = &b.gain * b.sigma_l.matrix() - sigma.matrix().view((0, 4), (4, 1));
            assert!(residual.norm() < 1e-9);
        }

        let comps: Vec<_> = g
            .mu
            .iter()
            .zip(&g.sigma)
            .map(|(mu, s)| PcaComponent {
                u: StiefelPoint::identity(5, 5),
                b: Vector::zeros(5),
                mu: mu.clone(),
                cov: s.clone(),
            })
            .collect();
        let pca = Mixture::PcaGmm(PcaGmmModel::new(0.2, g.alpha.clone(), comps).unwrap());
        let lifted = precompute_conditionals(&pca, &geom).unwrap();
        for (a, b) in blocks.iter().zip(&lifted) {
            assert!((&a.gain - &b.gain).norm() < 1e-12);
            assert!((a.sigma_l.matrix() - b.sigma_l.matrix()).norm() < 1e-12);
        }
        let wrong = PatchGeometry::new(2, 2, 2).unwrap();
        assert!(precompute_conditionals(&model, &wrong).is_err());
    }

    #[test]
    fn selection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geom = small_geom();
        let one = precompute_conditionals(&Mixture::Gmm(random_gmm(1, 5, &mut rng)), &geom).unwrap();
        assert_eq!(select_component(&one, &Vector::from_element(1, 3.0)), 0);

        let sigma = SpdMatrix::new(Matrix::identity(5, 5)).unwrap();
        let g = GmmParams::new(
            vec![0.5, 0.5],
            vec![Vector::from_element(5, -10.0), Vector::from_element(5, 10.0)],
            vec![sigma.clone(), sigma],
        )
        .unwrap();
        let two = precompute_conditionals(&Mixture::Gmm(g), &geom).unwrap();
        assert_eq!(select_component(&two, &Vector::from_element(1, 10.0)), 1);
        assert_eq!(select_component(&two, &Vector::from_element(1, -10.0)), 0);
        assert_eq!(select_component(&two, &Vector::from_element(1, 0.0)), 0);

        let g = random_gmm(3, 5, &mut rng);
        let blocks = precompute_conditionals(&Mixture::Gmm(g.clone()), &geom).unwrap();
        let mut scaled = blocks.clone();
        scaled.iter_mut().for_each(|b| b.log_alpha += 3.7f64.ln());
        for _ in 0..100 {
            let x = Vector::from_element(1, rng.random_range(-3.0..3.0));
            let naive = (0..3)
                .map(|k| {
                    let s = SpdMatrix::new(g.sigma[k].matrix().view((4, 4), (1, 1)).into_owned()).unwrap();
                    g.alpha[k] * gauss_logpdf(&x, &g.mu[k].rows(4, 1).into_owned(), &s).unwrap().exp()
                })
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, v)| if v > best.1 { (k, v) } else { best })
                .0;
            assert_eq!(select_component(&blocks, &x), naive);
            assert_eq!(select_component(&scaled, &x), naive);
        }
    }

    #[test]
    fn mmse_examples() {
        let geom = PatchGeometry::new(1, 2, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_gmm(1, 5, &mut rng);
        let blocks = precompute_conditionals(&Mixture::Gmm(g), &geom).unwrap();
        let b = &blocks[0];
        assert!((mmse_patch(b, &b.mu_l) - &b.mu_h).norm() < 1e-15);

        let x1 = Vector::from_element(1, 0.3);
        let x2 = Vector::from_element(1, -1.1);
        let mid = (&x1 + &x2) / 2.0;
        let second = mmse_patch(b, &x1) + mmse_patch(b, &x2) - mmse_patch(b, &mid) * 2.0;
        assert!(second.norm() < 1e-10);

        let scalar = ConditionalBlocks {
            component: 0,
            log_alpha: 0.0,
            mu_h: Vector::zeros(1),
            mu_l: Vector::zeros(1),
            sigma_l: SpdMatrix::new(Matrix::from_element(1, 1, 1.0)).unwrap(),
            sigma_h: Matrix::from_element(1, 1, 2.0),
            gain: Matrix::from_element(1, 1, 1.0),
        };
        assert_eq!(mmse_patch(&scalar, &Vector::from_element(1, 1.0))[0], 1.0);
        assert_eq!(scalar.conditional_covariance()[(0, 0)], 1.0);

        let mut flat = b.clone();
        flat.gain.fill(0.0);
        assert_eq!(mmse_patch(&flat, &Vector::from_element(1, 9.0)), flat.mu_h);
    }

    #[test]
    fn constant_model_reconstructs_constants() {
        let geom = PatchGeometry::new(2, 2, 2).unwrap();
        let n = geom.n();
        let g = GmmParams::new(
            vec![1.0],
            vec![Vector::from_element(n, 0.6)],
            vec![SpdMatrix::new(Matrix::identity(n, n) * 1e-3).unwrap()],
        )
        .unwrap();
        let low = Image::constant(&[5, 6], 0.6).unwrap();
        let out = reconstruct(&low, &Mixture::Gmm(g), &geom, 0.1).unwrap();
        assert_eq!(out.dims(), &[10, 12]);
        assert!(out.data().iter().all(|v| (v - 0.6).abs() < 1e-12));
    }

    #[test]
    fn pca_path_with_full_frame_agrees_with_gmm() {
        let geom = PatchGeometry::new(2, 2, 2).unwrap();
        let n = geom.n();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let g = random_gmm(2, n, &mut rng);
        let comps = g
            .mu
            .iter()
            .zip(&g.sigma)
            .map(|(mu, s)| PcaComponent {
                u: StiefelPoint::identity(n, n),
                b: Vector::zeros(n),
                mu: mu.clone(),
                cov: s.clone(),
            })
            .collect();
        let pca = Mixture::PcaGmm(PcaGmmModel::new(0.5, g.alpha.clone(), comps).unwrap());
        let low = Image::from_fn(&[6, 6], |_| rng.random()).unwrap();
        let a = reconstruct(&low, &Mixture::Gmm(g), &geom, 0.1).unwrap();
        let b = reconstruct(&low, &pca, &geom, 0.1).unwrap();
        let err = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8);
    }

    #[test]
    fn joint_gaussian_beats_nearest_neighbour() {
        use crate::baselines::{nearest_upsample, psnr};
        use crate::em::sample_covariance;
        use crate::patches::extract_pairs;

        // smooth random fields: low-pass filtered noise
        let field = |seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Image::from_fn(&[64, 64], |_| rng.random()).unwrap();
            let smooth = crate::degrade::gauss_blur(&noise, 2.0).unwrap();
            let (lo, hi) = smooth.data().iter().fold((f64::MAX, f64::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            Image::new(vec![64, 64], smooth.data().iter().map(|v| (v - lo) / (hi - lo)).collect()).unwrap()
        };
        let geom = PatchGeometry::new(3, 2, 2).unwrap();
        let train = field(1);
        let train_low = degrade(&train, 2, 0.5, 0.01, 1).unwrap();
        let set = extract_pairs(&train, &train_low, &geom, 1, usize::MAX, 0).unwrap();
        let (mean, cov) = sample_covariance(&set.data);
        let g = GmmParams::new(vec![1.0], vec![mean], vec![SpdMatrix::regularized(cov).unwrap()]).unwrap();

        let test = field(2);
        let low = degrade(&test, 2, 0.5, 0.01, 2).unwrap();
        let ours = psnr(&test, &reconstruct(&low, &Mixture::Gmm(g), &geom, 0.1).unwrap()).unwrap();
        let nearest = psnr(&test, &nearest_upsample(&low, 2)).unwrap();
        assert!(ours > nearest, "{ours} vs {nearest}");
    }

    #[test]
    fn reconstruction_covers_every_pixel_for_pca_models() {
        let geom = PatchGeometry::new(2, 2, 3).unwrap();
        let n = geom.n();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let comps = (0..2)
            .map(|s| PcaComponent {
                u: random_stiefel(n, 6, s).unwrap(),
                b: Vector::from_element(n, 0.5),
                mu: Vector::zeros(6),
                cov: random_spd(6, &mut rng),
            })
            .collect();
        let model = Mixture::PcaGmm(PcaGmmModel::new(0.05, vec![0.5, 0.5], comps).unwrap());
        let low = Image::from_fn(&[5, 3, 4], |_| rng.random()).unwrap();
        let out = reconstruct(&low, &model, &geom, 0.1).unwrap();
        assert_eq!(out.dims(), &[10, 6, 8]);
    }
}
