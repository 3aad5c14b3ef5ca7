//! Patch extraction and overlap-add aggregation.
//!
//! A joint training vector stacks the high-resolution patch of edge `q tau`
//! on top of the low-resolution patch of edge `tau` it maps to. Both
//! blocks are flattened row-major.

use rand::seq::index;
use rayon::prelude::*;

use crate::em::seeded_rng;
use crate::error::{Error, Result};
use crate::image::{increment, linear_offset, Image};
use crate::linalg::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    /// Low-resolution patch edge.
    pub tau: usize,
    /// Magnification factor.
    pub q: usize,
    /// Spatial dimension, 2 or 3.
    pub dims: usize,
}

impl PatchGeometry {
    pub fn new(tau: usize, q: usize, dims: usize) -> Result<Self> {
        if tau == 0 || q < 2 || !(2..=3).contains(&dims) {
            return Err(Error::InvalidShape(format!("bad geometry tau={tau} q={q} dims={dims}")));
        }
        Ok(Self { tau, q, dims })
    }

    pub fn high_edge(&self) -> usize {
        self.q * self.tau
    }

    pub fn n_low(&self) -> usize {
        self.tau.pow(self.dims as u32)
    }

    pub fn n_high(&self) -> usize {
        self.high_edge().pow(self.dims as u32)
    }

    /// Joint dimension `(q^dims + 1) tau^dims`.
    pub fn n(&self) -> usize {
        self.n_high() + self.n_low()
    }
}

/// Joint high/low patch vectors, one per row.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub geometry: PatchGeometry,
    pub data: Matrix,
    /// Low-resolution grid coordinates of each patch.
    pub origins: Vec<Vec<usize>>,
}

/// Low-resolution patches only.
#[derive(Clone, Debug)]
pub struct LowPatches {
    pub tau: usize,
    pub data: Matrix,
    pub origins: Vec<Vec<usize>>,
}

fn axis_origins(extent: usize, tau: usize, stride: usize, include_last: bool) -> Vec<usize> {
    let last = extent - tau;
    let mut o: Vec<usize> = (0..=last).step_by(stride).collect();
    if include_last && o.last() != Some(&last) {
        o.push(last);
    }
    o
}

fn grid(per_axis: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let counts: Vec<usize> = per_axis.iter().map(Vec::len).collect();
    let total: usize = counts.iter().product();
    let mut idx = vec![0; counts.len()];
    (0..total)
        .map(|_| {
            let o = idx.iter().zip(per_axis).map(|(&i, a)| a[i]).collect();
            increment(&mut idx, &counts);
            o
        })
        .collect()
}

/// Copies the cube of edge `edge` at `origin` into `out`, row-major.
fn copy_patch(img: &Image, origin: &[usize], edge: usize, out: &mut [f64]) {
    let dims = img.dims();
    let cube = vec![edge; dims.len()];
    let mut idx = vec![0; dims.len()];
    let mut src = vec![0; dims.len()];
    for v in out.iter_mut() {
        for a in 0..dims.len() {
            src[a] = origin[a] + idx[a];
        }
        *v = img.data()[linear_offset(&src, dims)];
        increment(&mut idx, &cube);
    }
}

fn rows_to_matrix(rows: Vec<Vec<f64>>, width: usize) -> Matrix {
    let count = rows.len();
    Matrix::from_fn(count, width, |i, j| rows[i][j])
}

fn check_stride(stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(Error::InvalidShape("stride must be positive".into()));
    }
    Ok(())
}

/// Enumerates patch pairs on the low-resolution grid with the given stride
/// and keeps a seeded uniform subset when there are more than `max_patches`.
pub fn extract_pairs(
    high: &Image,
    low: &Image,
    geom: &PatchGeometry,
    stride: usize,
    max_patches: usize,
    seed: u64,
) -> Result<PatchSet> {
    check_stride(stride)?;
    if low.ndim() != geom.dims || high.ndim() != geom.dims {
        return Err(Error::InvalidShape(format!("geometry is {}-D", geom.dims)));
    }
    if high.dims().iter().zip(low.dims()).any(|(h, l)| *h != geom.q * l) {
        return Err(Error::InvalidShape(format!(
            "high extents {:?} are not {} x low extents {:?}",
            high.dims(),
            geom.q,
            low.dims()
        )));
    }
    if low.dims().iter().any(|&l| l < geom.tau) {
        return Err(Error::InvalidShape(format!("low extents {:?} smaller than tau", low.dims())));
    }
    let per_axis: Vec<Vec<usize>> =
        low.dims().iter().map(|&e| axis_origins(e, geom.tau, stride, false)).collect();
    let mut origins = grid(&per_axis);
    if origins.len() > max_patches {
        let mut rng = seeded_rng(seed);
        let mut keep = index::sample(&mut rng, origins.len(), max_patches).into_vec();
        keep.sort_unstable();
        origins = keep.into_iter().map(|i| std::mem::take(&mut origins[i])).collect();
    }
    let (nh, n) = (geom.n_high(), geom.n());
    let rows: Vec<Vec<f64>> = origins
        .par_iter()
        .map(|o| {
            let mut row = vec![0.0; n];
            let ho: Vec<usize> = o.iter().map(|v| v * geom.q).collect();
            copy_patch(high, &ho, geom.high_edge(), &mut row[..nh]);
            copy_patch(low, o, geom.tau, &mut row[nh..]);
            row
        })
        .collect();
    Ok(PatchSet { geometry: *geom, data: rows_to_matrix(rows, n), origins })
}

/// All `tau`-patches on a strided grid, plus the last origin of every axis
/// so that the whole image is covered.
pub fn extract_low(image: &Image, tau: usize, stride: usize) -> Result<LowPatches> {
    check_stride(stride)?;
    if tau == 0 || image.dims().iter().any(|&e| e < tau) {
        return Err(Error::InvalidShape(format!("extents {:?} smaller than tau={tau}", image.dims())));
    }
    let per_axis: Vec<Vec<usize>> =
        image.dims().iter().map(|&e| axis_origins(e, tau, stride, true)).collect();
    let origins = grid(&per_axis);
    let width = tau.pow(image.ndim() as u32);
    let rows: Vec<Vec<f64>> = origins
        .par_iter()
        .map(|o| {
            let mut row = vec![0.0; width];
            copy_patch(image, o, tau, &mut row);
            row
        })
        .collect();
    Ok(LowPatches { tau, data: rows_to_matrix(rows, width), origins })
}

/// `exp(-gamma/2 sum_a (k_a - (q tau + 1)/2)^2)` with 1-based `k_a`, row-major.
pub fn patch_weights(geom: &PatchGeometry, gamma: f64) -> Vec<f64> {
    let edge = geom.high_edge();
    let centre = (edge as f64 + 1.0) / 2.0;
    let cube = vec![edge; geom.dims];
    let mut idx = vec![0; geom.dims];
    (0..geom.n_high())
        .map(|_| {
            let r2: f64 = idx.iter().map(|&k| (k as f64 + 1.0 - centre).powi(2)).sum();
            increment(&mut idx, &cube);
            (-0.5 * gamma * r2).exp()
        })
        .collect()
}

/// Weighted overlap-add of high-resolution patches placed at `q` times
/// their low-resolution origins.
pub fn aggregate(
    patches: &Matrix,
    origins: &[Vec<usize>],
    geom: &PatchGeometry,
    gamma: f64,
    out_dims: &[usize],
) -> Result<Image> {
    let edge = geom.high_edge();
    if patches.nrows() != origins.len() || patches.ncols() != geom.n_high() || out_dims.len() != geom.dims {
        return Err(Error::InvalidShape("patches do not match geometry".into()));
    }
    for o in origins {
        if o.len() != geom.dims || o.iter().zip(out_dims).any(|(v, d)| v * geom.q + edge > *d) {
            return Err(Error::InvalidShape(format!("patch at {o:?} leaves {out_dims:?}")));
        }
    }
    let weights = patch_weights(geom, gamma);
    let len: usize = out_dims.iter().product();
    let cube = vec![edge; geom.dims];
    let chunk = origins.len().div_ceil(rayon::current_num_threads()).max(1);
    let (num, den) = (0..origins.len())
        .into_par_iter()
        .with_min_len(chunk)
        .fold(
            || (vec![0.0; len], vec![0.0; len]),
            |(mut num, mut den), p| {
                let base: Vec<usize> = origins[p].iter().map(|v| v * geom.q).collect();
                let mut idx = vec![0; geom.dims];
                let mut dst = vec![0; geom.dims];
                for (j, &w) in weights.iter().enumerate() {
                    for a in 0..geom.dims {
                        dst[a] = base[a] + idx[a];
                    }
                    let off = linear_offset(&dst, out_dims);
                    num[off] += w * patches[(p, j)];
                    den[off] += w;
                    increment(&mut idx, &cube);
                }
                (num, den)
            },
        )
        .reduce(
            || (vec![0.0; len], vec![0.0; len]),
            |(mut n1, mut d1), (n2, d2)| {
                n1.iter_mut().zip(n2).for_each(|(a, b)| *a += b);
                d1.iter_mut().zip(d2).for_each(|(a, b)| *a += b);
                (n1, d1)
            },
        );
    if let Some(index) = den.iter().position(|&d| !(d > 0.0)) {
        return Err(Error::UncoveredPixel { index });
    }
    Image::new(out_dims.to_vec(), num.iter().zip(&den).map(|(n, d)| n / d).collect())
}
