//! Forward model of the superresolution problem: Gaussian blur, Fourier
//! domain downsampling and additive white noise.

use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

use crate::em::seeded_rng;
use crate::error::{Error, Result};
use crate::image::{increment, linear_offset, Image};

/// Sampled Gaussian of radius `ceil(4 std)`, normalized to unit sum.
pub fn gauss_kernel(std: f64) -> Vec<f64> {
    let radius = (4.0 * std).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * std * std)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with periodic boundaries.
pub fn gauss_blur(x: &Image, std: f64) -> Result<Image> {
    if !(std > 0.0) {
        return Err(Error::InvalidShape(format!("blur std must be positive, got {std}")));
    }
    let kernel = gauss_kernel(std);
    let radius = (kernel.len() / 2) as i64;
    let dims = x.dims().to_vec();
    let mut data = x.data().to_vec();
    for axis in 0..dims.len() {
        let len = dims[axis];
        for_each_line(&dims, axis, |offsets| {
            let line: Vec<f64> = offsets.iter().map(|&o| data[o]).collect();
            for (i, &o) in offsets.iter().enumerate() {
                data[o] = kernel
                    .iter()
                    .enumerate()
                    .map(|(t, w)| w * line[(i as i64 + t as i64 - radius).rem_euclid(len as i64) as usize])
                    .sum();
            }
        });
    }
    Image::new(dims, data)
}

/// Calls `f` with the flat offsets of every line of the grid along `axis`.
fn for_each_line(dims: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let stride: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let len = dims[axis];
    let mut offsets = vec![0; len];
    for o in 0..outer {
        for inner in 0..stride {
            let start = o * len * stride + inner;
            for (i, off) in offsets.iter_mut().enumerate() {
                *off = start + i * stride;
            }
            f(&offsets);
        }
    }
}

fn fft_all_axes(buf: &mut [Complex64], dims: &[usize], inverse: bool) {
    let mut planner = FftPlanner::new();
    for axis in 0..dims.len() {
        let fft: Arc<dyn Fft<f64>> = if inverse {
            planner.plan_fft_inverse(dims[axis])
        } else {
            planner.plan_fft_forward(dims[axis])
        };
        let mut line = vec![Complex64::default(); dims[axis]];
        for_each_line(dims, axis, |offsets| {
            for (v, &o) in line.iter_mut().zip(offsets) {
                *v = buf[o];
            }
            fft.process(&mut line);
            for (v, &o) in line.iter().zip(offsets) {
                buf[o] = *v;
            }
        });
    }
}

/// Number of leading frequencies kept when an axis of `m` shrinks to `m2`.
/// The remaining `m2 - low` output frequencies come from the top of the
/// input spectrum. For `8 -> 4`:
///
/// ```text
/// output index  0 1 2 3
/// input index   0 1 6 7
/// ```
fn low_count(m2: usize) -> usize {
    m2.div_ceil(2)
}

fn source_index(i: usize, m: usize, m2: usize) -> usize {
    if i < low_count(m2) { i } else { i + m - m2 }
}

/// Truncates the spectrum of `x` to `out_dims`, scaled so constants are
/// preserved, and returns the real part of the result.
pub fn dft_downsample(x: &Image, out_dims: &[usize]) -> Result<Image> {
    let dims = x.dims();
    if out_dims.len() != dims.len() || out_dims.iter().zip(dims).any(|(o, d)| *o == 0 || o > d) {
        return Err(Error::InvalidShape(format!("cannot downsample {dims:?} to {out_dims:?}")));
    }
    let mut spec: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_all_axes(&mut spec, dims, false);

    let out_len: usize = out_dims.iter().product();
    let mut out = Vec::with_capacity(out_len);
    let mut idx = vec![0; dims.len()];
    let mut src = vec![0; dims.len()];
    for _ in 0..out_len {
        for a in 0..dims.len() {
            src[a] = source_index(idx[a], dims[a], out_dims[a]);
        }
        out.push(spec[linear_offset(&src, dims)]);
        increment(&mut idx, out_dims);
    }
    fft_all_axes(&mut out, out_dims, true);
    // (prod m2 / prod m) times the normalized inverse, whose 1/prod m2 cancels
    let scale = 1.0 / x.len() as f64;
    Image::new(out_dims.to_vec(), out.iter().map(|c| c.re * scale).collect())
}

/// `y = S(H x) + noise`. The result is not clipped.
pub fn degrade(x: &Image, q: usize, blur_std: f64, noise_std: f64, seed: u64) -> Result<Image> {
    if q < 2 {
        return Err(Error::InvalidShape(format!("factor must be at least 2, got {q}")));
    }
    if x.dims().iter().any(|d| d % q != 0) {
        return Err(Error::InvalidShape(format!("extents {:?} not divisible by {q}", x.dims())));
    }
    if !(noise_std >= 0.0) || !(blur_std >= 0.0) {
        return Err(Error::InvalidShape("standard deviations must be nonnegative".into()));
    }
    let blurred = if blur_std > 0.0 { gauss_blur(x, blur_std)? } else { x.clone() };
    let out_dims: Vec<usize> = x.dims().iter().map(|d| d / q).collect();
    let y = dft_downsample(&blurred, &out_dims)?;
    if noise_std == 0.0 {
        return Ok(y);
    }
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, noise_std).expect("finite std");
    let data = y.data().iter().map(|v| v + normal.sample(&mut rng)).collect();
    Image::new(out_dims, data)
}
