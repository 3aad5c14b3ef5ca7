//! Reference upsamplers and the PSNR metric.

use crate::error::{Error, Result};
use crate::image::Image;

/// `10 log10(1 / MSE)` for intensities in `[0, 1]`; `+inf` for identical
/// images.
pub fn psnr(reference: &Image, test: &Image) -> Result<f64> {
    if reference.dims() != test.dims() {
        return Err(Error::InvalidShape(format!(
            "extents differ: {:?} vs {:?}",
            reference.dims(),
            test.dims()
        )));
    }
    let sse: f64 = reference.data().iter().zip(test.data()).map(|(a, b)| (a - b).powi(2)).sum();
    let mse = sse / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(-10.0 * mse.log10())
}

/// Block replication by `q` along every axis.
pub fn nearest_upsample(low: &Image, q: usize) -> Image {
    let dims: Vec<usize> = low.dims().iter().map(|d| d * q).collect();
    Image::from_fn(&dims, |idx| {
        let src: Vec<usize> = idx.iter().map(|i| i / q).collect();
        low.get(&src)
    })
    .expect("extents are valid")
}

/// Keys cubic convolution kernel with `a = -0.5`.
fn cubic(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Resamples one axis of length `m` to `m q`; returns, per output index, the
/// four clamped source indices and their weights.
fn cubic_taps(m: usize, q: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..m * q)
        .map(|i| {
            let t = (i as f64 + 0.5) / q as f64 - 0.5;
            let f = t.floor();
            let frac = t - f;
            let mut idx = [0; 4];
            let mut w = [0.0; 4];
            for k in 0..4 {
                let off = k as f64 - 1.0;
                idx[k] = (f + off).clamp(0.0, (m - 1) as f64) as usize;
                w[k] = cubic(frac - off);
            }
            (idx, w)
        })
        .collect()
}

/// Separable bicubic interpolation of a 2-D image by `q`, edge clamped.
pub fn bicubic_upsample(low: &Image, q: usize) -> Result<Image> {
    if low.ndim() != 2 || q == 0 {
        return Err(Error::InvalidShape("bicubic upsampling needs a 2-D image and q >= 1".into()));
    }
    let (m, n) = (low.dims()[0], low.dims()[1]);
    let rows = cubic_taps(m, q);
    let cols = cubic_taps(n, q);
    let mut wide = vec![0.0; m * n * q];
    for i in 0..m {
        for (j, (idx, w)) in cols.iter().enumerate() {
            wide[i * n * q + j] = (0..4).map(|k| w[k] * low.get(&[i, idx[k]])).sum();
        }
    }
    Image::from_fn(&[m * q, n * q], |p| {
        let (idx, w) = &rows[p[0]];
        (0..4).map(|k| w[k] * wide[idx[k] * n * q + p[1]]).sum()
    })
}
