//! Dense 2-D images and 3-D volumes.

use crate::error::{Error, Result};

/// Real intensities on a 2-D or 3-D grid, row-major (last index fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Image {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) || dims.contains(&0) {
            return Err(Error::InvalidShape(format!("unsupported extents {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::InvalidShape(format!(
                "{} samples for extents {dims:?}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidShape(format!("sample {i} is not finite")));
        }
        Ok(Self { dims, data })
    }

    pub fn constant(dims: &[usize], value: f64) -> Result<Self> {
        Self::new(dims.to_vec(), vec![value; dims.iter().product()])
    }

    /// Builds an image from a function of the multi-index.
    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        let len: usize = dims.iter().product();
        let mut idx = vec![0; dims.len()];
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f(&idx));
            increment(&mut idx, dims);
        }
        Self::new(dims.to_vec(), data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn offset(&self, idx: &[usize]) -> usize {
        linear_offset(idx, &self.dims)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    /// Box of extents `size` starting at `origin`.
    pub fn crop(&self, origin: &[usize], size: &[usize]) -> Result<Self> {
        if origin.len() != self.ndim()
            || size.len() != self.ndim()
            || origin.iter().zip(size).zip(&self.dims).any(|((o, s), d)| o + s > *d)
        {
            return Err(Error::InvalidShape(format!(
                "crop {origin:?}+{size:?} outside {:?}",
                self.dims
            )));
        }
        Self::from_fn(size, |idx| {
            let src: Vec<usize> = idx.iter().zip(origin).map(|(i, o)| i + o).collect();
            self.get(&src)
        })
    }

    /// Copy with every sample clamped to `[0, 1]`.
    pub fn clipped(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

pub(crate) fn linear_offset(idx: &[usize], dims: &[usize]) -> usize {
    idx.iter().zip(dims).fold(0, |acc, (&i, &d)| acc * d + i)
}

/// Advances a row-major multi-index; wraps to zero after the last one.
pub(crate) fn increment(idx: &mut [usize], dims: &[usize]) {
    for a in (0..dims.len()).rev() {
        idx[a] += 1;
        if idx[a] < dims[a] {
            return;
        }
        idx[a] = 0;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validates_construction() {
        assert!(Image::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Image::new(vec![4], vec![0.0; 4]).is_err());
        assert!(Image::new(vec![1, 1], vec![f64::NAN]).is_err());
        let img = Image::from_fn(&[2, 3], |i| (10 * i[0] + i[1]) as f64).unwrap();
        assert_eq!(img.data(), &[0.0, 1.0, 2.0, 10.0, 11.0, 12.0]);
        assert_eq!(img.get(&[1, 2]), 12.0);
    }

    #[test]
    fn crop_takes_a_box() {
        let img = Image::from_fn(&[4, 4, 4], |i| (100 * i[0] + 10 * i[1] + i[2]) as f64).unwrap();
        let c = img.crop(&[1, 2, 0], &[2, 2, 3]).unwrap();
        assert_eq!(c.dims(), &[2, 2, 3]);
        assert_eq!(c.get(&[1, 1, 2]), 232.0);
        assert!(img.crop(&[3, 0, 0], &[2, 1, 1]).is_err());
    }
}
