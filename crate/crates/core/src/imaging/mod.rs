//! Images and volumes, Gaussian pyramids and differentiable warping.
//!
//! All geometry happens in canonical coordinates: pixel index `p` on an axis
//! of `n` samples sits at `−1 + 2p/(n−1)`. Every pyramid level shares this
//! frame, so one transform matrix means the same thing at every resolution.

mod io;
mod pyramid;
mod warp;

pub use io::{load_image, save_image, RawSidecar};
pub use pyramid::{build_pyramid, gaussian_kernel, ImagePyramid};
pub use warp::{
    canonical_grid, sample_points, sample_points_var, warp, warp_points_var, warp_var,
    warp_with_fill,
};
pub(crate) use warp::gradcheck_cases;

use crate::error::{Error, Result};

/// Dense image or volume. `dims` is `[width, height]` or `[width, height, depth]`;
/// samples are stored x-fastest with channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    dims: Vec<usize>,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(dims: Vec<usize>, channels: usize, data: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) || dims.contains(&0) || channels == 0 {
            return Err(Error::Dimension(format!(
                "unsupported image shape {dims:?} with {channels} channels"
            )));
        }
        let expected = dims.iter().product::<usize>() * channels;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "image {dims:?}x{channels} needs {expected} samples, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("image contains non-finite samples".into()));
        }
        Ok(Self {
            dims,
            channels,
            data,
        })
    }

    pub fn filled(dims: Vec<usize>, channels: usize, value: f64) -> Result<Self> {
        let n = dims.iter().product::<usize>() * channels;
        Self::new(dims, channels, vec![value; n])
    }

    /// Builds an image by evaluating `f(pixel_index, channel)`.
    pub fn from_fn(
        dims: Vec<usize>,
        channels: usize,
        mut f: impl FnMut(&[usize], usize) -> f64,
    ) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        let mut data = Vec::with_capacity(n * channels);
        let mut idx = vec![0; dims.len()];
        for lin in 0..n {
            unravel(lin, &dims, &mut idx);
            for c in 0..channels {
                data.push(f(&idx, c));
            }
        }
        Self::new(dims, channels, data)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn n_pixels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn width(&self) -> usize {
        self.dims[0]
    }

    pub fn height(&self) -> usize {
        self.dims[1]
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        let mut lin = 0;
        for a in (0..self.dims.len()).rev() {
            lin = lin * self.dims[a] + idx[a];
        }
        lin
    }

    pub fn get(&self, idx: &[usize], channel: usize) -> f64 {
        self.data[self.linear_index(idx) * self.channels + channel]
    }

    /// All channels of one pixel.
    pub fn pixel(&self, lin: usize) -> &[f64] {
        &self.data[lin * self.channels..(lin + 1) * self.channels]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims == other.dims && self.channels == other.channels
    }

    /// `a·self + b·other`, sample-wise.
    pub fn combine(&self, a: f64, other: &Image, b: f64) -> Result<Image> {
        if !self.same_shape(other) {
            return Err(Error::Dimension("images differ in shape".into()));
        }
        Image::new(
            self.dims.clone(),
            self.channels,
            self.data
                .iter()
                .zip(&other.data)
                .map(|(x, y)| a * x + b * y)
                .collect(),
        )
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Result<Image> {
        Image::new(
            self.dims.clone(),
            self.channels,
            self.data.iter().map(|&x| f(x)).collect(),
        )
    }

    /// Axis-aligned crop (`origin` and `size` per axis).
    pub fn crop(&self, origin: &[usize], size: &[usize]) -> Result<Image> {
        if origin.len() != self.ndim() || size.len() != self.ndim() {
            return Err(Error::Dimension("crop rank differs from image rank".into()));
        }
        for a in 0..self.ndim() {
            if origin[a] + size[a] > self.dims[a] || size[a] == 0 {
                return Err(Error::Dimension(format!(
                    "crop {origin:?}+{size:?} exceeds {:?}",
                    self.dims
                )));
            }
        }
        let mut src = vec![0; self.ndim()];
        Image::from_fn(size.to_vec(), self.channels, |idx, c| {
            for a in 0..idx.len() {
                src[a] = origin[a] + idx[a];
            }
            self.get(&src, c)
        })
    }

    /// Zero-pads (or crops) to `size`, keeping the content at the origin.
    pub fn pad_to(&self, size: &[usize]) -> Result<Image> {
        if size.len() != self.ndim() {
            return Err(Error::Dimension("pad rank differs from image rank".into()));
        }
        Image::from_fn(size.to_vec(), self.channels, |idx, c| {
            if idx.iter().zip(&self.dims).all(|(i, n)| i < n) {
                self.get(idx, c)
            } else {
                0.0
            }
        })
    }

    /// Linear resampling onto `size` in the shared canonical frame.
    pub fn resize(&self, size: &[usize]) -> Result<Image> {
        pyramid::resample(self, size)
    }
}

pub(crate) fn unravel(mut lin: usize, dims: &[usize], idx: &mut [usize]) {
    for (a, &n) in dims.iter().enumerate() {
        idx[a] = lin % n;
        lin /= n;
    }
}

/// Pixel index → canonical coordinate on an axis of `n` samples.
pub fn to_canonical(p: f64, n: usize) -> f64 {
    if n <= 1 {
        0.0
    } else {
        -1.0 + 2.0 * p / (n - 1) as f64
    }
}

/// Canonical coordinate → (fractional) pixel index on an axis of `n` samples.
pub fn from_canonical(c: f64, n: usize) -> f64 {
    (c + 1.0) * (n.max(1) - 1) as f64 / 2.0
}
