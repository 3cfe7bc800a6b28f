use crate::error::{Error, Result};
use crate::imaging::{from_canonical, to_canonical, unravel, Image};

/// Smallest per-axis size allowed at the coarsest level.
pub const MIN_LEVEL_SIZE: usize = 4;

/// Gaussian pyramid. `levels[0]` is the input; `scales[l] = d^(−l)`.
#[derive(Clone, Debug)]
pub struct ImagePyramid {
    pub levels: Vec<Image>,
    pub scales: Vec<f64>,
    pub downscale: f64,
}

impl ImagePyramid {
    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Normalised 1-D Gaussian with `σ = 0.5·d`, radius `ceil(3σ)`.
pub fn gaussian_kernel(downscale: f64) -> Vec<f64> {
    let sigma = 0.5 * downscale;
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= s);
    k
}

/// Separable blur along every axis with clamped borders.
fn blur(img: &Image, kernel: &[f64]) -> Image {
    let radius = (kernel.len() / 2) as i64;
    let dims = img.dims().to_vec();
    let c = img.channels();
    let mut data = img.data().to_vec();
    let mut stride = 1;
    for &n in &dims {
        let mut next = vec![0.0; data.len()];
        let total = data.len() / c;
        for lin in 0..total {
            let pos = ((lin / stride) % n) as i64;
            let line_start = lin - pos as usize * stride;
            for (t, &w) in kernel.iter().enumerate() {
                let q = (pos + t as i64 - radius).clamp(0, n as i64 - 1) as usize;
                let src = line_start + q * stride;
                for ch in 0..c {
                    next[lin * c + ch] += w * data[src * c + ch];
                }
            }
        }
        data = next;
        stride *= n;
    }
    Image::new(dims, c, data).expect("blur preserves shape")
}

/// Linear resampling onto `size`, aligned in canonical coordinates.
pub(crate) fn resample(img: &Image, size: &[usize]) -> Result<Image> {
    if size.len() != img.ndim() || size.contains(&0) {
        return Err(Error::Dimension(format!(
            "cannot resample {:?} onto {size:?}",
            img.dims()
        )));
    }
    let k = img.ndim();
    let dims = img.dims().to_vec();
    let c = img.channels();
    let n_out: usize = size.iter().product();
    let mut data = Vec::with_capacity(n_out * c);
    let mut idx = vec![0; k];
    let mut src = vec![0; k];
    let mut acc = vec![0.0; c];
    for lin in 0..n_out {
        unravel(lin, size, &mut idx);
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..k {
            let x = from_canonical(to_canonical(idx[a] as f64, size[a]), dims[a])
                .clamp(0.0, (dims[a] - 1) as f64);
            let f = x.floor().min((dims[a].max(2) - 2) as f64).max(0.0);
            base[a] = f as usize;
            frac[a] = x - f;
        }
        acc.iter_mut().for_each(|v| *v = 0.0);
        for corner in 0..(1usize << k) {
            let mut w = 1.0;
            for a in 0..k {
                let hi = (corner >> a) & 1;
                src[a] = (base[a] + hi).min(dims[a] - 1);
                w *= if hi == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            let p = img.linear_index(&src);
            for ch in 0..c {
                acc[ch] += w * img.data()[p * c + ch];
            }
        }
        data.extend_from_slice(&acc);
    }
    Image::new(size.to_vec(), c, data)
}

/// Builds `levels` pyramid levels; each level is the previous one blurred and
/// resampled to `ceil(n / d)` samples per axis.
pub fn build_pyramid(img: &Image, levels: usize, downscale: f64) -> Result<ImagePyramid> {
    if levels == 0 {
        return Err(Error::Config("pyramid needs at least one level".into()));
    }
    if !(downscale > 1.0) || !downscale.is_finite() {
        return Err(Error::Config(format!(
            "downscale factor must exceed 1, got {downscale}"
        )));
    }
    let mut size = img.dims().to_vec();
    for _ in 1..levels {
        size = size
            .iter()
            .map(|&n| (n as f64 / downscale).ceil() as usize)
            .collect();
    }
    if levels > 1 && size.iter().any(|&n| n < MIN_LEVEL_SIZE) {
        return Err(Error::ImageTooSmall(format!(
            "{:?} with {levels} levels at factor {downscale} reaches {size:?}",
            img.dims()
        )));
    }
    let kernel = gaussian_kernel(downscale);
    let mut out = vec![img.clone()];
    for _ in 1..levels {
        let prev = out.last().expect("non-empty");
        let next_size: Vec<usize> = prev
            .dims()
            .iter()
            .map(|&n| (n as f64 / downscale).ceil() as usize)
            .collect();
        let next = resample(&blur(prev, &kernel), &next_size)?;
        out.push(next);
    }
    let scales = (0..levels).map(|l| downscale.powi(-(l as i32))).collect();
    Ok(ImagePyramid {
        levels: out,
        scales,
        downscale,
    })
}
