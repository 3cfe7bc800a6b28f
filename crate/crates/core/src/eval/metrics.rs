use crate::error::{Error, Result};
use crate::imaging::Image;

/// Reported PSNR for identical images.
pub const PSNR_CAP: f64 = 100.0;

const K1: f64 = 0.01;
const K2: f64 = 0.03;
const SIGMA: f64 = 1.5;
const RADIUS: usize = 5;

fn same_shape(p: &Image, q: &Image, what: &str) -> Result<()> {
    if !p.same_shape(q) {
        return Err(Error::Dimension(format!(
            "{what}: {:?}x{} vs {:?}x{}",
            p.dims(),
            p.channels(),
            q.dims(),
            q.channels()
        )));
    }
    Ok(())
}

/// `10·log10(1 / mse)` for intensities in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(p: &Image, q: &Image) -> Result<f64> {
    same_shape(p, q, "psnr")?;
    let mse = p
        .data()
        .iter()
        .zip(q.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / p.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// Valid-mode separable Gaussian filter of one channel.
fn filter_valid(data: &[f64], dims: &[usize], kernel: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let r = kernel.len() / 2;
    let mut cur = data.to_vec();
    let mut cur_dims = dims.to_vec();
    for axis in 0..dims.len() {
        let mut out_dims = cur_dims.clone();
        out_dims[axis] = cur_dims[axis] - 2 * r;
        let stride: usize = cur_dims[..axis].iter().product();
        let out_stride: usize = out_dims[..axis].iter().product();
        let n_out: usize = out_dims.iter().product();
        let mut out = vec![0.0; n_out];
        for (lin, o) in out.iter_mut().enumerate() {
            let inner = lin % out_stride;
            let pos = (lin / out_stride) % out_dims[axis];
            let outer = lin / (out_stride * out_dims[axis]);
            let base = inner + outer * stride * cur_dims[axis];
            *o = kernel
                .iter()
                .enumerate()
                .map(|(t, w)| w * cur[base + (pos + t) * stride])
                .sum();
        }
        cur = out;
        cur_dims = out_dims;
    }
    (cur, cur_dims)
}

/// Mean SSIM over the valid region with an 11-wide Gaussian window
/// (`σ = 1.5`, shrunk for images smaller than the window), `K1 = 0.01`,
/// `K2 = 0.03`, dynamic range 1. Volumes use the 3-D window; channels are
/// averaged.
pub fn ssim(p: &Image, q: &Image) -> Result<f64> {
    same_shape(p, q, "ssim")?;
    let dims = p.dims();
    let min_dim = *dims.iter().min().expect("non-empty dims");
    let r = RADIUS.min((min_dim - 1) / 2);
    let mut kernel: Vec<f64> = (0..=2 * r)
        .map(|i| {
            let d = i as f64 - r as f64;
            (-d * d / (2.0 * SIGMA * SIGMA)).exp()
        })
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|w| *w /= s);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let c = p.channels();
    let n = p.n_pixels();
    let mut total = 0.0;
    for ch in 0..c {
        let x: Vec<f64> = (0..n).map(|i| p.data()[i * c + ch]).collect();
        let y: Vec<f64> = (0..n).map(|i| q.data()[i * c + ch]).collect();
        let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| u * v).collect() };
        let (mx, _) = filter_valid(&x, dims, &kernel);
        let (my, _) = filter_valid(&y, dims, &kernel);
        let (sxx, _) = filter_valid(&prod(&x, &x), dims, &kernel);
        let (syy, _) = filter_valid(&prod(&y, &y), dims, &kernel);
        let (sxy, _) = filter_valid(&prod(&x, &y), dims, &kernel);
        let m = mx.len();
        let mut acc = 0.0;
        for i in 0..m {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cxy = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cxy + c2))
                / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / m as f64;
    }
    Ok(total / c as f64)
}
