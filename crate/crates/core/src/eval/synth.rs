use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::eval::landmarks::LandmarkSet;
use crate::geometry::{transform_points, PointSet};
use crate::imaging::{from_canonical, to_canonical, warp, Image};
use crate::lie_basis::{CoefficientVector, GroupSpec};
use crate::matexp::{forward_inverse, ComplexMatrix, DEFAULT_TERMS};

/// Attempts before a degenerate random transform is reported as an error.
pub const MAX_REDRAWS: usize = 10;

/// A synthetic registration problem with known ground truth.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub fixed: Image,
    pub moving: Image,
    /// Moving landmark `p` corresponds to fixed landmark `H_true(p)`.
    pub landmarks: LandmarkSet,
    pub true_v: CoefficientVector,
    /// `moving = Warp(fixed, h_true)`.
    pub h_true: ComplexMatrix,
}

/// Smooth "natural-looking" test image: random Gaussian blobs over a gentle
/// sinusoidal texture, scaled into `[0.05, 0.95]`.
pub fn procedural_image(dims: &[usize], channels: usize, seed: u64) -> Result<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = dims.len();
    let n_blobs = 14;
    let blobs: Vec<(Vec<f64>, f64, Vec<f64>)> = (0..n_blobs)
        .map(|_| {
            let centre: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..0.9)).collect();
            let sigma = rng.random_range(0.04..0.16);
            let amp: Vec<f64> = (0..channels).map(|_| rng.random_range(-1.0..1.0)).collect();
            (centre, sigma, amp)
        })
        .collect();
    let waves: Vec<(Vec<f64>, f64)> = (0..3)
        .map(|_| {
            let freq: Vec<f64> = (0..k).map(|_| rng.random_range(2.0..9.0)).collect();
            (freq, rng.random_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let raw = Image::from_fn(dims.to_vec(), channels, |idx, c| {
        let x: Vec<f64> = idx
            .iter()
            .zip(dims)
            .map(|(&i, &n)| i as f64 / (n.max(2) - 1) as f64)
            .collect();
        let mut v = 0.0;
        for (centre, sigma, amp) in &blobs {
            let d2: f64 = x.iter().zip(centre).map(|(a, b)| (a - b) * (a - b)).sum();
            v += amp[c] * (-d2 / (2.0 * sigma * sigma)).exp();
        }
        for (freq, phase) in &waves {
            let arg: f64 = x.iter().zip(freq).map(|(a, f)| a * f).sum();
            v += 0.15 * (arg + phase + c as f64).sin();
        }
        v
    })?;
    let (lo, hi) = raw
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    let span = (hi - lo).max(1e-12);
    raw.map(|v| 0.05 + 0.9 * (v - lo) / span)
}

/// Grid of landmark positions (pixel units) at 0.2–0.8 of each axis: 4 per
/// axis in 2-D, 3 per axis in 3-D.
pub fn landmark_grid(dims: &[usize]) -> Vec<Vec<f64>> {
    let per_axis: usize = if dims.len() == 2 { 4 } else { 3 };
    let fracs: Vec<f64> = (0..per_axis)
        .map(|i| 0.2 + 0.6 * i as f64 / (per_axis - 1) as f64)
        .collect();
    let total = per_axis.pow(dims.len() as u32);
    (0..total)
        .map(|mut lin| {
            dims.iter()
                .map(|&n| {
                    let f = fracs[lin % per_axis];
                    lin /= per_axis;
                    f * (n - 1) as f64
                })
                .collect()
        })
        .collect()
}

fn try_pair(img: &Image, group: &GroupSpec, v: &CoefficientVector) -> Result<SynthPair> {
    let (h, _) = forward_inverse(group, v, DEFAULT_TERMS)?;
    if !h.is_finite() {
        return Err(Error::Numeric("random transform is not finite".into()));
    }
    let moving = warp(img, &h, img.dims())?;
    let dims = img.dims().to_vec();
    let grid = landmark_grid(&dims);
    let coords: Vec<f64> = grid
        .iter()
        .flat_map(|p| p.iter().zip(&dims).map(|(&x, &n)| to_canonical(x, n)).collect::<Vec<_>>())
        .collect();
    let mapped = transform_points(&h, &PointSet::new(dims.len(), coords)?)?;
    let fixed_pts: Vec<Vec<f64>> = (0..grid.len())
        .map(|i| {
            mapped
                .point(i)
                .iter()
                .zip(&dims)
                .map(|(&c, &n)| from_canonical(c, n))
                .collect()
        })
        .collect();
    let landmarks = LandmarkSet::new(dims.clone(), dims, fixed_pts, grid)?;
    Ok(SynthPair {
        fixed: img.clone(),
        moving,
        landmarks,
        true_v: v.clone(),
        h_true: h,
    })
}

/// Draws coefficients `re ~ N(0, sd_real²)`, `im ~ N(0, sd_imag²)`, warps `img`
/// with the resulting transform and emits grid landmarks. Degenerate draws
/// are redrawn up to [`MAX_REDRAWS`] times.
pub fn synth_pair(
    img: &Image,
    group: &GroupSpec,
    sd_real: f64,
    sd_imag: f64,
    seed: u64,
) -> Result<SynthPair> {
    if !(sd_real >= 0.0) || !(sd_imag >= 0.0) {
        return Err(Error::Config(format!(
            "standard deviations must be non-negative, got {sd_real} and {sd_imag}"
        )));
    }
    if img.ndim() != group.spatial_dim() {
        return Err(Error::Dimension(format!(
            "{}-D image for a group acting in {} dimensions",
            img.ndim(),
            group.spatial_dim()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = group.n_generators();
    let re_dist = Normal::new(0.0, sd_real).map_err(|e| Error::Config(e.to_string()))?;
    let im_dist = Normal::new(0.0, sd_imag).map_err(|e| Error::Config(e.to_string()))?;
    let mut last_err = None;
    for _ in 0..MAX_REDRAWS {
        let re: Vec<f64> = (0..n).map(|_| re_dist.sample(&mut rng)).collect();
        let im: Vec<f64> = (0..n).map(|_| im_dist.sample(&mut rng)).collect();
        let v = CoefficientVector::new(re, im)?;
        match try_pair(img, group, &v) {
            Ok(pair) => return Ok(pair),
            Err(e) if e.is_numeric() => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Numeric("no valid transform drawn".into())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::naed;
    use crate::geometry::{collinearity_residual, render_grid};

    #[test]
    fn procedural_image_is_in_range_and_deterministic() {
        let a = procedural_image(&[32, 24], 3, 7).unwrap();
        assert!(a.data().iter().all(|&v| (0.05 - 1e-12..=0.95 + 1e-12).contains(&v)));
        assert_eq!(a, procedural_image(&[32, 24], 3, 7).unwrap());
        assert_ne!(a, procedural_image(&[32, 24], 3, 8).unwrap());
        let v = procedural_image(&[8, 8, 8], 1, 1).unwrap();
        assert_eq!(v.dims(), &[8, 8, 8]);
    }

    #[test]
    fn zero_sd_reproduces_the_image() {
        let img = procedural_image(&[32, 32], 1, 1).unwrap();
        let p = synth_pair(&img, &GroupSpec::aff2(), 0.0, 0.0, 3).unwrap();
        assert_eq!(p.moving, p.fixed);
        assert_eq!(p.true_v, CoefficientVector::zeros(6));
    }

    #[test]
    fn landmarks_are_consistent_with_the_truth() {
        let img = procedural_image(&[40, 30], 1, 2).unwrap();
        for (sr, si) in [(0.1, 0.0), (0.1, 0.05)] {
            let p = synth_pair(&img, &GroupSpec::aff2(), sr, si, 5).unwrap();
            assert_eq!(p.landmarks.len(), 16);
            assert!(naed(&p.landmarks, &p.h_true).unwrap() < 1e-6);
        }
        let vol = procedural_image(&[12, 12, 12], 1, 2).unwrap();
        let p = synth_pair(&vol, &GroupSpec::se3(), 0.05, 0.0, 1).unwrap();
        assert_eq!(p.landmarks.len(), 27);
        assert!(naed(&p.landmarks, &p.h_true).unwrap() < 1e-6);
    }

    #[test]
    fn real_draws_are_homographies() {
        let img = procedural_image(&[16, 16], 1, 2).unwrap();
        let p = synth_pair(&img, &GroupSpec::aff2(), 0.1, 0.0, 9).unwrap();
        assert!(p.h_true.im.max_abs() == 0.0);
        for line in render_grid(&p.h_true, 5, 20).unwrap() {
            assert!(collinearity_residual(&line) < 1e-9);
        }
    }

    #[test]
    fn grid_positions() {
        let g = landmark_grid(&[11, 21]);
        assert_eq!(g.len(), 16);
        assert_eq!(g[0], vec![2.0, 4.0]);
        assert_eq!(g[15], vec![8.0, 16.0]);
    }

    #[test]
    fn bad_arguments() {
        let img = procedural_image(&[16, 16], 1, 2).unwrap();
        assert!(synth_pair(&img, &GroupSpec::aff2(), -1.0, 0.0, 0).is_err());
        assert!(synth_pair(&img, &GroupSpec::se3(), 0.1, 0.0, 0).is_err());
    }
}
