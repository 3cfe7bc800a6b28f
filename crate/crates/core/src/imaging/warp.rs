use crate::diffnet::gradcheck::{check_jacobian, normal_vec, CheckOptions, Input, RegisteredOp};
use crate::diffnet::{GradCheckReport, Graph, Var};
use crate::error::{Error, Result};
use crate::geometry::{transform_points, transform_points_var, PointSet};
use crate::imaging::{from_canonical, to_canonical, unravel, Image};
use crate::matexp::ComplexMatrix;

/// Fractional pixel positions this close to an integer are snapped onto it, so
/// an identity transform reproduces the input exactly.
const SNAP: f64 = 1e-10;

/// Canonical coordinates of every pixel centre of a `dims` grid, x-fastest.
pub fn canonical_grid(dims: &[usize]) -> Vec<f64> {
    let n: usize = dims.iter().product();
    let k = dims.len();
    let mut out = Vec::with_capacity(n * k);
    let mut idx = vec![0; k];
    for lin in 0..n {
        unravel(lin, dims, &mut idx);
        for a in 0..k {
            out.push(to_canonical(idx[a] as f64, dims[a]));
        }
    }
    out
}

/// Multilinear interpolation at one canonical point. Taps outside the image
/// read `fill`. When `grad` is given it receives `∂value_c/∂canonical_a`
/// (row-major `k × C`); at exact integer positions the right-hand slope is used.
fn interpolate(img: &Image, point: &[f64], fill: f64, out: &mut [f64], grad: Option<&mut [f64]>) {
    let k = img.ndim();
    let channels = img.channels();
    let dims = img.dims();
    let mut base = [0i64; 3];
    let mut frac = [0.0; 3];
    let mut scale = [0.0; 3];
    for a in 0..k {
        let mut x = from_canonical(point[a], dims[a]);
        let r = x.round();
        if (x - r).abs() < SNAP {
            x = r;
        }
        let f = x.floor();
        base[a] = f as i64;
        frac[a] = x - f;
        scale[a] = (dims[a].max(1) - 1) as f64 / 2.0;
    }
    out.iter_mut().for_each(|o| *o = 0.0);
    let mut grad = grad;
    if let Some(g) = grad.as_deref_mut() {
        g.iter_mut().for_each(|x| *x = 0.0);
    }
    let mut idx = [0usize; 3];
    for corner in 0..(1usize << k) {
        let mut w = 1.0;
        let mut inside = true;
        for a in 0..k {
            let hi = (corner >> a) & 1;
            let p = base[a] + hi as i64;
            if p < 0 || p >= dims[a] as i64 {
                inside = false;
            } else {
                idx[a] = p as usize;
            }
            w *= if hi == 1 { frac[a] } else { 1.0 - frac[a] };
        }
        let lin = if inside {
            Some(img.linear_index(&idx[..k]))
        } else {
            None
        };
        let value = |c: usize| match lin {
            Some(l) => img.data()[l * channels + c],
            None => fill,
        };
        for (c, o) in out.iter_mut().enumerate() {
            *o += w * value(c);
        }
        if let Some(g) = grad.as_deref_mut() {
            for a in 0..k {
                // weight with axis `a` differentiated
                let mut dw = if (corner >> a) & 1 == 1 { 1.0 } else { -1.0 };
                for b in 0..k {
                    if b != a {
                        dw *= if (corner >> b) & 1 == 1 {
                            frac[b]
                        } else {
                            1.0 - frac[b]
                        };
                    }
                }
                for c in 0..channels {
                    g[a * channels + c] += dw * scale[a] * value(c);
                }
            }
        }
    }
}

fn check_points(img: &Image, coords: &[f64]) -> Result<()> {
    if !coords.len().is_multiple_of(img.ndim()) {
        return Err(Error::Dimension(format!(
            "{} coordinates for a {}-D image",
            coords.len(),
            img.ndim()
        )));
    }
    Ok(())
}

/// Samples `img` at canonical points (`n × k`), returning `n × C` values.
pub fn sample_points(img: &Image, coords: &[f64], fill: f64) -> Result<Vec<f64>> {
    check_points(img, coords)?;
    let c = img.channels();
    let k = img.ndim();
    let mut out = vec![0.0; coords.len() / k * c];
    for (p, o) in coords.chunks_exact(k).zip(out.chunks_exact_mut(c)) {
        interpolate(img, p, fill, o, None);
    }
    Ok(out)
}

/// Recorded [`sample_points`], differentiable with respect to the coordinates.
pub fn sample_points_var(g: &mut Graph, img: &Image, coords: Var, fill: f64) -> Result<Var> {
    let (n, k) = g.shape(coords);
    if k != img.ndim() {
        return Err(Error::Dimension(format!(
            "{k}-D points sampled from a {}-D image",
            img.ndim()
        )));
    }
    let c = img.channels();
    let want_grad = g.requires_grad(coords);
    let mut out = vec![0.0; n * c];
    let mut jac = if want_grad {
        vec![0.0; n * k * c]
    } else {
        Vec::new()
    };
    {
        let cv = g.value(coords);
        for i in 0..n {
            let p = &cv[i * k..(i + 1) * k];
            let o = &mut out[i * c..(i + 1) * c];
            if want_grad {
                interpolate(img, p, fill, o, Some(&mut jac[i * k * c..(i + 1) * k * c]));
            } else {
                interpolate(img, p, fill, o, None);
            }
        }
    }
    Ok(g.custom(
        &[coords],
        out,
        n,
        c,
        Box::new(move |gout, grads| {
            if let Some(slot) = grads.slot(coords) {
                for i in 0..n {
                    for a in 0..k {
                        let j = &jac[(i * k + a) * c..(i * k + a + 1) * c];
                        slot[i * k + a] += j
                            .iter()
                            .zip(&gout[i * c..(i + 1) * c])
                            .map(|(x, y)| x * y)
                            .sum::<f64>();
                    }
                }
            }
        }),
    ))
}

/// `Warp(img, H)` on an `out_dims` grid: every output pixel centre is mapped by
/// `H` and `img` is sampled there, reading zero outside its domain.
pub fn warp(img: &Image, h: &ComplexMatrix, out_dims: &[usize]) -> Result<Image> {
    warp_with_fill(img, h, out_dims, 0.0)
}

pub fn warp_with_fill(
    img: &Image,
    h: &ComplexMatrix,
    out_dims: &[usize],
    fill: f64,
) -> Result<Image> {
    if h.dim() != img.ndim() + 1 || out_dims.len() != img.ndim() {
        return Err(Error::Dimension(format!(
            "{0}x{0} transform cannot warp a {1}-D image onto {out_dims:?}",
            h.dim(),
            img.ndim()
        )));
    }
    let grid = PointSet::new(img.ndim(), canonical_grid(out_dims))?;
    let mapped = transform_points(h, &grid)?;
    let data = sample_points(img, mapped.coords(), fill)?;
    Image::new(out_dims.to_vec(), img.channels(), data)
}

/// Recorded warp of `img` at the given canonical points (`n × k`, constant),
/// returning `n × C`. Differentiable with respect to `h`.
pub fn warp_points_var(
    g: &mut Graph,
    img: &Image,
    h: Var,
    points: &[f64],
    fill: f64,
) -> Result<Var> {
    check_points(img, points)?;
    let k = img.ndim();
    let pts = g.constant(points.to_vec(), points.len() / k, k);
    let mapped = transform_points_var(g, h, pts)?;
    sample_points_var(g, img, mapped, fill)
}

/// Recorded [`warp`] onto `out_dims`; the result is `Π out_dims × C`.
pub fn warp_var(g: &mut Graph, img: &Image, h: Var, out_dims: &[usize]) -> Result<Var> {
    if out_dims.len() != img.ndim() {
        return Err(Error::Dimension(format!(
            "cannot warp a {}-D image onto {out_dims:?}",
            img.ndim()
        )));
    }
    warp_points_var(g, img, h, &canonical_grid(out_dims), 0.0)
}

fn smooth_test_image(dims: &[usize], channels: usize) -> Image {
    Image::from_fn(dims.to_vec(), channels, |idx, c| {
        let mut s = 0.3 * c as f64;
        for (a, &i) in idx.iter().enumerate() {
            s += (0.7 + 0.3 * a as f64) * i as f64 / dims[a] as f64 * 3.0;
        }
        0.5 + 0.4 * s.sin()
    })
    .expect("valid test image")
}

fn check_sample(seed: u64, k: usize) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dims = vec![7; k];
    let img = smooth_test_image(&dims, 2);
    let pts = normal_vec(&mut rng, 4 * k, 0.4);
    check_jacobian(
        "sample_points",
        &[Input::new(pts, 4, k)],
        CheckOptions {
            step: 1e-6,
            threshold: 1e-4,
            max_entries: None,
        },
        move |g, v| sample_points_var(g, &img, v[0], 0.0),
    )
}

fn check_warp(seed: u64) -> Result<GradCheckReport> {
    use crate::lie_basis::{CoefficientVector, GroupSpec};
    use crate::matexp::{forward_inverse_var, DEFAULT_TERMS};
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let img = smooth_test_image(&[9, 8], 1);
    let spec = GroupSpec::aff2();
    let v = CoefficientVector::new(normal_vec(&mut rng, 6, 0.05), normal_vec(&mut rng, 6, 0.05))?;
    let weights = normal_vec(&mut rng, 72, 1.0);
    crate::diffnet::check_gradients(
        "warp",
        &[Input::row(v.to_state(true))],
        CheckOptions {
            step: 1e-6,
            threshold: 1e-3,
            max_entries: None,
        },
        move |g, s| {
            let (h, _) = forward_inverse_var(g, &spec, s[0], true, DEFAULT_TERMS)?;
            let w = warp_var(g, &img, h, &[9, 8])?;
            let wv = g.constant(weights.clone(), 72, 1);
            let p = g.mul(w, wv)?;
            Ok(g.sum(p))
        },
    )
}

pub(crate) fn gradcheck_cases() -> Vec<RegisteredOp> {
    vec![
        RegisteredOp {
            name: "sample_bilinear",
            threshold: 1e-4,
            run: |s| check_sample(s, 2),
        },
        RegisteredOp {
            name: "sample_trilinear",
            threshold: 1e-4,
            run: |s| check_sample(s, 3),
        },
        RegisteredOp {
            name: "warp_coefficients",
            threshold: 1e-3,
            run: check_warp,
        },
    ]
}
