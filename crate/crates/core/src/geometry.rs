//! Point mapping through a complex transform matrix.
//!
//! A point `p` is lifted to `q = [p, 1]`, multiplied by both parts of `H`
//! (`a = Hʳq`, `b = Hⁱq`), and projected back with
//!
//! ```text
//! p'_j = (a_j a_k + b_j b_k) / (a_k² + b_k²)      k = spatial dimension
//! ```
//!
//! With `Hⁱ = 0` this is ordinary homogeneous normalisation. Volumes use the
//! same formula with the fourth homogeneous coordinate in the role of `z`.

use std::io::Write;
use std::path::Path;

use crate::diffnet::gradcheck::{check_jacobian, normal_vec, CheckOptions, Input, RegisteredOp};
use crate::diffnet::{GradCheckReport, Graph, Var};
use crate::error::{Error, Result};
use crate::matexp::ComplexMatrix;

/// Denominators below this are treated as a degenerate transform.
pub const SINGULAR_EPS: f64 = 1e-12;

/// `N × k` points in canonical coordinates, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    dim: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if !(2..=3).contains(&dim) || !coords.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!(
                "{} coordinates do not form {dim}-D points",
                coords.len()
            )));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("point coordinates are not finite".into()));
        }
        Ok(Self { dim, coords })
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(2, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return Err(Error::Dimension("points of mixed dimension".into()));
        }
        Self::new(dim, points.concat())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }
}

/// Maps `n` points (`pts`, row-major `n × k`) through the flat `re ∥ im` matrix.
fn map_points(h: &[f64], pts: &[f64], k: usize) -> Result<Vec<f64>> {
    let d = k + 1;
    let (hr, hi) = h.split_at(d * d);
    let mut out = Vec::with_capacity(pts.len());
    let mut a = [0.0; 4];
    let mut b = [0.0; 4];
    for (idx, p) in pts.chunks_exact(k).enumerate() {
        for m in 0..d {
            let (mut sa, mut sb) = (hr[m * d + k], hi[m * d + k]);
            for n in 0..k {
                sa += hr[m * d + n] * p[n];
                sb += hi[m * d + n] * p[n];
            }
            a[m] = sa;
            b[m] = sb;
        }
        let den = a[k] * a[k] + b[k] * b[k];
        if !(den > SINGULAR_EPS) {
            return Err(Error::SingularTransform {
                index: idx,
                denominator: den,
            });
        }
        for j in 0..k {
            out.push((a[j] * a[k] + b[j] * b[k]) / den);
        }
    }
    Ok(out)
}

pub fn transform_points(h: &ComplexMatrix, pts: &PointSet) -> Result<PointSet> {
    if h.dim() != pts.dim() + 1 {
        return Err(Error::Dimension(format!(
            "{0}x{0} transform applied to {1}-D points",
            h.dim(),
            pts.dim()
        )));
    }
    let coords = map_points(&h.to_flat(), &pts.coords, pts.dim)?;
    Ok(PointSet {
        dim: pts.dim,
        coords,
    })
}

/// Recorded [`transform_points`]: `h` is `2 × (k+1)²`, `pts` is `n × k`.
/// Differentiable with respect to both.
pub fn transform_points_var(g: &mut Graph, h: Var, pts: Var) -> Result<Var> {
    let (n, k) = g.shape(pts);
    let d = k + 1;
    if g.shape(h) != (2, d * d) {
        return Err(Error::Dimension(format!(
            "transform node {:?} does not match {k}-D points",
            g.shape(h)
        )));
    }
    let hv = g.shared_value(h);
    let pv = g.shared_value(pts);
    let out = map_points(&hv, &pv, k)?;
    let outv: std::rc::Rc<[f64]> = out.clone().into();
    Ok(g.custom(
        &[h, pts],
        out,
        n,
        k,
        Box::new(move |gout, grads| {
            let want_h = grads.requires(h);
            let want_p = grads.requires(pts);
            let (hr, hi) = hv.split_at(d * d);
            let mut h_bar = vec![0.0; 2 * d * d];
            let mut p_bar = vec![0.0; n * k];
            let mut q = [0.0; 4];
            let mut a = [0.0; 4];
            let mut b = [0.0; 4];
            let mut a_bar = [0.0; 4];
            let mut b_bar = [0.0; 4];
            for i in 0..n {
                q[..k].copy_from_slice(&pv[i * k..(i + 1) * k]);
                q[k] = 1.0;
                for m in 0..d {
                    a[m] = (0..d).map(|c| hr[m * d + c] * q[c]).sum();
                    b[m] = (0..d).map(|c| hi[m * d + c] * q[c]).sum();
                }
                let den = a[k] * a[k] + b[k] * b[k];
                a_bar[k] = 0.0;
                b_bar[k] = 0.0;
                for j in 0..k {
                    let gj = gout[i * k + j];
                    let pj = outv[i * k + j];
                    a_bar[j] = gj * a[k] / den;
                    b_bar[j] = gj * b[k] / den;
                    a_bar[k] += gj * (a[j] - 2.0 * pj * a[k]) / den;
                    b_bar[k] += gj * (b[j] - 2.0 * pj * b[k]) / den;
                }
                if want_h {
                    for m in 0..d {
                        for c in 0..d {
                            h_bar[m * d + c] += a_bar[m] * q[c];
                            h_bar[d * d + m * d + c] += b_bar[m] * q[c];
                        }
                    }
                }
                if want_p {
                    for c in 0..k {
                        p_bar[i * k + c] = (0..d)
                            .map(|m| hr[m * d + c] * a_bar[m] + hi[m * d + c] * b_bar[m])
                            .sum();
                    }
                }
            }
            if want_h {
                grads.accumulate(h, &h_bar);
            }
            if want_p {
                grads.accumulate(pts, &p_bar);
            }
        }),
    ))
}

/// Polyline in canonical 2-D coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Polyline {
    pub id: usize,
    pub points: Vec<[f64; 2]>,
}

/// Transforms a regular grid over `[−1, 1]²`: `lines_per_axis` vertical lines
/// followed by as many horizontal ones, each sampled at `samples_per_line` points.
pub fn render_grid(
    h: &ComplexMatrix,
    lines_per_axis: usize,
    samples_per_line: usize,
) -> Result<Vec<Polyline>> {
    if lines_per_axis < 2 || samples_per_line < 2 {
        return Err(Error::Config(
            "grid needs at least 2 lines per axis and 2 samples per line".into(),
        ));
    }
    let at = |i: usize, n: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
    let mut lines = Vec::with_capacity(2 * lines_per_axis);
    for axis in 0..2 {
        for l in 0..lines_per_axis {
            let fixed = at(l, lines_per_axis);
            let mut coords = Vec::with_capacity(2 * samples_per_line);
            for s in 0..samples_per_line {
                let t = at(s, samples_per_line);
                if axis == 0 {
                    coords.extend([fixed, t]);
                } else {
                    coords.extend([t, fixed]);
                }
            }
            let mapped = transform_points(h, &PointSet::new(2, coords)?)?;
            lines.push(Polyline {
                id: lines.len(),
                points: mapped
                    .coords()
                    .chunks_exact(2)
                    .map(|c| [c[0], c[1]])
                    .collect(),
            });
        }
    }
    Ok(lines)
}

/// Largest distance of any vertex from the chord joining the endpoints.
pub fn collinearity_residual(line: &Polyline) -> f64 {
    let (Some(p0), Some(p1)) = (line.points.first(), line.points.last()) else {
        return 0.0;
    };
    let (dx, dy) = (p1[0] - p0[0], p1[1] - p0[1]);
    let len = (dx * dx + dy * dy).sqrt();
    line.points
        .iter()
        .map(|p| {
            let (ex, ey) = (p[0] - p0[0], p[1] - p0[1]);
            if len == 0.0 {
                (ex * ex + ey * ey).sqrt()
            } else {
                (ex * dy - ey * dx).abs() / len
            }
        })
        .fold(0.0, f64::max)
}

/// Writes `line,x,y` rows.
pub fn write_polylines_csv(lines: &[Polyline], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let io = |e| Error::io(path, e);
    writeln!(f, "line,x,y").map_err(io)?;
    for l in lines {
        for p in &l.points {
            writeln!(f, "{},{},{}", l.id, p[0], p[1]).map_err(io)?;
        }
    }
    f.flush().map_err(io)
}

fn check_transform(seed: u64, k: usize) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = k + 1;
    let mut h = normal_vec(&mut rng, 2 * d * d, 0.2);
    for i in 0..d {
        h[i * d + i] += 1.0;
    }
    let pts = normal_vec(&mut rng, 3 * k, 0.5);
    check_jacobian(
        "transform_points",
        &[Input::new(h, 2, d * d), Input::new(pts, 3, k)],
        CheckOptions::default(),
        |g, v| transform_points_var(g, v[0], v[1]),
    )
}

pub(crate) fn gradcheck_cases() -> Vec<RegisteredOp> {
    vec![
        RegisteredOp {
            name: "transform_points_2d",
            threshold: 1e-4,
            run: |s| check_transform(s, 2),
        },
        RegisteredOp {
            name: "transform_points_3d",
            threshold: 1e-4,
            run: |s| check_transform(s, 3),
        },
    ]
}
