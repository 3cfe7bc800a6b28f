use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{transform_points, PointSet};
use crate::imaging::{from_canonical, to_canonical};
use crate::matexp::ComplexMatrix;

/// Corresponding points in pixel units, one fixed and one moving point per
/// pair, plus the image sizes used for normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct LandmarkSet {
    pub fixed_dims: Vec<usize>,
    pub moving_dims: Vec<usize>,
    pub fixed: Vec<Vec<f64>>,
    pub moving: Vec<Vec<f64>>,
}

impl LandmarkSet {
    pub fn new(
        fixed_dims: Vec<usize>,
        moving_dims: Vec<usize>,
        fixed: Vec<Vec<f64>>,
        moving: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let k = fixed_dims.len();
        if !(2..=3).contains(&k) || moving_dims.len() != k {
            return Err(Error::Dimension(format!(
                "landmark image sizes {fixed_dims:?} and {moving_dims:?}"
            )));
        }
        if fixed.len() != moving.len() || fixed.is_empty() {
            return Err(Error::Dimension(format!(
                "{} fixed and {} moving landmarks",
                fixed.len(),
                moving.len()
            )));
        }
        for p in fixed.iter().chain(&moving) {
            if p.len() != k || p.iter().any(|x| !x.is_finite()) {
                return Err(Error::Dimension(format!("bad landmark {p:?} for {k}-D images")));
            }
        }
        Ok(Self {
            fixed_dims,
            moving_dims,
            fixed,
            moving,
        })
    }

    pub fn len(&self) -> usize {
        self.fixed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixed.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.fixed_dims.len()
    }

    /// Reads `fx,fy,mx,my` (plus `fz,mz` for volumes), columns in any order.
    pub fn read_csv(path: &Path, fixed_dims: Vec<usize>, moving_dims: Vec<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(path)?;
        let headers = rdr.headers()?.clone();
        let k = fixed_dims.len();
        let axes = ["x", "y", "z"];
        let col = |name: String| -> Result<usize> {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(&name))
                .ok_or_else(|| Error::format(path, format!("missing column {name}")))
        };
        let fcols: Vec<usize> = (0..k).map(|a| col(format!("f{}", axes[a]))).collect::<Result<_>>()?;
        let mcols: Vec<usize> = (0..k).map(|a| col(format!("m{}", axes[a]))).collect::<Result<_>>()?;
        let (mut fixed, mut moving) = (Vec::new(), Vec::new());
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |c: usize| -> Result<f64> {
                rec.get(c)
                    .and_then(|s| s.parse::<f64>().ok())
                    .ok_or_else(|| Error::format(path, format!("row {}: bad number", row + 1)))
            };
            fixed.push(fcols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>>>()?);
            moving.push(mcols.iter().map(|&c| parse(c)).collect::<Result<Vec<_>>>()?);
        }
        Self::new(fixed_dims, moving_dims, fixed, moving)
    }

    /// Whitespace-separated rows `x_fixed y_fixed x_moving y_moving`, the layout
    /// of the FIRE retina dataset's control-point files.
    pub fn read_fire(path: &Path, fixed_dims: Vec<usize>, moving_dims: Vec<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (mut fixed, mut moving) = (Vec::new(), Vec::new());
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(path, format!("line {}: bad number", i + 1)))?;
            if vals.len() != 4 {
                return Err(Error::format(
                    path,
                    format!("line {}: expected 4 columns, got {}", i + 1, vals.len()),
                ));
            }
            fixed.push(vals[..2].to_vec());
            moving.push(vals[2..].to_vec());
        }
        Self::new(fixed_dims, moving_dims, fixed, moving)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let axes = ["x", "y", "z"];
        let k = self.ndim();
        let header: Vec<String> = (0..k)
            .map(|a| format!("f{}", axes[a]))
            .chain((0..k).map(|a| format!("m{}", axes[a])))
            .collect();
        w.write_record(&header)?;
        for (f, m) in self.fixed.iter().zip(&self.moving) {
            w.write_record(f.iter().chain(m).map(|x| x.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Normalised average Euclidean distance: maps every moving landmark through
/// `h` (pixel → canonical → transform → fixed pixel grid), scales each axis
/// to `[0, 1]` by `p / (n − 1)` and averages the distance to the fixed
/// landmarks.
pub fn naed(landmarks: &LandmarkSet, h: &ComplexMatrix) -> Result<f64> {
    let k = landmarks.ndim();
    if h.dim() != k + 1 {
        return Err(Error::Dimension(format!(
            "{}x{} transform for {k}-D landmarks",
            h.dim(),
            h.dim()
        )));
    }
    let coords: Vec<f64> = landmarks
        .moving
        .iter()
        .flat_map(|p| {
            p.iter()
                .zip(&landmarks.moving_dims)
                .map(|(&x, &n)| to_canonical(x, n))
        })
        .collect();
    let mapped = transform_points(h, &PointSet::new(k, coords)?)?;
    let mut total = 0.0;
    for (i, f) in landmarks.fixed.iter().enumerate() {
        let q = mapped.point(i);
        let mut d2 = 0.0;
        for a in 0..k {
            let n = landmarks.fixed_dims[a];
            let scale = (n.max(2) - 1) as f64;
            let got = from_canonical(q[a], n) / scale;
            let want = f[a] / scale;
            d2 += (got - want) * (got - want);
        }
        total += d2.sqrt();
    }
    Ok(total / landmarks.len() as f64)
}
