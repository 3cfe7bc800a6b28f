//! Python bindings. Matrices are nested lists of rows, images are flat
//! row-major lists (x fastest, channels interleaved) plus their dims.

use odecme::eval::{naed as naed_rs, psnr as psnr_rs, ssim as ssim_rs, synth_pair, LandmarkSet};
use odecme::{
    Error, FlowMode, GroupSpec, Image, LossKind, Matrix, RegistrationConfig, Solver,
};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn py_err(e: Error) -> PyErr {
    match e {
        e if e.is_numeric() => PyArithmeticError::new_err(e.to_string()),
        Error::Io { .. } | Error::Codec { .. } => PyIOError::new_err(e.to_string()),
        Error::Tape(_) => PyRuntimeError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

type Rows = Vec<Vec<f64>>;

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.as_slice().chunks(m.dim()).map(<[f64]>::to_vec).collect()
}

fn matrix(r: &[Vec<f64>]) -> PyResult<Matrix> {
    let n = r.len();
    if r.iter().any(|row| row.len() != n) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    Matrix::from_row_major(r.concat()).ok_or_else(|| PyValueError::new_err("bad matrix"))
}

fn complex(re: &[Vec<f64>], im: Option<&[Vec<f64>]>) -> PyResult<odecme::ComplexMatrix> {
    let re = matrix(re)?;
    let im = match im {
        Some(im) => matrix(im)?,
        None => Matrix::zeros(re.dim()),
    };
    odecme::ComplexMatrix::new(re, im).map_err(py_err)
}

fn group(name: &str) -> PyResult<GroupSpec> {
    name.parse()
        .map(GroupSpec::new)
        .map_err(|e: Error| PyValueError::new_err(e.to_string()))
}

fn image(data: Vec<f64>, dims: Vec<usize>, channels: usize) -> PyResult<Image> {
    Image::new(dims, channels, data).map_err(py_err)
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(|e: Error| PyValueError::new_err(e.to_string()))
}

/// Lie algebra basis of `group` ("aff2", "se3", "sim3").
#[pyfunction]
fn generators(group_name: &str) -> PyResult<Vec<Vec<Vec<f64>>>> {
    Ok(odecme::generators(&group(group_name)?).iter().map(rows).collect())
}

/// Truncated-series exponential of `re + i·im`; returns `(re, im)`.
#[pyfunction]
#[pyo3(signature = (re, im=None, terms=10))]
fn mexp(
    re: Vec<Vec<f64>>,
    im: Option<Vec<Vec<f64>>>,
    terms: usize,
) -> PyResult<(Rows, Rows)> {
    let h = odecme::mexp(&complex(&re, im.as_deref())?, terms).map_err(py_err)?;
    Ok((rows(&h.re), rows(&h.im)))
}

/// Maps canonical points through `H = re + i·im`.
#[pyfunction]
#[pyo3(signature = (points, re, im=None))]
fn transform_points(
    points: Vec<Vec<f64>>,
    re: Vec<Vec<f64>>,
    im: Option<Vec<Vec<f64>>>,
) -> PyResult<Vec<Vec<f64>>> {
    let h = complex(&re, im.as_deref())?;
    let set = odecme::PointSet::from_points(&points).map_err(py_err)?;
    let out = odecme::transform_points(&h, &set).map_err(py_err)?;
    Ok((0..out.len()).map(|i| out.point(i).to_vec()).collect())
}

/// Registers `moving` onto `fixed` and returns the result as a JSON string.
#[pyfunction]
#[pyo3(signature = (
    fixed, moving, dims, channels=1, group_name=None, loss="mine", solver="rk4", mode="ode",
    complex=true, levels=6, downscale=2.0, iterations=500, seed=0
))]
#[allow(clippy::too_many_arguments)]
fn register(
    py: Python<'_>,
    fixed: Vec<f64>,
    moving: Vec<f64>,
    dims: Vec<usize>,
    channels: usize,
    group_name: Option<&str>,
    loss: &str,
    solver: &str,
    mode: &str,
    complex: bool,
    levels: usize,
    downscale: f64,
    iterations: usize,
    seed: u64,
) -> PyResult<String> {
    let fixed = image(fixed, dims.clone(), channels)?;
    let moving = image(moving, dims.clone(), channels)?;
    let base = if dims.len() == 3 {
        RegistrationConfig::volume()
    } else {
        RegistrationConfig::default()
    };
    let cfg = RegistrationConfig {
        group: match group_name {
            Some(g) => group(g)?,
            None => base.group.clone(),
        },
        loss: parse::<LossKind>(loss)?,
        solver: parse::<Solver>(solver)?,
        mode: parse::<FlowMode>(mode)?,
        complex,
        levels,
        downscale,
        iterations,
        seed,
        ..base
    };
    py.detach(|| {
        odecme::register(&fixed, &moving, &cfg)
            .and_then(|r| r.to_json())
            .map_err(py_err)
    })
}

/// Normalised average landmark error of moving points mapped through `H`.
#[pyfunction]
#[pyo3(signature = (fixed_points, moving_points, fixed_dims, moving_dims, re, im=None))]
fn naed(
    fixed_points: Vec<Vec<f64>>,
    moving_points: Vec<Vec<f64>>,
    fixed_dims: Vec<usize>,
    moving_dims: Vec<usize>,
    re: Vec<Vec<f64>>,
    im: Option<Vec<Vec<f64>>>,
) -> PyResult<f64> {
    let set = LandmarkSet::new(fixed_dims, moving_dims, fixed_points, moving_points).map_err(py_err)?;
    naed_rs(&set, &complex(&re, im.as_deref())?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, dims, channels=1))]
fn ssim(a: Vec<f64>, b: Vec<f64>, dims: Vec<usize>, channels: usize) -> PyResult<f64> {
    ssim_rs(&image(a, dims.clone(), channels)?, &image(b, dims, channels)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, dims, channels=1))]
fn psnr(a: Vec<f64>, b: Vec<f64>, dims: Vec<usize>, channels: usize) -> PyResult<f64> {
    psnr_rs(&image(a, dims.clone(), channels)?, &image(b, dims, channels)?).map_err(py_err)
}

/// Synthetic pair from a procedural image; returns a dict with `fixed`,
/// `moving`, `fixed_points`, `moving_points`, `true_re`, `true_im`.
#[pyfunction]
#[pyo3(signature = (dims, group_name="aff2", sd_real=0.05, sd_imag=0.0, seed=0, channels=1))]
fn synth<'py>(
    py: Python<'py>,
    dims: Vec<usize>,
    group_name: &str,
    sd_real: f64,
    sd_imag: f64,
    seed: u64,
    channels: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let img = odecme::eval::procedural_image(&dims, channels, seed).map_err(py_err)?;
    let pair = synth_pair(&img, &group(group_name)?, sd_real, sd_imag, seed).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("fixed", pair.fixed.data().to_vec())?;
    d.set_item("moving", pair.moving.data().to_vec())?;
    d.set_item("fixed_points", pair.landmarks.fixed)?;
    d.set_item("moving_points", pair.landmarks.moving)?;
    d.set_item("true_re", pair.true_v.re)?;
    d.set_item("true_im", pair.true_v.im)?;
    Ok(d)
}

#[pymodule]
fn odecme_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(generators, m)?)?;
    m.add_function(wrap_pyfunction!(mexp, m)?)?;
    m.add_function(wrap_pyfunction!(transform_points, m)?)?;
    m.add_function(wrap_pyfunction!(register, m)?)?;
    m.add_function(wrap_pyfunction!(naed, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
