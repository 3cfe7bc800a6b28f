//! Finite-difference verification of recorded gradients.
//!
//! [`check_gradients`] compares the reverse-mode gradient of a scalar graph
//! against central differences. [`registered_ops`] lists one self-contained
//! check per differentiable op in the crate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::diffnet::graph::{Graph, Var};
use crate::diffnet::mlp::MlpSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.threshold
    }
}

/// One learnable input: flat values and shape.
#[derive(Clone, Debug)]
pub struct Input {
    pub values: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Input {
    pub fn new(values: Vec<f64>, rows: usize, cols: usize) -> Self {
        Self { values, rows, cols }
    }

    pub fn row(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::new(values, 1, n)
    }
}

/// Options for [`check_gradients`].
#[derive(Clone, Copy, Debug)]
pub struct CheckOptions {
    pub step: f64,
    pub threshold: f64,
    /// Check at most this many entries per input (evenly strided); `None` checks all.
    pub max_entries: Option<usize>,
}

impl Default for CheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            threshold: 1e-4,
            max_entries: None,
        }
    }
}

fn evaluate<F>(f: &F, inputs: &[Input]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| g.constant(i.values.clone(), i.rows, i.cols))
        .collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Tape(format!("checked function returned {} values", v.len())));
    }
    Ok(v[0])
}

/// Relative error per entry is `|a − n| / max(|a|, |n|, floor)` where the floor
/// is 1e-3 of the largest gradient magnitude seen, so near-zero entries are
/// judged against the scale of the whole gradient.
pub fn check_gradients<F>(
    name: &str,
    inputs: &[Input],
    options: CheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|i| g.leaf(i.values.clone(), i.rows, i.cols))
        .collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut pairs = Vec::new();
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var);
        let n = analytic.len();
        let stride = match options.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let orig = work[k].values[i];
            work[k].values[i] = orig + options.step;
            let plus = evaluate(&f, &work)?;
            work[k].values[i] = orig - options.step;
            let minus = evaluate(&f, &work)?;
            work[k].values[i] = orig;
            pairs.push((analytic[i], (plus - minus) / (2.0 * options.step)));
        }
    }
    let scale = pairs
        .iter()
        .map(|(a, n)| a.abs().max(n.abs()))
        .fold(0.0, f64::max);
    let floor = (1e-3 * scale).max(1e-12);
    let mut max_rel: f64 = 0.0;
    let mut max_abs: f64 = 0.0;
    for (a, n) in &pairs {
        let abs = (a - n).abs();
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(abs / a.abs().max(n.abs()).max(floor));
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked: pairs.len(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        threshold: options.threshold,
    })
}

/// A differentiable op together with a reproducible finite-difference check.
pub struct RegisteredOp {
    pub name: &'static str,
    pub threshold: f64,
    pub run: fn(u64) -> Result<GradCheckReport>,
}

pub(crate) fn normal_vec(rng: &mut ChaCha8Rng, n: usize, sd: f64) -> Vec<f64> {
    (0..n)
        .map(|_| sd * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

/// Runs [`check_gradients`] once per output entry of `f`, covering the full
/// Jacobian, and reports the worst entry.
pub fn check_jacobian<F>(
    name: &str,
    inputs: &[Input],
    options: CheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let n_out = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs
            .iter()
            .map(|i| g.constant(i.values.clone(), i.rows, i.cols))
            .collect();
        let out = f(&mut g, &vars)?;
        g.value(out).len()
    };
    let mut worst: Option<GradCheckReport> = None;
    let mut checked = 0;
    for k in 0..n_out {
        let r = check_gradients(name, inputs, options, |g, v| {
            let y = f(g, v)?;
            let (rows, cols) = g.shape(y);
            let flat = g.reshape(y, 1, rows * cols)?;
            g.slice(flat, k, 1, 1)
        })?;
        checked += r.checked;
        if worst.as_ref().is_none_or(|w| r.max_rel_err > w.max_rel_err) {
            worst = Some(r);
        }
    }
    let mut report = worst.ok_or_else(|| Error::Tape(format!("{name}: no outputs")))?;
    report.checked = checked;
    Ok(report)
}

fn check_mlp_jacobian(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MlpSpec::new(vec![7, 100, 6])?;
    let mut params = spec.init_params(&mut rng, false);
    // non-zero biases so every unit is exercised
    params
        .iter_mut()
        .zip(normal_vec(&mut rng, spec.n_params(), 0.1))
        .for_each(|(p, n)| *p += n);
    let x = normal_vec(&mut rng, 7, 1.0);
    check_jacobian(
        "mlp_forward",
        &[Input::row(params), Input::row(x)],
        CheckOptions::default(),
        move |g, v| {
            let net = spec.bind(g, v[0])?;
            net.forward(g, v[1])
        },
    )
}

fn check_log_mean_exp(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = normal_vec(&mut rng, 20, 2.0);
    check_gradients(
        "log_mean_exp",
        &[Input::new(x, 4, 5)],
        CheckOptions::default(),
        |g, v| Ok(g.log_mean_exp(v[0])),
    )
}

fn check_row_ops(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = normal_vec(&mut rng, 12, 1.0);
    let b = normal_vec(&mut rng, 8, 1.0);
    check_gradients(
        "concat_gather_slice",
        &[Input::new(a, 4, 3), Input::new(b, 4, 2)],
        CheckOptions::default(),
        |g, v| {
            let c = g.concat_cols(v[0], v[1])?;
            let r = g.gather_rows(c, &[3, 0, 0, 2])?;
            let s = g.slice(r, 2, 3, 3)?;
            let sq = g.mul(s, s)?;
            Ok(g.sum(sq))
        },
    )
}

/// Every differentiable op in the crate with its finite-difference check.
pub fn registered_ops() -> Vec<RegisteredOp> {
    let mut ops = vec![
        RegisteredOp {
            name: "mlp_forward",
            threshold: 1e-4,
            run: check_mlp_jacobian,
        },
        RegisteredOp {
            name: "log_mean_exp",
            threshold: 1e-4,
            run: check_log_mean_exp,
        },
        RegisteredOp {
            name: "concat_gather_slice",
            threshold: 1e-4,
            run: check_row_ops,
        },
    ];
    ops.extend(crate::lie_basis::gradcheck_cases());
    ops.extend(crate::matexp::gradcheck_cases());
    ops.extend(crate::geometry::gradcheck_cases());
    ops.extend(crate::imaging::gradcheck_cases());
    ops.extend(crate::odeflow::gradcheck_cases());
    ops.extend(crate::losses::gradcheck_cases());
    ops
}
