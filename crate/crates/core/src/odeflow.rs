//! Coefficient flow across pyramid levels.
//!
//! The coefficient state `v(s)` follows `dv/ds = g(s, v)` and the pyramid
//! scales are the integration grid: starting from `v_L = u` at the coarsest
//! scale, each step moves one level finer. Complex coefficients travel as one
//! real state `re ∥ im`.
//!
//! Both solvers are written once against [`FlowBackend`], so the plain
//! evaluation and the recorded (differentiable) evaluation share the stepping
//! code.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffnet::gradcheck::{check_jacobian, normal_vec, CheckOptions, Input, RegisteredOp};
use crate::diffnet::{BoundMlp, GradCheckReport, Graph, MlpSpec, Var};
use crate::error::{Error, Result};
use crate::lie_basis::CoefficientVector;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Solver {
    Euler,
    Rk4,
}

impl FromStr for Solver {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "euler" => Ok(Solver::Euler),
            "rk4" => Ok(Solver::Rk4),
            other => Err(Error::Config(format!("unknown solver {other:?}"))),
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Solver::Euler => "euler",
            Solver::Rk4 => "rk4",
        })
    }
}

/// Scales `s_1 > s_2 > … > s_L`, stored finest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelSchedule {
    scales: Vec<f64>,
}

impl LevelSchedule {
    /// Pyramid schedule `s_l = d^(1−l)` for `l = 1..=levels`.
    pub fn new(levels: usize, downscale: f64) -> Result<Self> {
        if levels == 0 {
            return Err(Error::Config("schedule needs at least one level".into()));
        }
        if !(downscale > 1.0) || !downscale.is_finite() {
            return Err(Error::Config(format!(
                "downscale factor must exceed 1, got {downscale}"
            )));
        }
        Self::from_scales((0..levels).map(|l| downscale.powi(-(l as i32))).collect())
    }

    /// Arbitrary grid; must start at 1 and decrease strictly.
    pub fn from_scales(scales: Vec<f64>) -> Result<Self> {
        if scales.first() != Some(&1.0) {
            return Err(Error::Config("schedule must start at scale 1".into()));
        }
        if scales.iter().any(|s| !s.is_finite()) || scales.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!(
                "scales must be finite and strictly decreasing: {scales:?}"
            )));
        }
        Ok(Self { scales })
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn n_levels(&self) -> usize {
        self.scales.len()
    }

    /// Scale of level `l` (1-based).
    pub fn scale(&self, level: usize) -> f64 {
        self.scales[level - 1]
    }
}

/// Per-level coefficient states; `states[l − 1]` is `v_l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTrajectory {
    pub complex: bool,
    pub scales: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl CoefficientTrajectory {
    pub fn n_levels(&self) -> usize {
        self.states.len()
    }

    /// `v_l` for 1-based `level`.
    pub fn level(&self, level: usize) -> CoefficientVector {
        CoefficientVector::from_state(&self.states[level - 1], self.complex)
    }

    /// `v_L`, the optimised initial value.
    pub fn initial(&self) -> CoefficientVector {
        self.level(self.n_levels())
    }

    /// `v_1`, the finest-level coefficients.
    pub fn finest(&self) -> CoefficientVector {
        self.level(1)
    }

    /// CSV with one row per level, coarsest first: `level,scale,re_0..,im_0..`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        let n = self.states.first().map_or(0, |s| s.len());
        let n_coef = if self.complex { n / 2 } else { n };
        let mut header = vec!["level".to_string(), "scale".to_string()];
        header.extend((0..n_coef).map(|i| format!("re_{i}")));
        header.extend((0..n_coef).map(|i| format!("im_{i}")));
        writeln!(w, "{}", header.join(",")).map_err(|e| Error::io(path, e))?;
        for l in (1..=self.n_levels()).rev() {
            let v = self.level(l);
            let mut row = vec![l.to_string(), format!("{}", self.scales[l - 1])];
            row.extend(v.re.iter().chain(&v.im).map(|x| format!("{x}")));
            writeln!(w, "{}", row.join(",")).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Vector arithmetic and field evaluation for the solvers.
pub trait FlowBackend {
    type State: Clone;

    fn field(&mut self, s: f64, v: &Self::State) -> Result<Self::State>;

    fn lincomb(&mut self, terms: &[(&Self::State, f64)]) -> Result<Self::State>;
}

/// Integrates from `u` at the coarsest scale to the finest and returns all
/// states, finest first.
pub fn integrate<B: FlowBackend>(
    backend: &mut B,
    solver: Solver,
    u: B::State,
    schedule: &LevelSchedule,
) -> Result<Vec<B::State>> {
    let s = schedule.scales();
    let n = s.len();
    let mut out = vec![u];
    for l in (0..n - 1).rev() {
        let v = out.last().expect("non-empty");
        let (s_prev, s_next) = (s[l + 1], s[l]);
        let h = s_next - s_prev;
        let next = match solver {
            Solver::Euler => {
                let g = backend.field(s_prev, v)?;
                backend.lincomb(&[(v, 1.0), (&g, h)])?
            }
            Solver::Rk4 => {
                let g1 = backend.field(s_prev, v)?;
                let x2 = backend.lincomb(&[(v, 1.0), (&g1, h / 3.0)])?;
                let g2 = backend.field(s_prev + h / 3.0, &x2)?;
                let x3 = backend.lincomb(&[(v, 1.0), (&g1, -h / 3.0), (&g2, h)])?;
                let g3 = backend.field(s_prev + 2.0 * h / 3.0, &x3)?;
                let x4 = backend.lincomb(&[(v, 1.0), (&g1, h), (&g2, -h), (&g3, h)])?;
                let g4 = backend.field(s_next, &x4)?;
                backend.lincomb(&[
                    (v, 1.0),
                    (&g1, h / 8.0),
                    (&g2, 3.0 * h / 8.0),
                    (&g3, 3.0 * h / 8.0),
                    (&g4, h / 8.0),
                ])?
            }
        };
        out.push(next);
    }
    out.reverse();
    Ok(out)
}

/// Plain evaluation with a closure field.
pub struct FnFlow<F> {
    pub field: F,
}

impl<F> FlowBackend for FnFlow<F>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    type State = Vec<f64>;

    fn field(&mut self, s: f64, v: &Vec<f64>) -> Result<Vec<f64>> {
        let out = (self.field)(s, v)?;
        if out.len() != v.len() {
            return Err(Error::Dimension(format!(
                "flow field returned {} values for a state of {}",
                out.len(),
                v.len()
            )));
        }
        Ok(out)
    }

    fn lincomb(&mut self, terms: &[(&Vec<f64>, f64)]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; terms[0].0.len()];
        for (v, k) in terms {
            for (o, x) in out.iter_mut().zip(v.iter()) {
                *o += k * x;
            }
        }
        Ok(out)
    }
}

/// Recorded evaluation; states are `1 × n` nodes of `graph`.
pub struct GraphFlow<'g, F> {
    pub graph: &'g mut Graph,
    pub field: F,
}

impl<F> FlowBackend for GraphFlow<'_, F>
where
    F: FnMut(&mut Graph, f64, Var) -> Result<Var>,
{
    type State = Var;

    fn field(&mut self, s: f64, v: &Var) -> Result<Var> {
        let out = (self.field)(self.graph, s, *v)?;
        if self.graph.shape(out) != self.graph.shape(*v) {
            return Err(Error::Dimension(format!(
                "flow field returned shape {:?} for a state of {:?}",
                self.graph.shape(out),
                self.graph.shape(*v)
            )));
        }
        Ok(out)
    }

    fn lincomb(&mut self, terms: &[(&Var, f64)]) -> Result<Var> {
        let t: Vec<(Var, f64)> = terms.iter().map(|(v, k)| (**v, *k)).collect();
        self.graph.lincomb(&t)
    }
}

/// The learned field `g_φ(s, v)`: an MLP on the input `[s, v]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowField {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

impl FlowField {
    pub fn new(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        if spec.input_len() != spec.output_len() + 1 {
            return Err(Error::Config(format!(
                "flow network must map 1 + n inputs to n outputs, got {:?}",
                spec.widths
            )));
        }
        if params.len() != spec.n_params() {
            return Err(Error::Dimension(format!(
                "flow network needs {} parameters, got {}",
                spec.n_params(),
                params.len()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn state_len(&self) -> usize {
        self.spec.output_len()
    }

    pub fn eval(&self, s: f64, v: &[f64]) -> Result<Vec<f64>> {
        let mut x = Vec::with_capacity(v.len() + 1);
        x.push(s);
        x.extend_from_slice(v);
        crate::diffnet::mlp_forward(&self.spec, &self.params, &x)
    }
}

/// Recorded `g_φ(s, v)` for a bound flow network.
pub fn flow_field_var(g: &mut Graph, net: &BoundMlp, s: f64, v: Var) -> Result<Var> {
    let sv = g.scalar(s);
    let x = g.concat_cols(sv, v)?;
    net.forward(g, x)
}

fn solve(
    solver: Solver,
    u: &CoefficientVector,
    complex: bool,
    flow: &FlowField,
    schedule: &LevelSchedule,
) -> Result<CoefficientTrajectory> {
    let state = u.to_state(complex);
    if state.len() != flow.state_len() {
        return Err(Error::Dimension(format!(
            "state has {} entries, flow network expects {}",
            state.len(),
            flow.state_len()
        )));
    }
    let mut backend = FnFlow {
        field: |s: f64, v: &[f64]| flow.eval(s, v),
    };
    let states = integrate(&mut backend, solver, state, schedule)?;
    Ok(CoefficientTrajectory {
        complex,
        scales: schedule.scales().to_vec(),
        states,
    })
}

/// Explicit Euler across levels: `v_l = v_{l+1} + (s_l − s_{l+1})·g(s_{l+1}, v_{l+1})`.
pub fn euler_levels(
    u: &CoefficientVector,
    complex: bool,
    flow: &FlowField,
    schedule: &LevelSchedule,
) -> Result<CoefficientTrajectory> {
    solve(Solver::Euler, u, complex, flow, schedule)
}

/// Four-stage 3/8-rule Runge–Kutta across levels.
pub fn rk4_levels(
    u: &CoefficientVector,
    complex: bool,
    flow: &FlowField,
    schedule: &LevelSchedule,
) -> Result<CoefficientTrajectory> {
    solve(Solver::Rk4, u, complex, flow, schedule)
}

/// Recorded trajectory for `u` (a `1 × n` node) under a bound flow network.
pub fn integrate_var(
    g: &mut Graph,
    solver: Solver,
    u: Var,
    net: &BoundMlp,
    schedule: &LevelSchedule,
) -> Result<Vec<Var>> {
    let (rows, cols) = g.shape(u);
    if rows != 1 || cols != net.spec().output_len() {
        return Err(Error::Dimension(format!(
            "state node is {rows}x{cols}, flow network expects 1x{}",
            net.spec().output_len()
        )));
    }
    let mut backend = GraphFlow {
        graph: g,
        field: |g: &mut Graph, s: f64, v: Var| flow_field_var(g, net, s, v),
    };
    integrate(&mut backend, solver, u, schedule)
}

fn check_solver(seed: u64, solver: Solver) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = MlpSpec::flow(6);
    let mut params = spec.init_params(&mut rng, false);
    params
        .iter_mut()
        .zip(normal_vec(&mut rng, spec.n_params(), 0.05))
        .for_each(|(p, n)| *p += n);
    let u = normal_vec(&mut rng, 6, 0.3);
    let schedule = LevelSchedule::new(3, 2.0)?;
    let name = match solver {
        Solver::Euler => "euler_levels",
        Solver::Rk4 => "rk4_levels",
    };
    check_jacobian(
        name,
        &[Input::row(u), Input::row(params)],
        CheckOptions::default(),
        move |g, v| {
            let net = spec.bind(g, v[1])?;
            let states = integrate_var(g, solver, v[0], &net, &schedule)?;
            // v_1 and v_2 together
            g.concat_cols(states[0], states[1])
        },
    )
}

pub(crate) fn gradcheck_cases() -> Vec<RegisteredOp> {
    vec![
        RegisteredOp {
            name: "euler_levels",
            threshold: 1e-4,
            run: |s| check_solver(s, Solver::Euler),
        },
        RegisteredOp {
            name: "rk4_levels",
            threshold: 1e-4,
            run: |s| check_solver(s, Solver::Rk4),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linear_field() -> FnFlow<impl FnMut(f64, &[f64]) -> Result<Vec<f64>>> {
        FnFlow {
            field: |_s: f64, v: &[f64]| Ok(v.to_vec()),
        }
    }

    fn zero_flow(n: usize) -> FlowField {
        let spec = MlpSpec::flow(n);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = spec.init_params(&mut rng, true);
        FlowField::new(spec, params).unwrap()
    }

    #[test]
    fn schedule_matches_pyramid_scales() {
        let s = LevelSchedule::new(4, 2.0).unwrap();
        assert_eq!(s.scales(), &[1.0, 0.5, 0.25, 0.125]);
        assert_eq!(s.scale(4), 0.125);
        assert!(LevelSchedule::new(0, 2.0).is_err());
        assert!(LevelSchedule::from_scales(vec![1.0, 1.0]).is_err());
        assert!(LevelSchedule::from_scales(vec![0.5, 0.25]).is_err());
    }

    #[test]
    fn zero_flow_keeps_u_on_every_level() {
        let u = CoefficientVector::new(vec![0.1, -0.2, 0.3, 0.0, 0.05, 0.4], vec![0.01; 6]).unwrap();
        let schedule = LevelSchedule::new(6, 2.0).unwrap();
        let flow = zero_flow(12);
        for t in [
            euler_levels(&u, true, &flow, &schedule).unwrap(),
            rk4_levels(&u, true, &flow, &schedule).unwrap(),
        ] {
            assert_eq!(t.n_levels(), 6);
            for l in 1..=6 {
                assert_eq!(t.level(l), u);
            }
        }
    }

    #[test]
    fn constant_field_one_step() {
        let c = [0.2, -0.4, 1.0];
        let u = vec![1.0, 2.0, 3.0];
        let schedule = LevelSchedule::new(2, 2.0).unwrap();
        for solver in [Solver::Euler, Solver::Rk4] {
            let mut b = FnFlow {
                field: |_s: f64, _v: &[f64]| Ok(c.to_vec()),
            };
            let out = integrate(&mut b, solver, u.clone(), &schedule).unwrap();
            assert_eq!(out[1], u);
            for i in 0..3 {
                assert!((out[0][i] - (u[i] + 0.5 * c[i])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn linear_field_against_exponential() {
        let schedule = LevelSchedule::new(6, 2.0).unwrap();
        let exact = (1.0 - 0.03125f64).exp();
        let err = |solver| {
            let out = integrate(&mut linear_field(), solver, vec![1.0], &schedule).unwrap();
            (out[0][0] - exact).abs() / exact
        };
        let (e_euler, e_rk4) = (err(Solver::Euler), err(Solver::Rk4));
        // Euler global error bound: (T/2)·max h·e^T with T = s_1 − s_L.
        let t: f64 = 1.0 - 0.03125;
        assert!(e_euler < 0.5 * t * 0.5 * t.exp());
        assert!(e_rk4 < e_euler);
    }

    #[test]
    fn rk4_single_step_matches_taylor() {
        // One step of any 4-stage order-4 method on v' = v is the 4th Taylor polynomial.
        let schedule = LevelSchedule::from_scales(vec![1.0, 0.5]).unwrap();
        let out = integrate(&mut linear_field(), Solver::Rk4, vec![1.0], &schedule).unwrap();
        let h: f64 = 0.5;
        let taylor = 1.0 + h + h * h / 2.0 + h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((out[0][0] - taylor).abs() < 1e-15);
    }

    #[test]
    fn convergence_orders() {
        let err = |solver, h: f64| {
            let n = (1.0 / h).round() as usize;
            let scales = (0..=n).map(|i| 1.0 - i as f64 * h).collect();
            let schedule = LevelSchedule::from_scales(scales).unwrap();
            let out = integrate(&mut linear_field(), solver, vec![1.0], &schedule).unwrap();
            (out[0][0] - 1f64.exp()).abs()
        };
        let order = |solver| (err(solver, 0.0625) / err(solver, 0.03125)).log2();
        assert!((0.9..1.1).contains(&order(Solver::Euler)));
        assert!(order(Solver::Rk4) > 3.7);
    }

    #[test]
    fn recorded_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = MlpSpec::flow(12);
        let params = spec.init_params(&mut rng, false);
        let flow = FlowField::new(spec.clone(), params.clone()).unwrap();
        let u = CoefficientVector::new(normal_vec(&mut rng, 6, 0.1), normal_vec(&mut rng, 6, 0.1))
            .unwrap();
        let schedule = LevelSchedule::new(4, 2.0).unwrap();
        for solver in [Solver::Euler, Solver::Rk4] {
            let plain = solve(solver, &u, true, &flow, &schedule).unwrap();
            let mut g = Graph::new();
            let p = g.constant(params.clone(), 1, params.len());
            let net = spec.bind(&mut g, p).unwrap();
            let uv = g.constant(u.to_state(true), 1, 12);
            let states = integrate_var(&mut g, solver, uv, &net, &schedule).unwrap();
            for (l, s) in states.iter().enumerate() {
                for (a, b) in g.value(*s).iter().zip(&plain.states[l]) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
            assert_eq!(plain.states[3], u.to_state(true));
        }
    }

    #[test]
    fn size_mismatch_is_an_error() {
        let schedule = LevelSchedule::new(3, 2.0).unwrap();
        let flow = zero_flow(12);
        assert!(rk4_levels(&CoefficientVector::zeros(6), false, &flow, &schedule).is_err());
        let mut bad = FnFlow {
            field: |_s: f64, _v: &[f64]| Ok(vec![0.0]),
        };
        assert!(integrate(&mut bad, Solver::Euler, vec![0.0, 0.0], &schedule).is_err());
    }

    #[test]
    fn trajectory_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let u = CoefficientVector::new(vec![0.5, 0.25], vec![0.0, 1.0]).unwrap();
        let t = CoefficientTrajectory {
            complex: true,
            scales: vec![1.0, 0.5],
            states: vec![u.to_state(true), u.to_state(true)],
        };
        t.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "level,scale,re_0,re_1,im_0,im_1");
        assert_eq!(lines[1], "2,0.5,0.5,0.25,0,1");
        assert_eq!(lines.len(), 3);
    }

    #[test]
    fn solver_gradients() {
        for op in gradcheck_cases() {
            let r = (op.run)(11).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }
}
