//! The registration driver.
//!
//! Each iteration rebuilds the graph: coefficient trajectory from `u` (and the
//! flow network in ODE mode), forward and inverse transforms per level, the
//! symmetric objective, one reverse pass and one Adam step per parameter group.
//! The objective is ascended by descending its negation.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::{Adam, AdamConfig, BoundMlp, Checkpoint, Graph, MlpSpec, ParameterTape, Var};
use crate::error::{Error, Result};
use crate::imaging::{build_pyramid, Image, ImagePyramid};
use crate::lie_basis::{CoefficientVector, GroupSpec};
use crate::losses::{symmetric_objective_var, LossKind, ObjectiveSpec};
use crate::matexp::{forward_inverse, ComplexMatrix, DEFAULT_TERMS};
use crate::odeflow::{integrate, integrate_var, CoefficientTrajectory, FlowField, FnFlow, LevelSchedule, Solver};

pub const SEG_U: &str = "u";
pub const SEG_PHI: &str = "phi";
pub const SEG_THETA: &str = "theta";

/// Critic-only iterations used when warm-up is switched on.
pub const WARMUP_ITERATIONS: usize = 50;
/// Early stopping window and relative tolerance.
pub const EARLY_STOP_WINDOW: usize = 50;
pub const EARLY_STOP_TOL: f64 = 1e-6;

/// How per-level coefficients are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlowMode {
    /// Integrate the learned flow from `u` across levels.
    Ode,
    /// One real coefficient vector shared by every level.
    Shared,
}

impl FromStr for FlowMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ode" => Ok(FlowMode::Ode),
            "shared" => Ok(FlowMode::Shared),
            other => Err(Error::Config(format!("unknown flow mode {other:?}"))),
        }
    }
}

impl fmt::Display for FlowMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FlowMode::Ode => "ode",
            FlowMode::Shared => "shared",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub group: GroupSpec,
    pub complex: bool,
    pub solver: Solver,
    pub loss: LossKind,
    pub mode: FlowMode,
    pub levels: usize,
    pub downscale: f64,
    pub n_terms: usize,
    pub iterations: usize,
    pub lr_theta: f64,
    pub lr_phi: f64,
    pub lr_u: f64,
    pub seed: u64,
    /// Cap on MINE samples per level; `None` picks the default per level.
    pub mine_batch: Option<usize>,
    /// Run critic-only updates for the first [`WARMUP_ITERATIONS`] iterations.
    pub warmup: bool,
    pub early_stop: bool,
    /// Zero the flow network's output layer so the initial flow vanishes.
    pub zero_init_flow: bool,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        Self {
            group: GroupSpec::aff2(),
            complex: true,
            solver: Solver::Rk4,
            loss: LossKind::Mine,
            mode: FlowMode::Ode,
            levels: 6,
            downscale: 2.0,
            n_terms: DEFAULT_TERMS,
            iterations: 500,
            lr_theta: 0.1,
            lr_phi: 0.01,
            lr_u: 0.01,
            seed: 0,
            mine_batch: None,
            warmup: false,
            early_stop: false,
            zero_init_flow: true,
        }
    }
}

impl RegistrationConfig {
    /// Defaults for volumes: SE(3) with rates 0.01 / 0.001 / 0.001.
    pub fn volume() -> Self {
        Self {
            group: GroupSpec::se3(),
            lr_theta: 0.01,
            lr_phi: 0.001,
            lr_u: 0.001,
            ..Self::default()
        }
    }

    /// Complex coefficients are only used in ODE mode.
    pub fn effective_complex(&self) -> bool {
        self.complex && self.mode == FlowMode::Ode
    }

    pub fn state_len(&self) -> usize {
        let n = self.group.n_generators();
        if self.effective_complex() {
            2 * n
        } else {
            n
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_theta", self.lr_theta),
            ("lr_phi", self.lr_phi),
            ("lr_u", self.lr_u),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if !(self.downscale > 1.0) || !self.downscale.is_finite() {
            return Err(Error::Config(format!(
                "downscale must exceed 1, got {}",
                self.downscale
            )));
        }
        if self.n_terms == 0 {
            return Err(Error::Config("n_terms must be at least 1".into()));
        }
        if self.mine_batch == Some(0) {
            return Err(Error::Config("mine batch must be at least 1".into()));
        }
        Ok(())
    }

    fn objective(&self) -> ObjectiveSpec {
        ObjectiveSpec {
            group: self.group.clone(),
            complex: self.effective_complex(),
            n_terms: self.n_terms,
            loss: self.loss,
            mine_batch: self.mine_batch,
        }
    }
}

/// Final transforms, per-level coefficients and the objective history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformResult {
    pub config: RegistrationConfig,
    pub fixed_dims: Vec<usize>,
    pub moving_dims: Vec<usize>,
    /// Maps fixed-image canonical coordinates to moving-image coordinates.
    pub h: ComplexMatrix,
    pub h_inv: ComplexMatrix,
    pub trajectory: CoefficientTrajectory,
    /// Objective before each update.
    pub loss_history: Vec<f64>,
    pub iterations_run: usize,
    pub stopped_early: bool,
}

impl TransformResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// An in-progress registration: pyramids, parameters, optimiser and sampler.
pub struct Registration {
    cfg: RegistrationConfig,
    fixed: ImagePyramid,
    moving: ImagePyramid,
    schedule: LevelSchedule,
    flow_spec: Option<MlpSpec>,
    critic_spec: Option<MlpSpec>,
    tape: ParameterTape,
    adam: Adam,
    rng: ChaCha8Rng,
    history: Vec<f64>,
    iteration: usize,
}

impl Registration {
    pub fn new(fixed: &Image, moving: &Image, cfg: RegistrationConfig) -> Result<Self> {
        cfg.validate()?;
        if fixed.ndim() != moving.ndim() || fixed.channels() != moving.channels() {
            return Err(Error::Dimension(format!(
                "fixed {:?}x{} and moving {:?}x{} differ in rank or channels",
                fixed.dims(),
                fixed.channels(),
                moving.dims(),
                moving.channels()
            )));
        }
        if fixed.ndim() != cfg.group.spatial_dim() {
            return Err(Error::Dimension(format!(
                "group {} acts in {} dimensions, images have {}",
                cfg.group.id,
                cfg.group.spatial_dim(),
                fixed.ndim()
            )));
        }
        let fixed_pyr = build_pyramid(fixed, cfg.levels, cfg.downscale)?;
        let moving_pyr = build_pyramid(moving, cfg.levels, cfg.downscale)?;
        let schedule = LevelSchedule::new(cfg.levels, cfg.downscale)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let mut tape = ParameterTape::new();
        tape.add_segment(SEG_U, vec![0.0; cfg.state_len()])?;
        let flow_spec = (cfg.mode == FlowMode::Ode).then(|| MlpSpec::flow(cfg.state_len()));
        if let Some(spec) = &flow_spec {
            tape.add_segment(SEG_PHI, spec.init_params(&mut rng, cfg.zero_init_flow))?;
        }
        let critic_spec = (cfg.loss == LossKind::Mine).then(|| MlpSpec::critic(fixed.channels()));
        if let Some(spec) = &critic_spec {
            tape.add_segment(SEG_THETA, spec.init_params(&mut rng, false))?;
        }
        let adam = Adam::new(
            AdamConfig::default(),
            [
                (SEG_U.to_string(), cfg.lr_u),
                (SEG_PHI.to_string(), cfg.lr_phi),
                (SEG_THETA.to_string(), cfg.lr_theta),
            ],
        );
        Ok(Self {
            cfg,
            fixed: fixed_pyr,
            moving: moving_pyr,
            schedule,
            flow_spec,
            critic_spec,
            tape,
            adam,
            rng,
            history: Vec::new(),
            iteration: 0,
        })
    }

    /// Replaces the parameters with a saved checkpoint of the same layout.
    pub fn restore(&mut self, cp: Checkpoint) -> Result<()> {
        let tape = ParameterTape::from_checkpoint(cp)?;
        if tape.segments() != self.tape.segments() {
            return Err(Error::Config(
                "checkpoint layout does not match this configuration".into(),
            ));
        }
        tape.check_finite()?;
        self.tape = tape;
        Ok(())
    }

    pub fn config(&self) -> &RegistrationConfig {
        &self.cfg
    }

    pub fn tape(&self) -> &ParameterTape {
        &self.tape
    }

    pub fn history(&self) -> &[f64] {
        &self.history
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.tape.checkpoint()
    }

    /// Objective and its gradient for arbitrary parameter values, drawing MINE
    /// batches from a generator seeded with `batch_seed`.
    pub fn evaluate(&self, values: &[f64], batch_seed: u64) -> Result<(f64, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        self.objective_and_gradient(values, &mut rng)
    }

    fn objective_and_gradient(&self, values: &[f64], rng: &mut ChaCha8Rng) -> Result<(f64, Vec<f64>)> {
        if values.len() != self.tape.values().len() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.tape.values().len(),
                values.len()
            )));
        }
        let mut g = Graph::new();
        let leaf = |g: &mut Graph, name: &str| -> Option<Var> {
            self.tape.segment(name).map(|s| {
                g.leaf(values[s.offset..s.offset + s.len].to_vec(), 1, s.len)
            })
        };
        let u = leaf(&mut g, SEG_U).expect("u segment");
        let phi = leaf(&mut g, SEG_PHI);
        let theta = leaf(&mut g, SEG_THETA);

        let states = match (&self.flow_spec, phi) {
            (Some(spec), Some(phi)) => {
                let net = spec.bind(&mut g, phi)?;
                integrate_var(&mut g, self.cfg.solver, u, &net, &self.schedule)?
            }
            _ => vec![u; self.cfg.levels],
        };
        let critic: Option<BoundMlp> = match (&self.critic_spec, theta) {
            (Some(spec), Some(theta)) => Some(spec.bind(&mut g, theta)?),
            _ => None,
        };
        let obj = symmetric_objective_var(
            &mut g,
            &self.fixed,
            &self.moving,
            &states,
            critic.as_ref(),
            &self.cfg.objective(),
            rng,
        )?;
        let value = g.value(obj)[0];
        if !value.is_finite() {
            return Ok((value, Vec::new()));
        }
        let loss = g.neg(obj);
        let grads = g.backward(loss)?;
        let mut flat = vec![0.0; values.len()];
        for (name, var) in [(SEG_U, Some(u)), (SEG_PHI, phi), (SEG_THETA, theta)] {
            if let (Some(seg), Some(var)) = (self.tape.segment(name), var) {
                // gradient of the objective, not of the descended loss
                for (o, x) in flat[seg.offset..seg.offset + seg.len].iter_mut().zip(grads.get(var)) {
                    *o = -x;
                }
            }
        }
        Ok((value, flat))
    }

    /// One objective evaluation and parameter update. Returns the objective
    /// value before the update.
    pub fn step(&mut self) -> Result<f64> {
        let values = self.tape.values().to_vec();
        let mut rng = self.rng.clone();
        let result = self.objective_and_gradient(&values, &mut rng);
        self.rng = rng;
        let (value, grad) = match result {
            Err(e) if e.is_numeric() => {
                return Err(Error::Divergence {
                    iteration: self.iteration,
                    value: f64::NAN,
                })
            }
            other => other?,
        };
        if !value.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration,
                value,
            });
        }
        // the tape holds the gradient of the negated objective
        let descent: Vec<f64> = grad.iter().map(|x| -x).collect();
        self.tape.zero_grads();
        for seg in self.tape.segments().to_vec() {
            self.tape
                .set_segment_grads(&seg.name, &descent[seg.offset..seg.offset + seg.len])?;
        }
        let warming = self.cfg.warmup
            && self.cfg.loss == LossKind::Mine
            && self.iteration < WARMUP_ITERATIONS;
        self.adam
            .step_filtered(&mut self.tape, |name| !warming || name == SEG_THETA)
            .map_err(|_| Error::Divergence {
                iteration: self.iteration,
                value,
            })?;
        self.tape.check_finite().map_err(|_| Error::Divergence {
            iteration: self.iteration,
            value,
        })?;
        self.history.push(value);
        self.iteration += 1;
        if self.iteration.is_multiple_of(50) {
            log::debug!("iteration {} objective {value:.6}", self.iteration);
        }
        Ok(value)
    }

    fn converged(&self) -> bool {
        let n = self.history.len();
        if n <= EARLY_STOP_WINDOW {
            return false;
        }
        let (now, then) = (self.history[n - 1], self.history[n - 1 - EARLY_STOP_WINDOW]);
        (now - then).abs() / then.abs().max(1e-12) < EARLY_STOP_TOL
    }

    /// Current per-level coefficients.
    pub fn trajectory(&self) -> Result<CoefficientTrajectory> {
        let complex = self.cfg.effective_complex();
        let u = self.tape.segment_values(SEG_U)?.to_vec();
        let states = match &self.flow_spec {
            Some(spec) => {
                let flow = FlowField::new(spec.clone(), self.tape.segment_values(SEG_PHI)?.to_vec())?;
                let mut backend = FnFlow {
                    field: |s: f64, v: &[f64]| flow.eval(s, v),
                };
                integrate(&mut backend, self.cfg.solver, u, &self.schedule)?
            }
            None => vec![u; self.cfg.levels],
        };
        Ok(CoefficientTrajectory {
            complex,
            scales: self.schedule.scales().to_vec(),
            states,
        })
    }

    /// Runs the remaining iterations and assembles the result.
    pub fn run(mut self) -> Result<TransformResult> {
        let mut stopped_early = false;
        while self.iteration < self.cfg.iterations {
            self.step()?;
            if self.cfg.early_stop && self.converged() {
                stopped_early = true;
                break;
            }
        }
        self.finish(stopped_early)
    }

    pub fn finish(&self, stopped_early: bool) -> Result<TransformResult> {
        let trajectory = self.trajectory()?;
        let v1: CoefficientVector = trajectory.finest();
        let (h, h_inv) = forward_inverse(&self.cfg.group, &v1, self.cfg.n_terms)?;
        Ok(TransformResult {
            config: self.cfg.clone(),
            fixed_dims: self.fixed.levels[0].dims().to_vec(),
            moving_dims: self.moving.levels[0].dims().to_vec(),
            h,
            h_inv,
            trajectory,
            loss_history: self.history.clone(),
            iterations_run: self.iteration,
            stopped_early,
        })
    }
}

/// Registers `moving` onto `fixed`.
pub fn register(fixed: &Image, moving: &Image, cfg: &RegistrationConfig) -> Result<TransformResult> {
    Registration::new(fixed, moving, cfg.clone())?.run()
}
