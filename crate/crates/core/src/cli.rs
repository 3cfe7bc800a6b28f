//! Command-line interface: `register`, `eval`, `synth`, `gridplot`, `bench`.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{
    naed, procedural_image, psnr, run_bench, ssim, synth_pair, write_bench_csv, BenchOptions,
    LandmarkSet,
};
use crate::geometry::{render_grid, write_polylines_csv};
use crate::imaging::{load_image, save_image, warp, Image};
use crate::lie_basis::{CoefficientVector, GroupId, GroupSpec};
use crate::losses::LossKind;
use crate::matexp::{forward_inverse, ComplexMatrix, DEFAULT_TERMS};
use crate::odeflow::Solver;
use crate::registration::{FlowMode, Registration, RegistrationConfig, TransformResult};

/// Exit code for usage errors (clap's default).
pub const EXIT_USAGE: i32 = 2;
/// Exit code for numeric failures: divergence, singular transforms.
pub const EXIT_NUMERIC: i32 = 3;
/// Exit code for any other failure.
pub const EXIT_FAILURE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "odecme", version, about = "Multi-resolution parametric image registration")]
pub struct Cli {
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Register a moving image onto a fixed image.
    Register(RegisterArgs),
    /// Landmark error of a transform, or SSIM/PSNR between two images.
    Eval(EvalArgs),
    /// Generate a synthetic pair with known ground truth.
    Synth(SynthArgs),
    /// Write a transformed grid as CSV polylines.
    Gridplot(GridArgs),
    /// Register every pair in a directory and tabulate the metrics.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RegOptions {
    /// aff2, se3 or sim3 (default: aff2 for images, se3 for volumes).
    #[arg(long)]
    pub group: Option<GroupId>,
    /// Complex coefficients (default).
    #[arg(long, overrides_with = "real")]
    pub complex: bool,
    /// Real coefficients only.
    #[arg(long)]
    pub real: bool,
    #[arg(long, default_value = "rk4")]
    pub solver: Solver,
    #[arg(long, default_value = "mine")]
    pub loss: LossKind,
    /// ode, or shared (one real vector for every level).
    #[arg(long, default_value = "ode")]
    pub mode: FlowMode,
    #[arg(long, default_value_t = 6)]
    pub levels: usize,
    #[arg(long, default_value_t = 2.0)]
    pub downscale: f64,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    /// Series terms of the matrix exponential.
    #[arg(long, default_value_t = DEFAULT_TERMS)]
    pub terms: usize,
    /// Critic learning rate (default 0.1, volumes 0.01).
    #[arg(long)]
    pub lr_theta: Option<f64>,
    /// Flow network learning rate (default 0.01, volumes 0.001).
    #[arg(long)]
    pub lr_phi: Option<f64>,
    /// Initial coefficient learning rate (default 0.01, volumes 0.001).
    #[arg(long)]
    pub lr_u: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Cap on MINE samples per level.
    #[arg(long)]
    pub mine_batch: Option<usize>,
    /// Critic-only updates for the first 50 iterations (MINE).
    #[arg(long)]
    pub warmup: bool,
    /// Stop once the objective changes by less than 1e-6 (relative) over 50 iterations.
    #[arg(long)]
    pub early_stop: bool,
    /// Random (instead of zero) initialisation of the flow network's output layer.
    #[arg(long)]
    pub random_flow_init: bool,
}

impl RegOptions {
    pub fn config(&self, ndim: usize) -> RegistrationConfig {
        let base = if ndim == 3 {
            RegistrationConfig::volume()
        } else {
            RegistrationConfig::default()
        };
        let group = self.group.map(GroupSpec::new).unwrap_or(base.group.clone());
        RegistrationConfig {
            group,
            complex: !self.real,
            solver: self.solver,
            loss: self.loss,
            mode: self.mode,
            levels: self.levels,
            downscale: self.downscale,
            n_terms: self.terms,
            iterations: self.iters,
            lr_theta: self.lr_theta.unwrap_or(base.lr_theta),
            lr_phi: self.lr_phi.unwrap_or(base.lr_phi),
            lr_u: self.lr_u.unwrap_or(base.lr_u),
            seed: self.seed,
            mine_batch: self.mine_batch,
            warmup: self.warmup,
            early_stop: self.early_stop,
            zero_init_flow: !self.random_flow_init,
        }
    }
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    /// Output directory for result.json, trajectory.csv and the warped image.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Resume from a parameter checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub reg: RegOptions,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Landmark CSV (`fx,fy,mx,my`, plus `fz,mz` for volumes).
    #[arg(long, requires = "transform")]
    pub landmarks: Option<PathBuf>,
    /// Landmarks are whitespace rows `x_fixed y_fixed x_moving y_moving`.
    #[arg(long)]
    pub fire_format: bool,
    /// Result JSON written by `register`.
    #[arg(long)]
    pub transform: Option<PathBuf>,
    /// Reference image for SSIM/PSNR.
    #[arg(long, visible_alias = "ref", requires = "test")]
    pub reference: Option<PathBuf>,
    /// Test image for SSIM/PSNR.
    #[arg(long = "test", requires = "reference")]
    pub test: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Source image; a procedural image is generated when omitted.
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Procedural image size, e.g. 128x128 or 48x48x48.
    #[arg(long, default_value = "128x128")]
    pub size: String,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long)]
    pub group: Option<GroupId>,
    #[arg(long, default_value_t = 0.05)]
    pub sd_real: f64,
    #[arg(long, default_value_t = 0.0)]
    pub sd_imag: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    /// Use `h` from a result JSON instead of a random transform.
    #[arg(long)]
    pub transform: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub sd_real: f64,
    #[arg(long, default_value_t = 0.0)]
    pub sd_imag: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 11)]
    pub lines: usize,
    #[arg(long, default_value_t = 101)]
    pub samples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Directory of pair directories holding fixed.*, moving.* and optional landmarks.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub fire_format: bool,
    /// Image rank of the pairs (2 or 3), selecting the default group and rates.
    #[arg(long, default_value_t = 2)]
    pub ndim: usize,
    #[command(flatten)]
    pub reg: RegOptions,
}

/// Ground truth written by `synth`.
#[derive(Debug, Serialize, Deserialize)]
pub struct SynthTruth {
    pub group: GroupId,
    pub true_v: CoefficientVector,
    pub h_true: ComplexMatrix,
}

fn parse_size(s: &str) -> Result<Vec<usize>> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad size {s:?}; expected e.g. 128x128")))?;
    if !(2..=3).contains(&dims.len()) || dims.contains(&0) {
        return Err(Error::Config(format!("bad size {s:?}")));
    }
    Ok(dims)
}

fn image_ext(img: &Image) -> &'static str {
    match (img.ndim(), img.channels()) {
        (2, 1) | (2, 3) => "png",
        _ => "raw",
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_result(path: &Path) -> Result<TransformResult> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    TransformResult::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn cmd_register(a: &RegisterArgs) -> Result<()> {
    let fixed = load_image(&a.fixed)?;
    let moving = load_image(&a.moving)?;
    let cfg = a.reg.config(fixed.ndim());
    let mut reg = Registration::new(&fixed, &moving, cfg)?;
    if let Some(p) = &a.resume {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        reg.restore(serde_json::from_str(&text)?)?;
    }
    let cfg = reg.config().clone();
    let result = reg.run()?;
    create_dir(&a.out_dir)?;
    write_text(&a.out_dir.join("result.json"), &result.to_json()?)?;
    result.trajectory.write_csv(&a.out_dir.join("trajectory.csv"))?;
    let registered = warp(&moving, &result.h, fixed.dims())?;
    save_image(
        &registered,
        &a.out_dir.join(format!("warped.{}", image_ext(&registered))),
    )?;
    log::info!(
        "registered with {} {} after {} iterations",
        cfg.loss,
        cfg.solver,
        result.iterations_run
    );
    println!("{}", a.out_dir.join("result.json").display());
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let mut did = false;
    if let (Some(lm), Some(tp)) = (&a.landmarks, &a.transform) {
        let result = read_result(tp)?;
        let (fd, md) = (result.fixed_dims.clone(), result.moving_dims.clone());
        let set = if a.fire_format {
            LandmarkSet::read_fire(lm, fd, md)?
        } else {
            LandmarkSet::read_csv(lm, fd, md)?
        };
        // moving landmarks go to the fixed frame through the inverse transform
        println!("naed={}", naed(&set, &result.h_inv)?);
        did = true;
    }
    if let (Some(r), Some(t)) = (&a.reference, &a.test) {
        let (ri, ti) = (load_image(r)?, load_image(t)?);
        println!("ssim={}", ssim(&ri, &ti)?);
        println!("psnr={}", psnr(&ri, &ti)?);
        did = true;
    }
    if !did {
        return Err(Error::Config(
            "eval needs --landmarks with --transform, or --reference with --test".into(),
        ));
    }
    Ok(())
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let img = match &a.image {
        Some(p) => load_image(p)?,
        None => procedural_image(&parse_size(&a.size)?, a.channels, a.seed)?,
    };
    let group = GroupSpec::new(a.group.unwrap_or(if img.ndim() == 3 {
        GroupId::SE3
    } else {
        GroupId::Aff2
    }));
    let pair = synth_pair(&img, &group, a.sd_real, a.sd_imag, a.seed)?;
    create_dir(&a.out_dir)?;
    let ext = image_ext(&img);
    save_image(&pair.fixed, &a.out_dir.join(format!("fixed.{ext}")))?;
    save_image(&pair.moving, &a.out_dir.join(format!("moving.{ext}")))?;
    pair.landmarks.write_csv(&a.out_dir.join("landmarks.csv"))?;
    let truth = SynthTruth {
        group: group.id,
        true_v: pair.true_v,
        h_true: pair.h_true,
    };
    write_text(
        &a.out_dir.join("truth.json"),
        &serde_json::to_string_pretty(&truth)?,
    )?;
    println!("{}", a.out_dir.display());
    Ok(())
}

fn cmd_gridplot(a: &GridArgs) -> Result<()> {
    let h = match &a.transform {
        Some(p) => read_result(p)?.h,
        None => {
            use rand::SeedableRng;
            use rand_distr::{Distribution, Normal};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(a.seed);
            let re = Normal::new(0.0, a.sd_real).map_err(|e| Error::Config(e.to_string()))?;
            let im = Normal::new(0.0, a.sd_imag).map_err(|e| Error::Config(e.to_string()))?;
            let v = CoefficientVector::new(
                (0..6).map(|_| re.sample(&mut rng)).collect(),
                (0..6).map(|_| im.sample(&mut rng)).collect(),
            )?;
            forward_inverse(&GroupSpec::aff2(), &v, DEFAULT_TERMS)?.0
        }
    };
    if h.dim() != 3 {
        return Err(Error::Dimension("gridplot needs a 2-D transform".into()));
    }
    let lines = render_grid(&h, a.lines, a.samples)?;
    write_polylines_csv(&lines, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_bench(a: &BenchArgs) -> Result<()> {
    let opts = BenchOptions {
        config: a.reg.config(a.ndim),
        fire_format: a.fire_format,
    };
    let rows = run_bench(&a.dir, &opts)?;
    write_bench_csv(&rows, &a.out)?;
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        log::warn!("{failed} of {} pairs failed", rows.len());
    }
    println!("{}", a.out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Gridplot(a) => cmd_gridplot(a),
        Command::Bench(a) => cmd_bench(a),
    }
}

/// Process exit code for an error returned by [`run`].
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_FAILURE
    }
}
