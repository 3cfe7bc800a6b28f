//! Registration objectives: MINE, MSE, NCC and the symmetric multi-resolution
//! objective.
//!
//! Every objective is a score to be maximised. MINE and NCC are used as they
//! are; MSE enters the objective negated.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffnet::gradcheck::{check_gradients, normal_vec, CheckOptions, Input, RegisteredOp};
use crate::diffnet::{BoundMlp, GradCheckReport, Graph, MlpSpec, Var};
use crate::error::{Error, Result};
use crate::imaging::{to_canonical, unravel, warp_points_var, warp_var, Image, ImagePyramid};
use crate::lie_basis::GroupSpec;
use crate::matexp::forward_inverse_var;
use crate::odeflow::CoefficientTrajectory;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mine,
    Mse,
    Ncc,
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mine" => Ok(LossKind::Mine),
            "mse" => Ok(LossKind::Mse),
            "ncc" => Ok(LossKind::Ncc),
            other => Err(Error::Config(format!("unknown loss {other:?}"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::Mine => "mine",
            LossKind::Mse => "mse",
            LossKind::Ncc => "ncc",
        })
    }
}

/// `N` pixel locations drawn without replacement plus a shuffled copy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleBatch {
    indices: Vec<usize>,
    /// `permuted[i] = indices[perm[i]]`.
    perm: Vec<usize>,
}

impl SampleBatch {
    /// Default batch size for a level: `min(4096, 10% of pixels)`, at least 2.
    pub fn default_size(n_pixels: usize) -> usize {
        (n_pixels / 10).clamp(2, 4096).min(n_pixels)
    }

    /// Partial Fisher–Yates over `0..n_pixels`, then a full shuffle for the
    /// marginal pairing.
    pub fn draw(n_pixels: usize, n: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if n == 0 || n > n_pixels {
            return Err(Error::Config(format!(
                "cannot draw {n} samples from {n_pixels} pixels"
            )));
        }
        let mut pool: Vec<usize> = (0..n_pixels).collect();
        for i in 0..n {
            let j = rng.random_range(i..n_pixels);
            pool.swap(i, j);
        }
        pool.truncate(n);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            perm.swap(i, j);
        }
        Ok(Self {
            indices: pool,
            perm,
        })
    }

    /// Explicit batch; `perm` must be a permutation of `0..indices.len()`.
    pub fn from_parts(indices: Vec<usize>, perm: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; perm.len()];
        if perm.len() != indices.len()
            || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::Config("perm is not a permutation of the batch".into()));
        }
        Ok(Self { indices, perm })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    /// Positions into the batch that form the shuffled pairing.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Pixel indices of the permuted set.
    pub fn permuted(&self) -> Vec<usize> {
        self.perm.iter().map(|&p| self.indices[p]).collect()
    }

    /// Canonical coordinates (`N × k`) of the sampled pixels of a `dims` grid.
    pub fn canonical_points(&self, dims: &[usize]) -> Vec<f64> {
        let mut idx = vec![0; dims.len()];
        let mut out = Vec::with_capacity(self.len() * dims.len());
        for &lin in &self.indices {
            unravel(lin, dims, &mut idx);
            out.extend(idx.iter().zip(dims).map(|(&i, &n)| to_canonical(i as f64, n)));
        }
        out
    }

    /// Pixel values at the batch (`N × C`).
    pub fn gather(&self, img: &Image) -> Result<Vec<f64>> {
        if let Some(&bad) = self.indices.iter().find(|&&i| i >= img.n_pixels()) {
            return Err(Error::Dimension(format!(
                "sample index {bad} outside an image of {} pixels",
                img.n_pixels()
            )));
        }
        Ok(self
            .indices
            .iter()
            .flat_map(|&i| img.pixel(i).iter().copied())
            .collect())
    }
}

/// MINE statistics network `f_θ` with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Critic {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

impl Critic {
    pub fn new(spec: MlpSpec, params: Vec<f64>) -> Result<Self> {
        if spec.output_len() != 1 || !spec.input_len().is_multiple_of(2) {
            return Err(Error::Config(format!(
                "critic must map 2C inputs to one output, got {:?}",
                spec.widths
            )));
        }
        if params.len() != spec.n_params() {
            return Err(Error::Dimension(format!(
                "critic needs {} parameters, got {}",
                spec.n_params(),
                params.len()
            )));
        }
        Ok(Self { spec, params })
    }
}

/// Recorded Donsker–Varadhan bound on `N × C` samples `p`, `q`:
/// `mean f(p_i, q_i) − log mean exp f(p_i, q_perm(i))`.
pub fn mine_var(g: &mut Graph, p: Var, q: Var, critic: &BoundMlp, perm: &[usize]) -> Result<Var> {
    if g.shape(p) != g.shape(q) {
        return Err(Error::Dimension(format!(
            "mine: sample blocks {:?} and {:?} differ",
            g.shape(p),
            g.shape(q)
        )));
    }
    if perm.len() != g.shape(p).0 {
        return Err(Error::Dimension(format!(
            "mine: permutation of {} for {} samples",
            perm.len(),
            g.shape(p).0
        )));
    }
    let joint = g.concat_cols(p, q)?;
    let qs = g.gather_rows(q, perm)?;
    let marginal = g.concat_cols(p, qs)?;
    let fj = critic.forward(g, joint)?;
    let fm = critic.forward(g, marginal)?;
    let t1 = g.mean(fj);
    let t2 = g.log_mean_exp(fm);
    g.sub(t1, t2)
}

/// MINE between two images at the pixels of `batch`.
pub fn mine(p: &Image, q: &Image, critic: &Critic, batch: &SampleBatch) -> Result<f64> {
    if !p.same_shape(q) {
        return Err(Error::Dimension("mine: images differ in shape".into()));
    }
    if critic.spec.input_len() != 2 * p.channels() {
        return Err(Error::Dimension(format!(
            "critic expects {} inputs for {} channels",
            critic.spec.input_len(),
            p.channels()
        )));
    }
    let c = p.channels();
    let mut g = Graph::new();
    let pv = g.constant(batch.gather(p)?, batch.len(), c);
    let qv = g.constant(batch.gather(q)?, batch.len(), c);
    let th = g.constant(critic.params.clone(), 1, critic.params.len());
    let net = critic.spec.bind(&mut g, th)?;
    let out = mine_var(&mut g, pv, qv, &net, batch.perm())?;
    Ok(g.value(out)[0])
}

/// Recorded mean squared difference of two equal-shaped blocks.
pub fn mse_var(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let d = g.sub(p, q)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// Per-channel Pearson correlation averaged over channels; `p`, `q` are `N × C`.
/// A channel with (near-)zero variance contributes 0.
pub fn ncc_var(g: &mut Graph, p: Var, q: Var) -> Result<Var> {
    let (n, c) = g.shape(p);
    if g.shape(q) != (n, c) {
        return Err(Error::Dimension(format!(
            "ncc: blocks {:?} and {:?} differ",
            (n, c),
            g.shape(q)
        )));
    }
    let pv = g.value(p).to_vec();
    let qv = g.value(q).to_vec();
    let mut total = 0.0;
    // per channel: (centred p, centred q, r, sxx, syy), or None when degenerate
    let mut stats: Vec<Option<(Vec<f64>, Vec<f64>, f64, f64, f64)>> = Vec::with_capacity(c);
    for ch in 0..c {
        let col = |v: &[f64]| -> Vec<f64> { (0..n).map(|i| v[i * c + ch]).collect() };
        let (x, y) = (col(&pv), col(&qv));
        let mx = x.iter().sum::<f64>() / n as f64;
        let my = y.iter().sum::<f64>() / n as f64;
        let xc: Vec<f64> = x.iter().map(|v| v - mx).collect();
        let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
        let sxx: f64 = xc.iter().map(|v| v * v).sum();
        let syy: f64 = yc.iter().map(|v| v * v).sum();
        let sxy: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
        let tiny = 1e-12 * n as f64;
        if sxx <= tiny || syy <= tiny {
            log::warn!("ncc: channel {ch} has zero variance; correlation taken as 0");
            stats.push(None);
            continue;
        }
        let r = sxy / (sxx * syy).sqrt();
        total += r;
        stats.push(Some((xc, yc, r, sxx, syy)));
    }
    let value = total / c as f64;
    Ok(g.custom(
        &[p, q],
        vec![value],
        1,
        1,
        Box::new(move |gout, grads| {
            let w = gout[0] / c as f64;
            for (ch, s) in stats.iter().enumerate() {
                let Some((xc, yc, r, sxx, syy)) = s else {
                    continue;
                };
                let norm = (sxx * syy).sqrt();
                if let Some(slot) = grads.slot(p) {
                    for i in 0..n {
                        slot[i * c + ch] += w * (yc[i] / norm - r * xc[i] / sxx);
                    }
                }
                if let Some(slot) = grads.slot(q) {
                    for i in 0..n {
                        slot[i * c + ch] += w * (xc[i] / norm - r * yc[i] / syy);
                    }
                }
            }
        }),
    ))
}

fn image_node(g: &mut Graph, img: &Image) -> Var {
    g.constant(img.data().to_vec(), img.n_pixels(), img.channels())
}

pub fn mse(p: &Image, q: &Image) -> Result<f64> {
    if !p.same_shape(q) {
        return Err(Error::Dimension("mse: images differ in shape".into()));
    }
    let mut g = Graph::new();
    let (a, b) = (image_node(&mut g, p), image_node(&mut g, q));
    let out = mse_var(&mut g, a, b)?;
    Ok(g.value(out)[0])
}

pub fn ncc(p: &Image, q: &Image) -> Result<f64> {
    if !p.same_shape(q) {
        return Err(Error::Dimension("ncc: images differ in shape".into()));
    }
    let mut g = Graph::new();
    let (a, b) = (image_node(&mut g, p), image_node(&mut g, q));
    let out = ncc_var(&mut g, a, b)?;
    Ok(g.value(out)[0])
}

/// Settings shared by every term of the symmetric objective.
#[derive(Clone, Debug)]
pub struct ObjectiveSpec {
    pub group: GroupSpec,
    pub complex: bool,
    pub n_terms: usize,
    pub loss: LossKind,
    /// Cap on the MINE batch per level; `None` uses [`SampleBatch::default_size`].
    pub mine_batch: Option<usize>,
}

impl ObjectiveSpec {
    fn batch_size(&self, n_pixels: usize) -> usize {
        match self.mine_batch {
            Some(n) => n.clamp(1, n_pixels),
            None => SampleBatch::default_size(n_pixels),
        }
    }
}

/// One directional term: score of `target` against `Warp(source, h)` sampled on
/// the target grid.
fn directional_term(
    g: &mut Graph,
    target: &Image,
    source: &Image,
    h: Var,
    critic: Option<&BoundMlp>,
    obj: &ObjectiveSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    match obj.loss {
        LossKind::Mine => {
            let critic = critic
                .ok_or_else(|| Error::Config("MINE objective needs a critic network".into()))?;
            let n = obj.batch_size(target.n_pixels());
            let batch = SampleBatch::draw(target.n_pixels(), n, rng)?;
            let p = g.constant(batch.gather(target)?, n, target.channels());
            let pts = batch.canonical_points(target.dims());
            let q = warp_points_var(g, source, h, &pts, 0.0)?;
            mine_var(g, p, q, critic, batch.perm())
        }
        LossKind::Mse => {
            let p = image_node(g, target);
            let q = warp_var(g, source, h, target.dims())?;
            let m = mse_var(g, p, q)?;
            Ok(g.neg(m))
        }
        LossKind::Ncc => {
            let p = image_node(g, target);
            let q = warp_var(g, source, h, target.dims())?;
            ncc_var(g, p, q)
        }
    }
}

fn check_pyramids(fixed: &ImagePyramid, moving: &ImagePyramid, n_states: usize) -> Result<()> {
    if fixed.n_levels() != moving.n_levels() || fixed.n_levels() != n_states {
        return Err(Error::Dimension(format!(
            "pyramids have {} and {} levels for {n_states} coefficient states",
            fixed.n_levels(),
            moving.n_levels()
        )));
    }
    let (f, m) = (&fixed.levels[0], &moving.levels[0]);
    if f.ndim() != m.ndim() || f.channels() != m.channels() {
        return Err(Error::Dimension(
            "fixed and moving images differ in rank or channel count".into(),
        ));
    }
    Ok(())
}

/// Recorded `Σ_l [score(T_l, Warp(M_l, H_l)) + score(M_l, Warp(T_l, H_l⁻¹))]`.
/// `states[l − 1]` is the coefficient state of level `l`. MINE draws a fresh
/// batch per level and direction, forward first.
pub fn symmetric_objective_var(
    g: &mut Graph,
    fixed: &ImagePyramid,
    moving: &ImagePyramid,
    states: &[Var],
    critic: Option<&BoundMlp>,
    obj: &ObjectiveSpec,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    check_pyramids(fixed, moving, states.len())?;
    let mut level_terms = Vec::with_capacity(states.len());
    for (l, &state) in states.iter().enumerate() {
        let (h, h_inv) = forward_inverse_var(g, &obj.group, state, obj.complex, obj.n_terms)?;
        let (t, m) = (&fixed.levels[l], &moving.levels[l]);
        let fwd = directional_term(g, t, m, h, critic, obj, rng)?;
        let inv = directional_term(g, m, t, h_inv, critic, obj, rng)?;
        level_terms.push(g.add(fwd, inv)?);
    }
    let terms: Vec<(Var, f64)> = level_terms.into_iter().map(|v| (v, 1.0)).collect();
    g.lincomb(&terms)
}

/// Value of [`symmetric_objective_var`] for a fixed trajectory and critic.
pub fn symmetric_objective(
    fixed: &ImagePyramid,
    moving: &ImagePyramid,
    trajectory: &CoefficientTrajectory,
    critic: Option<&Critic>,
    obj: &ObjectiveSpec,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    if trajectory.complex != obj.complex {
        return Err(Error::Config(
            "trajectory and objective disagree on complex coefficients".into(),
        ));
    }
    let mut g = Graph::new();
    let states: Vec<Var> = trajectory
        .states
        .iter()
        .map(|s| g.constant(s.clone(), 1, s.len()))
        .collect();
    let net = match critic {
        Some(c) => {
            let th = g.constant(c.params.clone(), 1, c.params.len());
            Some(c.spec.bind(&mut g, th)?)
        }
        None => None,
    };
    let out = symmetric_objective_var(&mut g, fixed, moving, &states, net.as_ref(), obj, rng)?;
    Ok(g.value(out)[0])
}

fn check_mine(seed: u64) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = MlpSpec::critic(2);
    let theta = spec.init_params(&mut rng, false);
    let p = normal_vec(&mut rng, 16, 0.3);
    let q = normal_vec(&mut rng, 16, 0.3);
    let perm = SampleBatch::draw(8, 8, &mut rng)?.perm().to_vec();
    check_gradients(
        "mine",
        &[Input::row(theta), Input::new(q, 8, 2)],
        CheckOptions {
            step: 1e-6,
            ..CheckOptions::default()
        },
        move |g, v| {
            let net = spec.bind(g, v[0])?;
            let pv = g.constant(p.clone(), 8, 2);
            mine_var(g, pv, v[1], &net, &perm)
        },
    )
}

fn check_mse_ncc(seed: u64, ncc: bool) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = normal_vec(&mut rng, 30, 1.0);
    let q = normal_vec(&mut rng, 30, 1.0);
    check_gradients(
        if ncc { "ncc" } else { "mse" },
        &[Input::new(p, 10, 3), Input::new(q, 10, 3)],
        CheckOptions::default(),
        move |g, v| {
            if ncc {
                ncc_var(g, v[0], v[1])
            } else {
                mse_var(g, v[0], v[1])
            }
        },
    )
}

pub(crate) fn gradcheck_cases() -> Vec<RegisteredOp> {
    vec![
        RegisteredOp {
            name: "mine",
            threshold: 1e-4,
            run: check_mine,
        },
        RegisteredOp {
            name: "mse",
            threshold: 1e-4,
            run: |s| check_mse_ncc(s, false),
        },
        RegisteredOp {
            name: "ncc",
            threshold: 1e-4,
            run: |s| check_mse_ncc(s, true),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{Adam, AdamConfig, ParameterTape};
    use crate::imaging::build_pyramid;
    use crate::lie_basis::CoefficientVector;
    use crate::matexp::forward_inverse;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn noise_image(dims: &[usize], channels: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(dims.to_vec(), channels, |_, _| rng.random::<f64>()).unwrap()
    }

    fn smooth(dims: &[usize], phase: f64) -> Image {
        Image::from_fn(dims.to_vec(), 1, |i, _| {
            0.5 + 0.3 * (0.9 * i[0] as f64 + phase).sin() * (0.7 * i[1] as f64).cos()
        })
        .unwrap()
    }

    #[test]
    fn batch_is_a_sample_without_replacement() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = SampleBatch::draw(100, 40, &mut rng).unwrap();
        let mut idx = b.indices().to_vec();
        idx.sort();
        idx.dedup();
        assert_eq!(idx.len(), 40);
        assert!(idx.iter().all(|&i| i < 100));
        let mut p = b.permuted();
        p.sort();
        assert_eq!(p, idx);
        assert!(SampleBatch::draw(10, 11, &mut rng).is_err());
        assert!(SampleBatch::draw(10, 0, &mut rng).is_err());
        let again = SampleBatch::draw(100, 40, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(again, b);
    }

    #[test]
    fn default_batch_sizes() {
        assert_eq!(SampleBatch::default_size(16384), 1638);
        assert_eq!(SampleBatch::default_size(1 << 20), 4096);
        assert_eq!(SampleBatch::default_size(16), 2);
    }

    #[test]
    fn constant_critic_gives_zero() {
        let spec = MlpSpec::critic(1);
        let mut params = vec![0.0; spec.n_params()];
        *params.last_mut().unwrap() = 2.5;
        let critic = Critic::new(spec, params).unwrap();
        let (p, q) = (noise_image(&[8, 8], 1, 2), noise_image(&[8, 8], 1, 3));
        let batch = SampleBatch::draw(64, 20, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert!(mine(&p, &q, &critic, &batch).unwrap().abs() < 1e-14);
    }

    #[test]
    fn single_sample_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = MlpSpec::critic(1);
        let critic = Critic::new(spec.clone(), spec.init_params(&mut rng, false)).unwrap();
        let (p, q) = (noise_image(&[4, 4], 1, 6), noise_image(&[4, 4], 1, 7));
        // batch of one pixel paired with itself, then check f(p,q) − f(p,q') on a pair
        let b1 = SampleBatch::from_parts(vec![5], vec![0]).unwrap();
        let f = |a: f64, b: f64| mlp_value(&critic, a, b);
        let got = mine(&p, &q, &critic, &b1).unwrap();
        assert!(got.abs() < 1e-14);
        // two samples: mean f(joint) − log mean exp f(marginal)
        let b2 = SampleBatch::from_parts(vec![3, 9], vec![1, 0]).unwrap();
        let (p3, p9, q3, q9) = (p.data()[3], p.data()[9], q.data()[3], q.data()[9]);
        let expect = 0.5 * (f(p3, q3) + f(p9, q9))
            - (0.5 * (f(p3, q9).exp() + f(p9, q3).exp())).ln();
        assert!((mine(&p, &q, &critic, &b2).unwrap() - expect).abs() < 1e-12);
    }

    fn mlp_value(critic: &Critic, a: f64, b: f64) -> f64 {
        crate::diffnet::mlp_forward(&critic.spec, &critic.params, &[a, b]).unwrap()[0]
    }

    #[test]
    fn mse_and_ncc_reference_values() {
        let p = noise_image(&[9, 7], 2, 8);
        assert_eq!(mse(&p, &p).unwrap(), 0.0);
        assert!((ncc(&p, &p).unwrap() - 1.0).abs() < 1e-12);
        let inv = p.map(|x| 1.0 - x).unwrap();
        assert!((ncc(&p, &inv).unwrap() + 1.0).abs() < 1e-12);
        let shifted = p.map(|x| x + 0.1).unwrap();
        assert!((mse(&p, &shifted).unwrap() - 0.01).abs() < 1e-12);
        assert!((ncc(&p, &shifted).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ncc_zero_variance_is_zero() {
        let p = noise_image(&[5, 5], 1, 9);
        let flat = Image::filled(vec![5, 5], 1, 0.3).unwrap();
        assert_eq!(ncc(&p, &flat).unwrap(), 0.0);
    }

    #[test]
    fn identical_images_score_zero_with_mse() {
        let img = smooth(&[16, 16], 0.0);
        let pyr = build_pyramid(&img, 2, 2.0).unwrap();
        let obj = ObjectiveSpec {
            group: GroupSpec::aff2(),
            complex: true,
            n_terms: 10,
            loss: LossKind::Mse,
            mine_batch: None,
        };
        let traj = CoefficientTrajectory {
            complex: true,
            scales: vec![1.0, 0.5],
            states: vec![vec![0.0; 12]; 2],
        };
        let v = symmetric_objective(&pyr, &pyr, &traj, None, &obj, &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(v, 0.0);
    }

    /// Straight-line reference: complex point map, bilinear lookup with zero
    /// fill, squared differences, all written out by hand.
    fn reference_term(target: &Image, source: &Image, h: &crate::matexp::ComplexMatrix) -> f64 {
        let (tw, th) = (target.width(), target.height());
        let (sw, sh) = (source.width(), source.height());
        let hr = h.re.as_slice();
        let hi = h.im.as_slice();
        let mut acc = 0.0;
        for y in 0..th {
            for x in 0..tw {
                let cx = -1.0 + 2.0 * x as f64 / (tw - 1) as f64;
                let cy = -1.0 + 2.0 * y as f64 / (th - 1) as f64;
                let row = |m: &[f64], r: usize| m[3 * r] * cx + m[3 * r + 1] * cy + m[3 * r + 2];
                let (xr, yr, zr) = (row(hr, 0), row(hr, 1), row(hr, 2));
                let (xi, yi, zi) = (row(hi, 0), row(hi, 1), row(hi, 2));
                let den = zr * zr + zi * zi;
                let u = (xr * zr + xi * zi) / den;
                let v = (yr * zr + yi * zi) / den;
                let px = (u + 1.0) * (sw - 1) as f64 / 2.0;
                let py = (v + 1.0) * (sh - 1) as f64 / 2.0;
                let (x0, y0) = (px.floor(), py.floor());
                let (fx, fy) = (px - x0, py - y0);
                let at = |ix: f64, iy: f64| {
                    if ix < 0.0 || iy < 0.0 || ix > (sw - 1) as f64 || iy > (sh - 1) as f64 {
                        0.0
                    } else {
                        source.get(&[ix as usize, iy as usize], 0)
                    }
                };
                let s = (1.0 - fx) * (1.0 - fy) * at(x0, y0)
                    + fx * (1.0 - fy) * at(x0 + 1.0, y0)
                    + (1.0 - fx) * fy * at(x0, y0 + 1.0)
                    + fx * fy * at(x0 + 1.0, y0 + 1.0);
                let d = target.get(&[x, y], 0) - s;
                acc += d * d;
            }
        }
        acc / (tw * th) as f64
    }

    #[test]
    fn tiny_pair_matches_hand_computed_sum() {
        let fixed = smooth(&[8, 8], 0.0);
        let moving = smooth(&[8, 8], 0.4);
        let pf = build_pyramid(&fixed, 2, 2.0).unwrap();
        let pm = build_pyramid(&moving, 2, 2.0).unwrap();
        let v1 = CoefficientVector::new(
            vec![0.03, -0.02, 0.05, 0.01, -0.04, 0.02],
            vec![0.01, 0.0, -0.02, 0.01, 0.0, 0.005],
        )
        .unwrap();
        let v2 = v1.scaled(0.8);
        let traj = CoefficientTrajectory {
            complex: true,
            scales: vec![1.0, 0.5],
            states: vec![v1.to_state(true), v2.to_state(true)],
        };
        let obj = ObjectiveSpec {
            group: GroupSpec::aff2(),
            complex: true,
            n_terms: 10,
            loss: LossKind::Mse,
            mine_batch: None,
        };
        let got =
            symmetric_objective(&pf, &pm, &traj, None, &obj, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        let mut expect = 0.0;
        for (l, v) in [v1, v2].iter().enumerate() {
            let (h, hi) = forward_inverse(&obj.group, v, 10).unwrap();
            expect -= reference_term(&pf.levels[l], &pm.levels[l], &h);
            expect -= reference_term(&pm.levels[l], &pf.levels[l], &hi);
        }
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn swap_symmetry_is_exact() {
        let pf = build_pyramid(&smooth(&[12, 10], 0.0), 2, 2.0).unwrap();
        let pm = build_pyramid(&smooth(&[12, 10], 0.7), 2, 2.0).unwrap();
        let v = CoefficientVector::new(vec![0.05, 0.02, -0.03, 0.0, 0.01, 0.02], vec![0.01; 6])
            .unwrap();
        let traj = |v: &CoefficientVector| CoefficientTrajectory {
            complex: true,
            scales: vec![1.0, 0.5],
            states: vec![v.to_state(true), v.scaled(0.5).to_state(true)],
        };
        for loss in [LossKind::Mse, LossKind::Ncc] {
            let obj = ObjectiveSpec {
                group: GroupSpec::aff2(),
                complex: true,
                n_terms: 10,
                loss,
                mine_batch: None,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let a = symmetric_objective(&pf, &pm, &traj(&v), None, &obj, &mut rng).unwrap();
            let b = symmetric_objective(&pm, &pf, &traj(&v.neg()), None, &obj, &mut rng).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mine_objective_is_deterministic_per_seed() {
        let pf = build_pyramid(&smooth(&[16, 16], 0.0), 2, 2.0).unwrap();
        let pm = build_pyramid(&smooth(&[16, 16], 0.3), 2, 2.0).unwrap();
        let spec = MlpSpec::critic(1);
        let critic =
            Critic::new(spec.clone(), spec.init_params(&mut ChaCha8Rng::seed_from_u64(2), false))
                .unwrap();
        let traj = CoefficientTrajectory {
            complex: false,
            scales: vec![1.0, 0.5],
            states: vec![vec![0.01; 6]; 2],
        };
        let obj = ObjectiveSpec {
            group: GroupSpec::aff2(),
            complex: false,
            n_terms: 10,
            loss: LossKind::Mine,
            mine_batch: None,
        };
        let run = |s| {
            symmetric_objective(&pf, &pm, &traj, Some(&critic), &obj, &mut ChaCha8Rng::seed_from_u64(s))
                .unwrap()
        };
        assert_eq!(run(5), run(5));
        assert!(symmetric_objective(&pf, &pm, &traj, None, &obj, &mut ChaCha8Rng::seed_from_u64(0))
            .is_err());
    }

    /// Critic-only training on correlated Gaussian samples rendered as images.
    pub(crate) fn gaussian_mi_estimate(seed: u64, steps: usize, batch: usize) -> f64 {
        let rho: f64 = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dims = [64, 64];
        let n = 64 * 64;
        let mut xs = Vec::with_capacity(n);
        let mut ys = Vec::with_capacity(n);
        for _ in 0..n {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            xs.push(0.5 + a / 8.0);
            ys.push(0.5 + (rho * a + (1.0 - rho * rho).sqrt() * b) / 8.0);
        }
        let p = Image::new(dims.to_vec(), 1, xs).unwrap();
        let q = Image::new(dims.to_vec(), 1, ys).unwrap();
        let spec = MlpSpec::critic(1);
        let mut tape = ParameterTape::new();
        tape.add_segment("theta", spec.init_params(&mut rng, false)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), [("theta".to_string(), 1e-3)]);
        for _ in 0..steps {
            let b = SampleBatch::draw(n, batch, &mut rng).unwrap();
            let mut g = Graph::new();
            let th = g.leaf(tape.values().to_vec(), 1, tape.values().len());
            let net = spec.bind(&mut g, th).unwrap();
            let pv = g.constant(b.gather(&p).unwrap(), batch, 1);
            let qv = g.constant(b.gather(&q).unwrap(), batch, 1);
            let m = mine_var(&mut g, pv, qv, &net, b.perm()).unwrap();
            let loss = g.neg(m);
            let grads = g.backward(loss).unwrap();
            tape.set_segment_grads("theta", &grads.get(th)).unwrap();
            adam.step(&mut tape).unwrap();
        }
        let critic = Critic::new(spec, tape.values().to_vec()).unwrap();
        let b = SampleBatch::draw(n, n, &mut rng).unwrap();
        mine(&p, &q, &critic, &b).unwrap()
    }

    #[test]
    fn critic_learns_gaussian_dependence() {
        let est = gaussian_mi_estimate(1, 400, 256);
        assert!(est > 0.5 && est < 1.4, "estimate {est}");
    }

    #[test]
    fn loss_gradients() {
        for op in gradcheck_cases() {
            let r = (op.run)(3).unwrap();
            assert!(r.passed(), "{r:?}");
        }
    }

    #[test]
    fn loss_kind_parsing() {
        assert_eq!("MINE".parse::<LossKind>().unwrap(), LossKind::Mine);
        assert_eq!(LossKind::Ncc.to_string(), "ncc");
        assert!("l1".parse::<LossKind>().is_err());
    }
}
