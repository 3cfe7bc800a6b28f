//! Generator bases of the supported matrix Lie algebras and the map from a
//! (complex) coefficient vector to an algebra element `Σ v_i B_i`.
//!
//! SE(2) has no basis of its own; restrict [`GroupSpec::aff2`] with a mask
//! instead (e.g. translations only via `[true, true, false, false, false, false]`).

use serde::{Deserialize, Serialize};

use crate::diffnet::gradcheck::{check_gradients, normal_vec, CheckOptions, Input, RegisteredOp};
use crate::diffnet::{GradCheckReport, Graph, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::matexp::ComplexMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupId {
    Aff2,
    SE3,
    Sim3,
}

impl std::str::FromStr for GroupId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "aff2" => Ok(GroupId::Aff2),
            "se3" => Ok(GroupId::SE3),
            "sim3" => Ok(GroupId::Sim3),
            other => Err(Error::Config(format!("unknown group {other}"))),
        }
    }
}

impl std::fmt::Display for GroupId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GroupId::Aff2 => "aff2",
            GroupId::SE3 => "se3",
            GroupId::Sim3 => "sim3",
        })
    }
}

/// A matrix Lie group together with the subset of generators that is active.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub id: GroupId,
    mask: Vec<bool>,
}

impl GroupSpec {
    pub fn new(id: GroupId) -> Self {
        let n = Self::generator_count(id);
        Self {
            id,
            mask: vec![true; n],
        }
    }

    pub fn aff2() -> Self {
        Self::new(GroupId::Aff2)
    }

    pub fn se3() -> Self {
        Self::new(GroupId::SE3)
    }

    pub fn sim3() -> Self {
        Self::new(GroupId::Sim3)
    }

    fn generator_count(id: GroupId) -> usize {
        match id {
            GroupId::Aff2 | GroupId::SE3 => 6,
            GroupId::Sim3 => 7,
        }
    }

    /// Restricts the active generators; inactive coefficients are ignored by
    /// [`assemble`].
    pub fn with_mask(mut self, mask: Vec<bool>) -> Result<Self> {
        if mask.len() != self.n_generators() {
            return Err(Error::Dimension(format!(
                "mask has {} entries, {} has {} generators",
                mask.len(),
                self.id,
                self.n_generators()
            )));
        }
        self.mask = mask;
        Ok(self)
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn matrix_dim(&self) -> usize {
        match self.id {
            GroupId::Aff2 => 3,
            GroupId::SE3 | GroupId::Sim3 => 4,
        }
    }

    /// Spatial dimension of the points the group acts on.
    pub fn spatial_dim(&self) -> usize {
        self.matrix_dim() - 1
    }

    pub fn n_generators(&self) -> usize {
        Self::generator_count(self.id)
    }
}

/// Generator matrices `B_1..B_n` of the group (mask not applied).
pub fn generators(spec: &GroupSpec) -> Vec<Matrix> {
    match spec.id {
        GroupId::Aff2 => {
            let mut b5 = Matrix::zeros(3);
            b5[(0, 0)] = 1.0;
            b5[(1, 1)] = -1.0;
            let mut b6 = Matrix::zeros(3);
            b6[(1, 1)] = -1.0;
            b6[(2, 2)] = 1.0;
            vec![
                Matrix::unit(3, 0, 2, 1.0),
                Matrix::unit(3, 1, 2, 1.0),
                Matrix::unit(3, 0, 1, 1.0),
                Matrix::unit(3, 1, 0, 1.0),
                b5,
                b6,
            ]
        }
        GroupId::SE3 | GroupId::Sim3 => {
            let skew = |(r1, c1): (usize, usize), (r2, c2): (usize, usize)| {
                let mut m = Matrix::unit(4, r1, c1, -1.0);
                m[(r2, c2)] = 1.0;
                m
            };
            let mut gens = vec![
                Matrix::unit(4, 0, 3, 1.0),
                Matrix::unit(4, 1, 3, 1.0),
                Matrix::unit(4, 2, 3, 1.0),
                skew((1, 2), (2, 1)),
                skew((2, 0), (0, 2)),
                skew((0, 1), (1, 0)),
            ];
            if spec.id == GroupId::Sim3 {
                gens.push(Matrix::unit(4, 3, 3, -1.0));
            }
            gens
        }
    }
}

/// Complex coefficients over a generator basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl CoefficientVector {
    pub fn new(re: Vec<f64>, im: Vec<f64>) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::Dimension(format!(
                "real part has {} entries, imaginary part {}",
                re.len(),
                im.len()
            )));
        }
        if re.iter().chain(&im).any(|x| !x.is_finite()) {
            return Err(Error::Numeric("coefficient vector is not finite".into()));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            re: vec![0.0; n],
            im: vec![0.0; n],
        }
    }

    pub fn real(re: Vec<f64>) -> Self {
        let n = re.len();
        Self {
            re,
            im: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.re.len()
    }

    pub fn is_empty(&self) -> bool {
        self.re.is_empty()
    }

    pub fn is_real(&self) -> bool {
        self.im.iter().all(|&x| x == 0.0)
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            re: self.re.iter().map(|x| k * x).collect(),
            im: self.im.iter().map(|x| k * x).collect(),
        }
    }

    pub fn neg(&self) -> Self {
        self.scaled(-1.0)
    }

    /// Flat real state: `re` alone, or `re ∥ im` when `complex`.
    pub fn to_state(&self, complex: bool) -> Vec<f64> {
        let mut s = self.re.clone();
        if complex {
            s.extend_from_slice(&self.im);
        }
        s
    }

    pub fn from_state(state: &[f64], complex: bool) -> Self {
        if complex {
            let n = state.len() / 2;
            Self {
                re: state[..n].to_vec(),
                im: state[n..2 * n].to_vec(),
            }
        } else {
            Self::real(state.to_vec())
        }
    }
}

/// `Σ v_i B_i` over the active generators, real and imaginary parts separately.
pub fn assemble(spec: &GroupSpec, v: &CoefficientVector) -> Result<ComplexMatrix> {
    if v.len() != spec.n_generators() {
        return Err(Error::Dimension(format!(
            "{} coefficients for {} generators",
            v.len(),
            spec.n_generators()
        )));
    }
    let d = spec.matrix_dim();
    let mut re = Matrix::zeros(d);
    let mut im = Matrix::zeros(d);
    for (i, b) in generators(spec).iter().enumerate() {
        if spec.mask[i] {
            re.add_scaled(b, v.re[i]);
            im.add_scaled(b, v.im[i]);
        }
    }
    ComplexMatrix::new(re, im)
}

/// Recorded [`assemble`]: `state` is `1 × n` (real) or `1 × 2n` (re ∥ im); the
/// output is the `2 × d²` complex-matrix layout used by [`crate::matexp`].
pub fn assemble_var(g: &mut Graph, spec: &GroupSpec, state: Var, complex: bool) -> Result<Var> {
    let n = spec.n_generators();
    let expected = if complex { 2 * n } else { n };
    let len = g.value(state).len();
    if len != expected {
        return Err(Error::Dimension(format!(
            "coefficient state has {len} entries, expected {expected}"
        )));
    }
    let d2 = spec.matrix_dim().pow(2);
    let gens: Vec<Vec<f64>> = generators(spec)
        .into_iter()
        .zip(spec.mask())
        .map(|(b, &on)| if on { b.into_vec() } else { vec![0.0; d2] })
        .collect();
    let sv = g.value(state).to_vec();
    let mut out = vec![0.0; 2 * d2];
    for (part, coeffs) in [(0, &sv[..n]), (1, if complex { &sv[n..] } else { &[][..] })] {
        for (c, b) in coeffs.iter().zip(&gens) {
            for (o, x) in out[part * d2..(part + 1) * d2].iter_mut().zip(b) {
                *o += c * x;
            }
        }
    }
    Ok(g.custom(
        &[state],
        out,
        2,
        d2,
        Box::new(move |gout, grads| {
            if let Some(slot) = grads.slot(state) {
                let parts = if complex { 2 } else { 1 };
                for part in 0..parts {
                    let go = &gout[part * d2..(part + 1) * d2];
                    for (i, b) in gens.iter().enumerate() {
                        slot[part * n + i] += b.iter().zip(go).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
            }
        }),
    ))
}

fn check_assemble(seed: u64) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let spec = GroupSpec::sim3();
    let state = normal_vec(&mut rng, 14, 0.3);
    let w = normal_vec(&mut rng, 32, 1.0);
    check_gradients(
        "assemble",
        &[Input::row(state)],
        CheckOptions::default(),
        move |g, v| {
            let b = assemble_var(g, &spec, v[0], true)?;
            let wv = g.constant(w.clone(), 2, 16);
            let p = g.mul(b, wv)?;
            Ok(g.sum(p))
        },
    )
}

pub(crate) fn gradcheck_cases() -> Vec<RegisteredOp> {
    vec![RegisteredOp {
        name: "assemble",
        threshold: 1e-4,
        run: check_assemble,
    }]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single_one(m: &Matrix, r: usize, c: usize, v: f64) -> bool {
        let d = m.dim();
        (0..d).all(|i| {
            (0..d).all(|j| {
                let want = if (i, j) == (r, c) { v } else { 0.0 };
                m[(i, j)] == want
            })
        })
    }

    #[test]
    fn aff2_translation_and_shear_generators() {
        let g = generators(&GroupSpec::aff2());
        assert_eq!(g.len(), 6);
        assert!(single_one(&g[0], 0, 2, 1.0));
        assert!(single_one(&g[1], 1, 2, 1.0));
        assert!(single_one(&g[2], 0, 1, 1.0));
        assert!(single_one(&g[3], 1, 0, 1.0));
        assert_eq!(
            g[4],
            Matrix::from_rows([[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 0.0]])
        );
        assert_eq!(
            g[5],
            Matrix::from_rows([[0.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]])
        );
    }

    #[test]
    fn se3_has_six_4x4_generators() {
        let g = generators(&GroupSpec::se3());
        assert_eq!(g.len(), 6);
        assert!(g.iter().all(|m| m.dim() == 4));
        assert_eq!(g[3][(1, 2)], -1.0);
        assert_eq!(g[3][(2, 1)], 1.0);
        assert_eq!(g[4][(0, 2)], 1.0);
        assert_eq!(g[4][(2, 0)], -1.0);
        assert_eq!(g[5][(0, 1)], -1.0);
        assert_eq!(g[5][(1, 0)], 1.0);
    }

    #[test]
    fn sim3_adds_scaling_generator() {
        let g = generators(&GroupSpec::sim3());
        assert_eq!(g.len(), 7);
        assert!(single_one(&g[6], 3, 3, -1.0));
        assert_eq!(&g[..6], &generators(&GroupSpec::se3())[..]);
    }

    #[test]
    fn assemble_basics() {
        let spec = GroupSpec::aff2();
        let z = assemble(&spec, &CoefficientVector::zeros(6)).unwrap();
        assert_eq!(z.re.max_abs(), 0.0);
        assert_eq!(z.im.max_abs(), 0.0);

        let mut e1 = CoefficientVector::zeros(6);
        e1.re[0] = 1.0;
        let b = assemble(&spec, &e1).unwrap();
        assert_eq!(b.re, generators(&spec)[0]);

        let mut i1 = CoefficientVector::zeros(6);
        i1.im[0] = 1.0;
        let b = assemble(&spec, &i1).unwrap();
        assert_eq!(b.re.max_abs(), 0.0);
        assert_eq!(b.im, generators(&spec)[0]);

        assert!(matches!(
            assemble(&spec, &CoefficientVector::zeros(7)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn mask_disables_generators() {
        let spec = GroupSpec::aff2()
            .with_mask(vec![true, true, false, false, false, false])
            .unwrap();
        let v = CoefficientVector::real(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let b = assemble(&spec, &v).unwrap();
        assert_eq!(
            b.re,
            Matrix::from_rows([[0.0, 0.0, 0.1], [0.0, 0.0, 0.2], [0.0, 0.0, 0.0]])
        );
        assert!(GroupSpec::aff2().with_mask(vec![true]).is_err());
    }

    #[test]
    fn assemble_var_matches_plain() {
        let spec = GroupSpec::sim3();
        let v = CoefficientVector::new(
            vec![0.1, -0.2, 0.3, 0.05, -0.07, 0.02, 0.01],
            vec![0.0, 0.1, 0.0, -0.1, 0.0, 0.2, 0.3],
        )
        .unwrap();
        let plain = assemble(&spec, &v).unwrap();
        let mut g = Graph::new();
        let s = g.constant(v.to_state(true), 1, 14);
        let b = assemble_var(&mut g, &spec, s, true).unwrap();
        assert_eq!(g.value(b), plain.to_flat().as_slice());
    }

    #[test]
    fn assemble_gradient() {
        assert!(check_assemble(3).unwrap().passed());
    }

    proptest! {
        #[test]
        fn assemble_is_linear(
            v in proptest::collection::vec(-1.0f64..1.0, 12),
            w in proptest::collection::vec(-1.0f64..1.0, 12),
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
        ) {
            let spec = GroupSpec::aff2();
            let cv = CoefficientVector::from_state(&v, true);
            let cw = CoefficientVector::from_state(&w, true);
            let combo: Vec<f64> = v.iter().zip(&w).map(|(x, y)| a * x + b * y).collect();
            let lhs = assemble(&spec, &CoefficientVector::from_state(&combo, true)).unwrap();
            let bv = assemble(&spec, &cv).unwrap();
            let bw = assemble(&spec, &cw).unwrap();
            let mut re = bv.re.scaled(a);
            re.add_scaled(&bw.re, b);
            let mut im = bv.im.scaled(a);
            im.add_scaled(&bw.im, b);
            prop_assert!(lhs.re.max_abs_diff(&re) < 1e-12);
            prop_assert!(lhs.im.max_abs_diff(&im) < 1e-12);

            let neg = assemble(&spec, &cv.neg()).unwrap();
            prop_assert_eq!(neg.re, -&bv.re);
            prop_assert_eq!(neg.im, -&bv.im);
        }

        #[test]
        fn se3_rotations_are_skew(w in proptest::collection::vec(-1.0f64..1.0, 3)) {
            let spec = GroupSpec::se3();
            let v = CoefficientVector::real(vec![0.0, 0.0, 0.0, w[0], w[1], w[2]]);
            let b = assemble(&spec, &v).unwrap().re;
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert_eq!(b[(i, j)], -b[(j, i)]);
                }
            }
        }
    }
}
