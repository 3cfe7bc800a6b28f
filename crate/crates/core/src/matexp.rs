//! Truncated power-series matrix exponential over complex matrices stored as
//! paired real and imaginary parts.
//!
//! Series terms are accumulated as `T_{n+1} = T_n · B / (n+1)`, so `n_terms`
//! matrix products produce `Σ_{n=0..n_terms} Bⁿ/n!`. Every complex product is
//! four real products.

use serde::{Deserialize, Serialize};

use crate::diffnet::gradcheck::{check_jacobian, normal_vec, CheckOptions, Input, RegisteredOp};
use crate::diffnet::{GradCheckReport, Graph, Var};
use crate::error::{Error, Result};
use crate::lie_basis::{assemble, assemble_var, CoefficientVector, GroupSpec};
use crate::linalg::Matrix;

pub const DEFAULT_TERMS: usize = 10;

/// Square complex matrix `re + i·im`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexMatrix {
    pub re: Matrix,
    pub im: Matrix,
}

impl ComplexMatrix {
    pub fn new(re: Matrix, im: Matrix) -> Result<Self> {
        if re.dim() != im.dim() {
            return Err(Error::Dimension(format!(
                "real part is {0}x{0}, imaginary part {1}x{1}",
                re.dim(),
                im.dim()
            )));
        }
        Ok(Self { re, im })
    }

    pub fn real(re: Matrix) -> Self {
        let d = re.dim();
        Self {
            re,
            im: Matrix::zeros(d),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::real(Matrix::identity(dim))
    }

    pub fn zeros(dim: usize) -> Self {
        Self::real(Matrix::zeros(dim))
    }

    pub fn dim(&self) -> usize {
        self.re.dim()
    }

    pub fn is_finite(&self) -> bool {
        self.re.is_finite() && self.im.is_finite()
    }

    /// `(A + iB)(C + iD) = (AC − BD) + i(AD + BC)`
    pub fn matmul(&self, rhs: &ComplexMatrix) -> ComplexMatrix {
        let ac = &self.re * &rhs.re;
        let bd = &self.im * &rhs.im;
        let ad = &self.re * &rhs.im;
        let bc = &self.im * &rhs.re;
        ComplexMatrix {
            re: &ac - &bd,
            im: &ad + &bc,
        }
    }

    pub fn conj_transpose(&self) -> ComplexMatrix {
        ComplexMatrix {
            re: self.re.transpose(),
            im: self.im.transpose().scaled(-1.0),
        }
    }

    pub fn scaled(&self, k: f64) -> ComplexMatrix {
        ComplexMatrix {
            re: self.re.scaled(k),
            im: self.im.scaled(k),
        }
    }

    pub fn add_assign(&mut self, other: &ComplexMatrix) {
        self.re.add_scaled(&other.re, 1.0);
        self.im.add_scaled(&other.im, 1.0);
    }

    pub fn max_abs_diff(&self, other: &ComplexMatrix) -> f64 {
        self.re
            .max_abs_diff(&other.re)
            .max(self.im.max_abs_diff(&other.im))
    }

    pub fn frobenius(&self) -> f64 {
        (self.re.frobenius().powi(2) + self.im.frobenius().powi(2)).sqrt()
    }

    /// `re ∥ im`, each row-major: the `2 × d²` layout of recorded matrices.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.re.as_slice().to_vec();
        v.extend_from_slice(self.im.as_slice());
        v
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        let half = flat.len() / 2;
        let re = Matrix::from_row_major(flat[..half].to_vec());
        let im = Matrix::from_row_major(flat[half..].to_vec());
        match (re, im) {
            (Some(re), Some(im)) if 2 * half == flat.len() => Self::new(re, im),
            _ => Err(Error::Dimension(format!(
                "{} values do not form a complex square matrix",
                flat.len()
            ))),
        }
    }
}

fn series_terms(b: &ComplexMatrix, n_terms: usize) -> Vec<ComplexMatrix> {
    let mut terms = Vec::with_capacity(n_terms + 1);
    terms.push(ComplexMatrix::identity(b.dim()));
    for n in 0..n_terms {
        let next = terms[n].matmul(b).scaled(1.0 / (n + 1) as f64);
        terms.push(next);
    }
    terms
}

fn validate(b: &ComplexMatrix, n_terms: usize) -> Result<()> {
    if n_terms == 0 {
        return Err(Error::Config("matrix exponential needs n_terms ≥ 1".into()));
    }
    if !b.is_finite() {
        return Err(Error::Numeric("matrix exponential input is not finite".into()));
    }
    Ok(())
}

/// `Σ_{n=0..n_terms} Bⁿ/n!`.
pub fn mexp(b: &ComplexMatrix, n_terms: usize) -> Result<ComplexMatrix> {
    validate(b, n_terms)?;
    let mut sum = ComplexMatrix::zeros(b.dim());
    for t in series_terms(b, n_terms) {
        sum.add_assign(&t);
    }
    if !sum.is_finite() {
        return Err(Error::Numeric("matrix exponential overflowed".into()));
    }
    Ok(sum)
}

/// Recorded [`mexp`] on a `2 × d²` node.
///
/// The adjoint runs the term recurrence backwards: with `S̄` the output adjoint
/// and `T̄_K = S̄`, each step adds `T_{n−1}ᴴ T̄_n / n` to `B̄` and sets
/// `T̄_{n−1} = S̄ + T̄_n Bᴴ / n`.
pub fn mexp_var(g: &mut Graph, b: Var, n_terms: usize) -> Result<Var> {
    let (rows, cols) = g.shape(b);
    if rows != 2 {
        return Err(Error::Dimension(format!(
            "complex matrix node must be 2 x d², got {rows}x{cols}"
        )));
    }
    let bm = ComplexMatrix::from_flat(g.value(b))?;
    validate(&bm, n_terms)?;
    let terms = series_terms(&bm, n_terms);
    let mut sum = ComplexMatrix::zeros(bm.dim());
    for t in &terms {
        sum.add_assign(t);
    }
    if !sum.is_finite() {
        return Err(Error::Numeric("matrix exponential overflowed".into()));
    }
    Ok(g.custom(
        &[b],
        sum.to_flat(),
        2,
        cols,
        Box::new(move |gout, grads| {
            let Some(slot) = grads.slot(b) else { return };
            let s_bar = ComplexMatrix::from_flat(gout).expect("adjoint shape");
            let b_h = bm.conj_transpose();
            let mut b_bar = ComplexMatrix::zeros(bm.dim());
            let mut t_bar = s_bar.clone();
            for n in (1..terms.len()).rev() {
                let inv_n = 1.0 / n as f64;
                b_bar.add_assign(&terms[n - 1].conj_transpose().matmul(&t_bar).scaled(inv_n));
                let mut next = t_bar.matmul(&b_h).scaled(inv_n);
                next.add_assign(&s_bar);
                t_bar = next;
            }
            for (s, x) in slot.iter_mut().zip(b_bar.to_flat()) {
                *s += x;
            }
        }),
    ))
}

/// `H = mexp(Σ v_i B_i)` and `H⁻¹ = mexp(−Σ v_i B_i)`.
pub fn forward_inverse(
    spec: &GroupSpec,
    v: &CoefficientVector,
    n_terms: usize,
) -> Result<(ComplexMatrix, ComplexMatrix)> {
    let b = assemble(spec, v)?;
    let h = mexp(&b, n_terms)?;
    let h_inv = mexp(&b.scaled(-1.0), n_terms)?;
    Ok((h, h_inv))
}

/// Recorded [`forward_inverse`] on a coefficient state node.
pub fn forward_inverse_var(
    g: &mut Graph,
    spec: &GroupSpec,
    state: Var,
    complex: bool,
    n_terms: usize,
) -> Result<(Var, Var)> {
    let b = assemble_var(g, spec, state, complex)?;
    let h = mexp_var(g, b, n_terms)?;
    let nb = g.neg(b);
    let h_inv = mexp_var(g, nb, n_terms)?;
    Ok((h, h_inv))
}

fn check_mexp(seed: u64, dim: usize) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let b = normal_vec(&mut rng, 2 * dim * dim, 0.3);
    check_jacobian(
        "mexp",
        &[Input::new(b, 2, dim * dim)],
        CheckOptions::default(),
        |g, v| mexp_var(g, v[0], DEFAULT_TERMS),
    )
}

pub(crate) fn gradcheck_cases() -> Vec<RegisteredOp> {
    vec![
        RegisteredOp {
            name: "mexp_3x3",
            threshold: 1e-4,
            run: |s| check_mexp(s, 3),
        },
        RegisteredOp {
            name: "mexp_4x4",
            threshold: 1e-4,
            run: |s| check_mexp(s, 4),
        },
    ]
}
