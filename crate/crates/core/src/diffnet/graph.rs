//! Reverse-mode gradient graph.
//!
//! Every node holds a dense row-major `rows × cols` block of `f64`. Ops push a
//! node carrying its forward value and a closure that maps the node's output
//! adjoint onto the adjoints of its parents. Node ids are assigned in
//! topological order, so the backward pass is a single reverse sweep.
//!
//! A graph records exactly one forward pass and supports exactly one backward
//! pass. Registration builds a fresh graph per iteration.

use std::rc::Rc;

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub type BackwardFn = Box<dyn Fn(&[f64], &mut Grads)>;

struct Node {
    value: Rc<[f64]>,
    rows: usize,
    cols: usize,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Adjoint accumulator handed to backward closures.
pub struct Grads {
    slots: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
    requires: Vec<bool>,
}

impl Grads {
    /// Mutable adjoint slot for `v`, or `None` when `v` does not need a gradient.
    pub fn slot(&mut self, v: Var) -> Option<&mut [f64]> {
        if !self.requires[v.0] {
            return None;
        }
        let size = self.sizes[v.0];
        Some(self.slots[v.0].get_or_insert_with(|| vec![0.0; size]))
    }

    pub fn accumulate(&mut self, v: Var, g: &[f64]) {
        if let Some(slot) = self.slot(v) {
            for (s, x) in slot.iter_mut().zip(g) {
                *s += x;
            }
        }
    }

    pub fn requires(&self, v: Var) -> bool {
        self.requires[v.0]
    }
}

/// Result of a backward pass.
pub struct Gradients {
    slots: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not influence it.
    pub fn get(&self, v: Var) -> Vec<f64> {
        match &self.slots[v.0] {
            Some(g) => g.clone(),
            None => vec![0.0; self.sizes[v.0]],
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        value: Vec<f64>,
        rows: usize,
        cols: usize,
        requires_grad: bool,
        backward: Option<BackwardFn>,
    ) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value: value.into(),
            rows,
            cols,
            requires_grad,
            backward: if requires_grad { backward } else { None },
        });
        Var(id)
    }

    /// A learnable input.
    pub fn leaf(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push(value, rows, cols, true, None)
    }

    pub fn constant(&mut self, value: Vec<f64>, rows: usize, cols: usize) -> Var {
        self.push(value, rows, cols, false, None)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(vec![value], 1, 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub(crate) fn shared_value(&self, v: Var) -> Rc<[f64]> {
        Rc::clone(&self.nodes[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a custom op. `backward` receives the output adjoint and must
    /// accumulate into the adjoints of `inputs`. It is dropped when none of the
    /// inputs require a gradient.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Vec<f64>,
        rows: usize,
        cols: usize,
        backward: BackwardFn,
    ) -> Var {
        let req = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, rows, cols, req, Some(backward))
    }

    fn expect_shape(&self, v: Var, rows: usize, cols: usize, op: &str) -> Result<()> {
        let (r, c) = self.shape(v);
        if r != rows || c != cols {
            return Err(Error::Dimension(format!(
                "{op}: expected {rows}x{cols}, got {r}x{c}"
            )));
        }
        Ok(())
    }

    /// Σ coeff·var over same-shaped operands.
    pub fn lincomb(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let Some(&(first, _)) = terms.first() else {
            return Err(Error::Dimension("lincomb: no terms".into()));
        };
        let (rows, cols) = self.shape(first);
        let mut out = vec![0.0; rows * cols];
        for &(v, k) in terms {
            self.expect_shape(v, rows, cols, "lincomb")?;
            if k == 0.0 {
                continue;
            }
            for (o, x) in out.iter_mut().zip(self.value(v)) {
                *o += k * x;
            }
        }
        let terms = terms.to_vec();
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        Ok(self.custom(
            &inputs,
            out,
            rows,
            cols,
            Box::new(move |g, grads| {
                for &(v, k) in &terms {
                    if let Some(slot) = grads.slot(v) {
                        for (s, x) in slot.iter_mut().zip(g) {
                            *s += k * x;
                        }
                    }
                }
            }),
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lincomb(&[(a, 1.0), (b, 1.0)])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.lincomb(&[(a, 1.0), (b, -1.0)])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.lincomb(&[(a, k)]).expect("single-term lincomb")
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        self.expect_shape(b, rows, cols, "mul")?;
        let av = self.shared_value(a);
        let bv = self.shared_value(b);
        let out = av.iter().zip(bv.iter()).map(|(x, y)| x * y).collect();
        Ok(self.custom(
            &[a, b],
            out,
            rows,
            cols,
            Box::new(move |g, grads| {
                if let Some(slot) = grads.slot(a) {
                    for i in 0..slot.len() {
                        slot[i] += g[i] * bv[i];
                    }
                }
                if let Some(slot) = grads.slot(b) {
                    for i in 0..slot.len() {
                        slot[i] += g[i] * av[i];
                    }
                }
            }),
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        self.custom(
            &[a],
            vec![total],
            1,
            1,
            Box::new(move |g, grads| {
                if let Some(slot) = grads.slot(a) {
                    slot.iter_mut().for_each(|s| *s += g[0]);
                }
            }),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Rectified linear unit. The subgradient at exactly zero is zero.
    pub fn relu(&mut self, a: Var) -> Var {
        let (rows, cols) = self.shape(a);
        let av = self.shared_value(a);
        let out = av.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.custom(
            &[a],
            out,
            rows,
            cols,
            Box::new(move |g, grads| {
                if let Some(slot) = grads.slot(a) {
                    for i in 0..slot.len() {
                        if av[i] > 0.0 {
                            slot[i] += g[i];
                        }
                    }
                }
            }),
        )
    }

    /// `x·W + b` with `x: n×in`, `W: in×out`, `b: 1×out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, fan_in) = self.shape(x);
        let (wr, fan_out) = self.shape(w);
        if wr != fan_in {
            return Err(Error::Dimension(format!(
                "linear: input has {fan_in} features, weight expects {wr}"
            )));
        }
        self.expect_shape(b, 1, fan_out, "linear bias")?;
        let xv = self.shared_value(x);
        let wv = self.shared_value(w);
        let bv = self.value(b);
        let mut out = Vec::with_capacity(n * fan_out);
        for _ in 0..n {
            out.extend_from_slice(bv);
        }
        {
            let xa = ArrayView2::from_shape((n, fan_in), &xv[..]).expect("shape");
            let wa = ArrayView2::from_shape((fan_in, fan_out), &wv[..]).expect("shape");
            let mut oa = ArrayViewMut2::from_shape((n, fan_out), &mut out[..]).expect("shape");
            general_mat_mul(1.0, &xa, &wa, 1.0, &mut oa);
        }
        Ok(self.custom(
            &[x, w, b],
            out,
            n,
            fan_out,
            Box::new(move |g, grads| {
                let ga = ArrayView2::from_shape((n, fan_out), g).expect("shape");
                if let Some(slot) = grads.slot(x) {
                    let wa = ArrayView2::from_shape((fan_in, fan_out), &wv[..]).expect("shape");
                    let mut sa = ArrayViewMut2::from_shape((n, fan_in), slot).expect("shape");
                    general_mat_mul(1.0, &ga, &wa.t(), 1.0, &mut sa);
                }
                if let Some(slot) = grads.slot(w) {
                    let xa = ArrayView2::from_shape((n, fan_in), &xv[..]).expect("shape");
                    let mut sa =
                        ArrayViewMut2::from_shape((fan_in, fan_out), slot).expect("shape");
                    general_mat_mul(1.0, &xa.t(), &ga, 1.0, &mut sa);
                }
                if let Some(slot) = grads.slot(b) {
                    for row in g.chunks_exact(fan_out) {
                        for (s, x) in slot.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                }
            }),
        ))
    }

    /// Horizontal concatenation of two blocks with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(Error::Dimension(format!(
                "concat_cols: row counts {ra} and {rb} differ"
            )));
        }
        let cols = ca + cb;
        let mut out = Vec::with_capacity(ra * cols);
        {
            let av = self.value(a);
            let bv = self.value(b);
            for r in 0..ra {
                out.extend_from_slice(&av[r * ca..(r + 1) * ca]);
                out.extend_from_slice(&bv[r * cb..(r + 1) * cb]);
            }
        }
        Ok(self.custom(
            &[a, b],
            out,
            ra,
            cols,
            Box::new(move |g, grads| {
                if let Some(slot) = grads.slot(a) {
                    for r in 0..ra {
                        for c in 0..ca {
                            slot[r * ca + c] += g[r * cols + c];
                        }
                    }
                }
                if let Some(slot) = grads.slot(b) {
                    for r in 0..ra {
                        for c in 0..cb {
                            slot[r * cb + c] += g[r * cols + ca + c];
                        }
                    }
                }
            }),
        ))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows_idx: &[usize]) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if let Some(&bad) = rows_idx.iter().find(|&&r| r >= rows) {
            return Err(Error::Dimension(format!(
                "gather_rows: index {bad} out of {rows} rows"
            )));
        }
        let mut out = Vec::with_capacity(rows_idx.len() * cols);
        {
            let av = self.value(a);
            for &r in rows_idx {
                out.extend_from_slice(&av[r * cols..(r + 1) * cols]);
            }
        }
        let idx = rows_idx.to_vec();
        Ok(self.custom(
            &[a],
            out,
            idx.len(),
            cols,
            Box::new(move |g, grads| {
                if let Some(slot) = grads.slot(a) {
                    for (i, &r) in idx.iter().enumerate() {
                        for c in 0..cols {
                            slot[r * cols + c] += g[i * cols + c];
                        }
                    }
                }
            }),
        ))
    }

    /// Contiguous sub-range of a node's flat storage, reshaped.
    pub fn slice(&mut self, a: Var, start: usize, rows: usize, cols: usize) -> Result<Var> {
        let len = rows * cols;
        let total = self.value(a).len();
        if start + len > total {
            return Err(Error::Dimension(format!(
                "slice: range {start}..{} exceeds {total}",
                start + len
            )));
        }
        let out = self.value(a)[start..start + len].to_vec();
        Ok(self.custom(
            &[a],
            out,
            rows,
            cols,
            Box::new(move |g, grads| {
                if let Some(slot) = grads.slot(a) {
                    for (s, x) in slot[start..start + len].iter_mut().zip(g) {
                        *s += x;
                    }
                }
            }),
        ))
    }

    /// Same storage, new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let total = self.value(a).len();
        self.slice(a, 0, rows, cols).and_then(|v| {
            if rows * cols == total {
                Ok(v)
            } else {
                Err(Error::Dimension(format!(
                    "reshape: {total} elements into {rows}x{cols}"
                )))
            }
        })
    }

    /// `log(mean(exp(a)))` over all entries, computed with a max shift.
    pub fn log_mean_exp(&mut self, a: Var) -> Var {
        let av = self.shared_value(a);
        let n = av.len() as f64;
        let m = av.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = av.iter().map(|&x| (x - m).exp()).collect();
        let z: f64 = weights.iter().sum();
        let value = m + (z / n).ln();
        self.custom(
            &[a],
            vec![value],
            1,
            1,
            Box::new(move |g, grads| {
                if let Some(slot) = grads.slot(a) {
                    for (s, w) in slot.iter_mut().zip(&weights) {
                        *s += g[0] * w / z;
                    }
                }
            }),
        )
    }

    /// Reverse sweep from a scalar `loss`. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Tape("backward already ran on this graph".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(
                "loss node was not recorded on this graph".into(),
            ));
        }
        if self.shape(loss) != (1, 1) {
            return Err(Error::Tape(format!(
                "loss must be scalar, got {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let count = loss.0 + 1;
        let mut grads = Grads {
            slots: vec![None; count],
            sizes: self.nodes[..count].iter().map(|n| n.value.len()).collect(),
            requires: self.nodes[..count].iter().map(|n| n.requires_grad).collect(),
        };
        if self.nodes[loss.0].requires_grad {
            grads.slots[loss.0] = Some(vec![1.0]);
        }
        for id in (0..count).rev() {
            let Some(backward) = self.nodes[id].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads.slots[id].take() else {
                continue;
            };
            backward(&g, &mut grads);
            grads.slots[id] = Some(g);
        }
        Ok(Gradients {
            slots: grads.slots,
            sizes: grads.sizes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut g = Graph::new();
        let u = g.leaf(vec![1.0, 2.0], 1, 2);
        let c = g.scalar(3.0);
        let grads = g.backward(c).unwrap();
        assert_eq!(grads.get(u), vec![0.0, 0.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let u = g.leaf(vec![0.5, -1.5, 2.0], 1, 3);
        let sq = g.mul(u, u).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(u), vec![1.0, -3.0, 4.0]);
    }

    #[test]
    fn reentrant_backward_is_rejected() {
        let mut g = Graph::new();
        let u = g.leaf(vec![1.0], 1, 1);
        let loss = g.sum(u);
        g.backward(loss).unwrap();
        assert!(matches!(g.backward(loss), Err(Error::Tape(_))));
    }

    #[test]
    fn backward_requires_recorded_scalar() {
        let mut g = Graph::new();
        let u = g.leaf(vec![1.0, 2.0], 1, 2);
        assert!(matches!(g.backward(u), Err(Error::Tape(_))));
        let mut empty = Graph::new();
        assert!(matches!(empty.backward(u), Err(Error::Tape(_))));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(vec![-1.0, 0.0, 2.0], 1, 3);
        let r = g.relu(x);
        assert_eq!(g.value(r), &[0.0, 0.0, 2.0]);
        let loss = g.sum(r);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn single_linear_layer_weight_gradient_is_outer_product() {
        let mut g = Graph::new();
        let x = g.constant(vec![1.0, 2.0, 3.0], 1, 3);
        let w = g.leaf(vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6], 3, 2);
        let b = g.leaf(vec![0.01, 0.02], 1, 2);
        let y = g.linear(x, w, b).unwrap();
        let yv = g.value(y).to_vec();
        assert!((yv[0] - (0.1 + 0.6 + 1.5 + 0.01)).abs() < 1e-12);
        assert!((yv[1] - (0.2 + 0.8 + 1.8 + 0.02)).abs() < 1e-12);
        // loss = y·c with c = (1, -2): dW = x ⊗ c
        let c = g.constant(vec![1.0, -2.0], 1, 2);
        let p = g.mul(y, c).unwrap();
        let loss = g.sum(p);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w), vec![1.0, -2.0, 2.0, -4.0, 3.0, -6.0]);
        assert_eq!(grads.get(b), vec![1.0, -2.0]);
    }

    #[test]
    fn log_mean_exp_is_stable() {
        let mut g = Graph::new();
        let x = g.leaf(vec![1000.0, 1000.0], 1, 2);
        let l = g.log_mean_exp(x);
        assert!((g.value(l)[0] - 1000.0).abs() < 1e-9);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x), vec![0.5, 0.5]);
    }

    #[test]
    fn shape_errors() {
        let mut g = Graph::new();
        let a = g.leaf(vec![1.0; 4], 2, 2);
        let b = g.leaf(vec![1.0; 3], 1, 3);
        assert!(g.add(a, b).is_err());
        assert!(g.concat_cols(a, b).is_err());
        assert!(g.gather_rows(a, &[2]).is_err());
        assert!(g.slice(a, 2, 1, 3).is_err());
    }
}
