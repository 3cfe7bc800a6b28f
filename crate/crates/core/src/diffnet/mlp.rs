//! Fully connected networks: affine layers with ReLU on every hidden layer and
//! no activation on the output.
//!
//! Parameters live in one flat slice, layer by layer, each layer stored as its
//! weight matrix (`fan_in × fan_out`, row-major) followed by its bias.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffnet::graph::{Graph, Var};
use crate::error::{Error, Result};

pub const HIDDEN_WIDTH: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Config(format!("invalid layer widths {widths:?}")));
        }
        Ok(Self { widths })
    }

    /// MINE critic: `2·channels → 100 → 100 → 1`.
    pub fn critic(channels: usize) -> Self {
        Self {
            widths: vec![2 * channels, HIDDEN_WIDTH, HIDDEN_WIDTH, 1],
        }
    }

    /// Coefficient flow field: `1 + state → 100 → state`, where the extra input
    /// is the resolution scale.
    pub fn flow(state_len: usize) -> Self {
        Self {
            widths: vec![1 + state_len, HIDDEN_WIDTH, state_len],
        }
    }

    pub fn input_len(&self) -> usize {
        self.widths[0]
    }

    pub fn output_len(&self) -> usize {
        *self.widths.last().expect("non-empty widths")
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Offsets of (weight, bias) for each layer.
    fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut off = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let wo = off;
                let bo = off + w[0] * w[1];
                off = bo + w[1];
                (wo, bo)
            })
            .collect()
    }

    /// Glorot-uniform weights and zero biases. With `zero_output` the last
    /// layer's weights are zero as well, so the network starts as `f ≡ 0`.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R, zero_output: bool) -> Vec<f64> {
        let mut params = vec![0.0; self.n_params()];
        let last = self.n_layers() - 1;
        for (layer, ((wo, _), w)) in self
            .layer_offsets()
            .into_iter()
            .zip(self.widths.windows(2))
            .enumerate()
        {
            if zero_output && layer == last {
                continue;
            }
            let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for p in &mut params[wo..wo + w[0] * w[1]] {
                *p = dist.sample(rng);
            }
        }
        params
    }

    /// Binds a flat parameter node to per-layer views on `g`.
    pub fn bind(&self, g: &mut Graph, params: Var) -> Result<BoundMlp> {
        let len = g.value(params).len();
        if len != self.n_params() {
            return Err(Error::Dimension(format!(
                "network with widths {:?} needs {} parameters, got {len}",
                self.widths,
                self.n_params()
            )));
        }
        let mut layers = Vec::with_capacity(self.n_layers());
        for ((wo, bo), w) in self.layer_offsets().into_iter().zip(self.widths.windows(2)) {
            let weight = g.slice(params, wo, w[0], w[1])?;
            let bias = g.slice(params, bo, 1, w[1])?;
            layers.push((weight, bias));
        }
        Ok(BoundMlp {
            spec: self.clone(),
            layers,
        })
    }
}

/// Network whose layers are nodes of one graph.
pub struct BoundMlp {
    spec: MlpSpec,
    layers: Vec<(Var, Var)>,
}

impl BoundMlp {
    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    /// Applies the network to every row of `x` (`n × input_len`).
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (_, cols) = g.shape(x);
        if cols != self.spec.input_len() {
            return Err(Error::Dimension(format!(
                "network expects {} inputs, got {cols}",
                self.spec.input_len()
            )));
        }
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.linear(h, w, b)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }
}

/// Evaluates the network on a batch (`x` is `n × input_len`, row-major).
pub fn mlp_forward(spec: &MlpSpec, params: &[f64], x: &[f64]) -> Result<Vec<f64>> {
    let input = spec.input_len();
    if !x.len().is_multiple_of(input) {
        return Err(Error::Dimension(format!(
            "input length {} is not a multiple of {input}",
            x.len()
        )));
    }
    let mut g = Graph::new();
    let p = g.constant(params.to_vec(), 1, params.len());
    let net = spec.bind(&mut g, p)?;
    let xv = g.constant(x.to_vec(), x.len() / input, input);
    let y = net.forward(&mut g, xv)?;
    Ok(g.value(y).to_vec())
}
