use std::collections::BTreeMap;

use crate::diffnet::params::ParameterTape;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with one learning rate per parameter segment.
///
/// `step` descends the gradient stored in the tape. Segments without a rate
/// are left untouched.
#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    rates: BTreeMap<String, f64>,
    m: Vec<f64>,
    v: Vec<f64>,
    steps: BTreeMap<String, u32>,
}

impl Adam {
    pub fn new(config: AdamConfig, rates: impl IntoIterator<Item = (String, f64)>) -> Self {
        Self {
            config,
            rates: rates.into_iter().collect(),
            m: Vec::new(),
            v: Vec::new(),
            steps: BTreeMap::new(),
        }
    }

    pub fn rate(&self, segment: &str) -> Option<f64> {
        self.rates.get(segment).copied()
    }

    pub fn step(&mut self, tape: &mut ParameterTape) -> Result<()> {
        self.step_filtered(tape, |_| true)
    }

    /// Updates only the segments for which `active` returns true. Moment
    /// buffers and bias-correction counters of inactive segments are frozen.
    pub fn step_filtered(
        &mut self,
        tape: &mut ParameterTape,
        active: impl Fn(&str) -> bool,
    ) -> Result<()> {
        let n = tape.values().len();
        if self.m.len() != n {
            self.m = vec![0.0; n];
            self.v = vec![0.0; n];
        }
        let AdamConfig { beta1, beta2, eps } = self.config;
        let segments = tape.segments().to_vec();
        for seg in segments {
            let Some(&lr) = self.rates.get(&seg.name) else {
                continue;
            };
            if !active(&seg.name) {
                continue;
            }
            let t = self.steps.entry(seg.name.clone()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - beta1.powi(*t as i32);
            let bc2 = 1.0 - beta2.powi(*t as i32);
            let range = seg.offset..seg.offset + seg.len;
            let grads = tape.grads()[range.clone()].to_vec();
            let values = &mut tape.values_mut()[range.clone()];
            for (k, (x, g)) in values.iter_mut().zip(&grads).enumerate() {
                let i = range.start + k;
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "gradient of {}[{k}] is not finite",
                        seg.name
                    )));
                }
                self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * g;
                self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        tape.check_finite()
    }
}
