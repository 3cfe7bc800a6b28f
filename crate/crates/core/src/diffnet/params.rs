use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Named contiguous range inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

/// Flat storage for every learnable scalar of a run, with one gradient slot
/// per value and a segment map naming the parameter groups (`u`, `phi`, `theta`).
#[derive(Clone, Debug, Default)]
pub struct ParameterTape {
    values: Vec<f64>,
    grads: Vec<f64>,
    segments: Vec<Segment>,
}

/// On-disk checkpoint layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub segments: Vec<Segment>,
    pub values: Vec<f64>,
}

impl ParameterTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_segment(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        if self.segment(name).is_some() {
            return Err(Error::Config(format!("duplicate parameter segment {name}")));
        }
        self.segments.push(Segment {
            name: name.to_string(),
            offset: self.values.len(),
            len: values.len(),
        });
        self.grads.extend(std::iter::repeat_n(0.0, values.len()));
        self.values.extend(values);
        Ok(())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    fn range(&self, name: &str) -> Result<std::ops::Range<usize>> {
        self.segment(name)
            .map(|s| s.offset..s.offset + s.len)
            .ok_or_else(|| Error::Config(format!("unknown parameter segment {name}")))
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grads(&self) -> &[f64] {
        &self.grads
    }

    pub fn segment_values(&self, name: &str) -> Result<&[f64]> {
        let r = self.range(name)?;
        Ok(&self.values[r])
    }

    pub fn segment_values_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.range(name)?;
        Ok(&mut self.values[r])
    }

    pub fn segment_grads(&self, name: &str) -> Result<&[f64]> {
        let r = self.range(name)?;
        Ok(&self.grads[r])
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn set_segment_grads(&mut self, name: &str, grads: &[f64]) -> Result<()> {
        let r = self.range(name)?;
        if grads.len() != r.len() {
            return Err(Error::Dimension(format!(
                "segment {name} has {} values, got {} gradients",
                r.len(),
                grads.len()
            )));
        }
        self.grads[r].copy_from_slice(grads);
        Ok(())
    }

    pub fn check_finite(&self) -> Result<()> {
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            let seg = self
                .segments
                .iter()
                .find(|s| i >= s.offset && i < s.offset + s.len)
                .map(|s| s.name.as_str())
                .unwrap_or("?");
            return Err(Error::Numeric(format!(
                "parameter {i} in segment {seg} is not finite"
            )));
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            segments: self.segments.clone(),
            values: self.values.clone(),
        }
    }

    pub fn from_checkpoint(cp: Checkpoint) -> Result<Self> {
        let mut expected = 0;
        for s in &cp.segments {
            if s.offset != expected {
                return Err(Error::Config(format!(
                    "checkpoint segment {} starts at {} (expected {expected})",
                    s.name, s.offset
                )));
            }
            expected += s.len;
        }
        if expected != cp.values.len() {
            return Err(Error::Config(format!(
                "checkpoint segments cover {expected} values, file holds {}",
                cp.values.len()
            )));
        }
        Ok(Self {
            grads: vec![0.0; cp.values.len()],
            values: cp.values,
            segments: cp.segments,
        })
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.checkpoint())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}
