//! Flat parameter storage with a named segment directory.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::seed::{digest64, hex64};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Student parameters: a flat `f32` array tiled by named segments and bound to
/// the model configuration that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    pub values: Vec<f32>,
    pub segments: Vec<Segment>,
    pub config: ModelConfig,
    pub config_hash: u64,
}

impl ParameterVector {
    pub fn zeros(config: &ModelConfig) -> Self {
        let segments = config.segments();
        let total = segments.iter().map(Segment::len).sum();
        ParameterVector { values: vec![0.0; total], segments, config: config.clone(), config_hash: config.hash() }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment_values(&self, name: &str) -> Option<&[f32]> {
        self.segment(name).map(|s| &self.values[s.offset..s.offset + s.len()])
    }

    pub fn segment_values_mut(&mut self, name: &str) -> Option<&mut [f32]> {
        let s = self.segment(name)?.clone();
        Some(&mut self.values[s.offset..s.offset + s.len()])
    }

    /// Same array length and segment directory, segment by segment.
    pub fn check_same_layout(&self, other: &ParameterVector) -> Result<()> {
        for (i, a) in self.segments.iter().enumerate() {
            match other.segments.get(i) {
                Some(b) if a == b => {}
                _ => return Err(Error::Shape { segment: a.name.clone() }),
            }
        }
        if other.segments.len() > self.segments.len() {
            return Err(Error::Shape { segment: other.segments[self.segments.len()].name.clone() });
        }
        if self.config_hash != other.config_hash {
            return Err(Error::Shape { segment: "<config>".into() });
        }
        if self.values.len() != other.values.len() {
            return Err(Error::Shape { segment: "<values>".into() });
        }
        Ok(())
    }

    /// Segments tile the value array in order with no gap or overlap, and
    /// every value is finite.
    pub fn validate(&self) -> Result<()> {
        let mut next = 0;
        for s in &self.segments {
            if s.offset != next {
                return Err(Error::Shape { segment: s.name.clone() });
            }
            next += s.len();
        }
        if next != self.values.len() {
            return Err(Error::Shape { segment: "<values>".into() });
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Integrity(format!("non-finite parameter at index {i}")));
        }
        if self.config.hash() != self.config_hash {
            return Err(Error::Integrity("config hash does not match config".into()));
        }
        Ok(())
    }

    /// Digest of the raw little-endian values and the config hash.
    pub fn digest(&self) -> String {
        let mut bytes = Vec::with_capacity(self.values.len() * 4 + 8);
        bytes.extend_from_slice(&self.config_hash.to_le_bytes());
        for v in &self.values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        hex64(digest64(&bytes))
    }

    pub fn with_values(&self, values: Vec<f32>) -> ParameterVector {
        assert_eq!(values.len(), self.values.len());
        ParameterVector { values, segments: self.segments.clone(), config: self.config.clone(), config_hash: self.config_hash }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}
