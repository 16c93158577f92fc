use serde::{Deserialize, Serialize};

/// Channel-major image patch `[channels, size, size]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageInput {
    pub channels: usize,
    pub size: usize,
    pub values: Vec<f32>,
}

impl ImageInput {
    pub fn zeros(channels: usize, size: usize) -> Self {
        ImageInput {
            channels,
            size,
            values: vec![0.0; channels * size * size],
        }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.size + y) * self.size + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.size * self.size;
        &self.values[c * n..(c + 1) * n]
    }
}

/// Monthly series stored time-major `[len, vars]`. Missing cells hold 0 and
/// are flagged in `missing`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesInput {
    pub len: usize,
    pub vars: usize,
    pub values: Vec<f32>,
    pub missing: Vec<bool>,
}

impl SeriesInput {
    pub fn complete(len: usize, vars: usize, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), len * vars);
        SeriesInput {
            len,
            vars,
            values,
            missing: vec![false; len * vars],
        }
    }

    pub fn at(&self, t: usize, v: usize) -> f32 {
        self.values[t * self.vars + v]
    }

    pub fn is_missing(&self, t: usize, v: usize) -> bool {
        self.missing[t * self.vars + v]
    }

    pub fn has_missing(&self) -> bool {
        self.missing.iter().any(|&m| m)
    }
}

/// The two intermediate representations of one location.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingPair {
    pub location_id: u32,
    pub image: Vec<f64>,
    /// Absent when every climate group is switched off.
    pub series: Option<Vec<f64>>,
}
