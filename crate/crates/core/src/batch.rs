//! Mini-batches of layer activations.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BatchError {
    #[error("batch needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("sample shape must have at least one non-zero dimension, got {0:?}")]
    EmptyShape(Vec<usize>),
    #[error("expected {expected} values for {n} samples of shape {shape:?}, got {got}")]
    ShapeMismatch {
        n: usize,
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("non-finite activation at sample {sample}, offset {offset}")]
    NonFinite { sample: usize, offset: usize },
}

/// One mini-batch of one layer's output.
///
/// Values are stored sample-major: sample `i` occupies
/// `values[i * sample_len .. (i + 1) * sample_len]`, and within a sample the
/// shape is laid out row-major (for `[C, H, W]` the channel index is slowest).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    layer_id: u16,
    iteration: u32,
    n: usize,
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl ActivationBatch {
    pub fn new(
        layer_id: u16,
        iteration: u32,
        shape: Vec<usize>,
        values: Vec<f64>,
    ) -> Result<Self, BatchError> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(BatchError::EmptyShape(shape));
        }
        let sample_len: usize = shape.iter().product();
        if values.len() % sample_len != 0 {
            return Err(BatchError::ShapeMismatch {
                n: values.len() / sample_len,
                shape,
                expected: (values.len() / sample_len + 1) * sample_len,
                got: values.len(),
            });
        }
        let n = values.len() / sample_len;
        if n < 2 {
            return Err(BatchError::TooFewSamples(n));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(BatchError::NonFinite {
                sample: pos / sample_len,
                offset: pos % sample_len,
            });
        }
        Ok(Self {
            layer_id,
            iteration,
            n,
            shape,
            values,
        })
    }

    /// Builds a flat `(D,)` batch from per-sample rows.
    pub fn from_rows(layer_id: u16, iteration: u32, rows: &[Vec<f64>]) -> Result<Self, BatchError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(BatchError::ShapeMismatch {
                    n: rows.len(),
                    shape: vec![dim],
                    expected: dim,
                    got: row.len(),
                });
            }
            values.extend_from_slice(row);
        }
        Self::new(layer_id, iteration, vec![dim], values)
    }

    pub fn layer_id(&self) -> u16 {
        self.layer_id
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn sample_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let len = self.sample_len();
        &self.values[i * len..(i + 1) * len]
    }

    /// Flattened samples, each of length `sample_len()`.
    pub fn samples(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.sample_len())
    }

    /// Number of channels: the leading dimension of a multi-dimensional
    /// sample shape, or 1 for flat samples.
    pub fn channels(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Per-sample slices of channel `c`.
    pub fn channel(&self, c: usize) -> Vec<&[f64]> {
        let per_channel = self.sample_len() / self.channels();
        self.samples()
            .map(|s| &s[c * per_channel..(c + 1) * per_channel])
            .collect()
    }

    pub fn with_stamp(mut self, layer_id: u16, iteration: u32) -> Self {
        self.layer_id = layer_id;
        self.iteration = iteration;
        self
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}
