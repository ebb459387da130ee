use std::ops::Range;

use crate::error::{Error, Result};

/// Dense row-major `f32` matrix with at least one row and one column and only
/// finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 {
            return Err(Error::EmptyInput("matrix has zero rows"));
        }
        if cols == 0 {
            return Err(Error::EmptyInput("matrix has zero columns"));
        }
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix data length",
                expected: rows * cols,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                row: pos / cols,
                col: pos % cols,
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::DimensionMismatch {
                context: "matrix row length",
                expected: cols,
                found: bad.len(),
            });
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.cols)
    }

    /// Copies a contiguous block of rows.
    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.rows {
            return Err(Error::InvalidConfig(format!(
                "row range {range:?} outside 0..{}",
                self.rows
            )));
        }
        Ok(Self {
            rows: range.len(),
            cols: self.cols,
            data: self.data[range.start * self.cols..range.end * self.cols].to_vec(),
        })
    }
}

/// N×K penultimate-layer activations, one sample per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix(Matrix);

impl FeatureMatrix {
    pub fn new(n_samples: usize, n_features: usize, data: Vec<f32>) -> Result<Self> {
        Matrix::new(n_samples, n_features, data).map(Self)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        Matrix::from_rows(rows).map(Self)
    }

    pub fn n_samples(&self) -> usize {
        self.0.rows()
    }

    pub fn n_features(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.0.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn slice_rows(&self, range: Range<usize>) -> Result<Self> {
        self.0.slice_rows(range).map(Self)
    }

    pub(crate) fn expect_features(&self, k: usize, context: &'static str) -> Result<()> {
        if self.n_features() != k {
            return Err(Error::DimensionMismatch {
                context,
                expected: k,
                found: self.n_features(),
            });
        }
        Ok(())
    }
}

impl From<Matrix> for FeatureMatrix {
    fn from(m: Matrix) -> Self {
        Self(m)
    }
}

impl AsRef<Matrix> for Matrix {
    fn as_ref(&self) -> &Matrix {
        self
    }
}

impl AsRef<Matrix> for FeatureMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.0
    }
}

/// C×K final-layer weights (`logit_j = w_j · z + bias_j`).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMatrix {
    weights: Matrix,
    bias: Vec<f32>,
}

impl WeightMatrix {
    /// Builds a head with an all-zero bias.
    pub fn new(weights: Matrix) -> Result<Self> {
        let c = weights.rows();
        Self::with_bias(weights, vec![0.0; c])
    }

    pub fn with_bias(weights: Matrix, bias: Vec<f32>) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(Error::DimensionMismatch {
                context: "bias length vs number of classes",
                expected: weights.rows(),
                found: bias.len(),
            });
        }
        if let Some(j) = bias.iter().position(|b| !b.is_finite()) {
            return Err(Error::NonFinite { row: 0, col: j });
        }
        for (j, row) in weights.iter_rows().enumerate() {
            if row.iter().all(|&v| v == 0.0) {
                return Err(Error::ZeroNormRow(j));
            }
        }
        Ok(Self { weights, bias })
    }

    pub fn n_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn n_features(&self) -> usize {
        self.weights.cols()
    }

    pub fn row(&self, j: usize) -> &[f32] {
        self.weights.row(j)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    /// Unperturbed logits `W z + b`.
    pub fn logits(&self, z: &[f32]) -> Vec<f32> {
        self.weights
            .iter_rows()
            .zip(&self.bias)
            .map(|(w, &b)| crate::perturb::dot(w, z) + b)
            .collect()
    }
}

impl AsRef<Matrix> for WeightMatrix {
    fn as_ref(&self) -> &Matrix {
        &self.weights
    }
}
