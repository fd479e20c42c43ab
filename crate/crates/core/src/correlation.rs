//! Feature correlation structure used to give each feature its own attention.
//!
//! Row `j` of the matrix is a probability vector describing how strongly
//! feature `j` co-varies with every other feature. Pearson coefficients are
//! mapped onto the simplex by taking magnitudes and L1-normalizing each row.

use crate::error::{MpbmError, Result};
use crate::numerics::{Rng, Tensor};

/// Rows retained by [`CorrelationMatrix::from_features`] before subsampling.
pub const DEFAULT_MAX_ROWS: usize = 10_000;

/// Pearson coefficients between the columns of an N×d matrix.
///
/// Zero-variance columns correlate 0 with every other column and 1 with
/// themselves.
pub fn pearson_matrix(features: &Tensor) -> Result<Tensor> {
    let &[n, d] = features.shape() else {
        return Err(MpbmError::shape(
            "pearson_matrix",
            format!("expected N×d, got {:?}", features.shape()),
        ));
    };
    if n < 2 {
        return Err(MpbmError::shape("pearson_matrix", "need at least two rows"));
    }

    let mut centered = vec![0.0; n * d];
    let mut norms = vec![0.0; d];
    let mut dead = vec![false; d];
    for j in 0..d {
        let mean = (0..n).map(|i| features.at(i, j)).sum::<f64>() / n as f64;
        let scale = (0..n).map(|i| features.at(i, j).abs()).fold(1.0, f64::max);
        let mut ss = 0.0;
        for i in 0..n {
            let v = features.at(i, j) - mean;
            centered[i * d + j] = v;
            ss += v * v;
        }
        norms[j] = ss.sqrt();
        dead[j] = norms[j] <= 1e-12 * scale * (n as f64).sqrt();
    }

    let mut out = vec![0.0; d * d];
    for a in 0..d {
        out[a * d + a] = 1.0;
        for b in a + 1..d {
            let r = if dead[a] || dead[b] {
                0.0
            } else {
                let dot: f64 = (0..n).map(|i| centered[i * d + a] * centered[i * d + b]).sum();
                (dot / (norms[a] * norms[b])).clamp(-1.0, 1.0)
            };
            out[a * d + b] = r;
            out[b * d + a] = r;
        }
    }
    Tensor::new(vec![d, d], out)
}

/// Row-normalized correlation matrix; every row lies on the simplex.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMatrix {
    c: Tensor,
}

impl CorrelationMatrix {
    /// `|raw_j| / Σ|raw_j|` for each row.
    pub fn normalize_rows(raw: &Tensor) -> Result<Self> {
        let &[d, d2] = raw.shape() else {
            return Err(MpbmError::shape("normalize_rows", "expected a square matrix"));
        };
        if d != d2 {
            return Err(MpbmError::shape("normalize_rows", format!("{d}×{d2}")));
        }
        let mut data = Vec::with_capacity(d * d);
        for j in 0..d {
            let row = raw.row(j);
            let total: f64 = row.iter().map(|v| v.abs()).sum();
            if total <= 0.0 {
                return Err(MpbmError::Invariant(format!("correlation row {j} is all zero")));
            }
            data.extend(row.iter().map(|v| v.abs() / total));
        }
        Ok(CorrelationMatrix {
            c: Tensor::new(vec![d, d], data)?,
        })
    }

    /// Pearson matrix of (at most `max_rows` uniformly sampled) feature rows,
    /// row-normalized.
    pub fn from_features(features: &Tensor, max_rows: usize, rng: &mut Rng) -> Result<Self> {
        let raw = if features.rows() > max_rows {
            let mut idx = rng.choose_distinct(features.rows(), max_rows);
            idx.sort_unstable();
            pearson_matrix(&features.select_rows(&idx))?
        } else {
            pearson_matrix(features)?
        };
        Self::normalize_rows(&raw)
    }

    /// Take an already row-stochastic matrix as-is.
    pub fn from_normalized(c: Tensor) -> Result<Self> {
        let &[d, d2] = c.shape() else {
            return Err(MpbmError::shape("CorrelationMatrix", "expected a square matrix"));
        };
        if d != d2 {
            return Err(MpbmError::shape("CorrelationMatrix", format!("{d}×{d2}")));
        }
        for j in 0..d {
            let row = c.row(j);
            if row.iter().any(|&v| v < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(MpbmError::Invariant(format!("row {j} is not a probability vector")));
            }
        }
        Ok(CorrelationMatrix { c })
    }

    /// Uniform rows: every feature shares one attention distribution.
    pub fn uniform(d: usize) -> Self {
        CorrelationMatrix {
            c: Tensor::full(&[d, d], 1.0 / d as f64),
        }
    }

    pub fn dim(&self) -> usize {
        self.c.rows()
    }

    pub fn matrix(&self) -> &Tensor {
        &self.c
    }

    pub fn row(&self, j: usize) -> &[f64] {
        self.c.row(j)
    }

    /// `m · diag(c_j)`: column `k` of `m` scaled by `c[j][k]`.
    pub fn diag_scale(&self, j: usize, m: &Tensor) -> Result<Tensor> {
        let d = self.dim();
        if j >= d {
            return Err(MpbmError::Index {
                what: "correlation row",
                index: j,
                len: d,
            });
        }
        if m.shape().last() != Some(&d) {
            return Err(MpbmError::shape(
                "diag_scale",
                format!("last dim of {:?} must be {d}", m.shape()),
            ));
        }
        let row = self.row(j);
        let data = m
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * row[i % d])
            .collect();
        Tensor::new(m.shape().to_vec(), data)
    }
}
