//! Datasets, synthetic domains, domain-shift transforms and file formats.

mod blobs;
pub mod idx;
mod manifest;
mod shift;

pub use blobs::{synth_blobs, BlobSpec};
pub use idx::{load_idx, IdxArray, IdxLoadOptions};
pub use manifest::{DataSource, LoadedManifest, Manifest, TargetSpec};
pub use shift::{apply_shift, apply_shifts, ShiftKind, ShiftSpec};

use crate::error::{MpbmError, Result};
use crate::numerics::Tensor;

/// Inputs paired with one-hot (or soft) label rows.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Tensor,
}

/// Labeled examples from one domain. Inputs live in `[0, 1]`; every label row
/// is exactly one-hot.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub domain: String,
    inputs: Tensor,
    labels: Tensor,
}

pub fn one_hot(classes: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; classes.len() * num_classes];
    for (i, &c) in classes.iter().enumerate() {
        if c >= num_classes {
            return Err(MpbmError::Index {
                what: "class",
                index: c,
                len: num_classes,
            });
        }
        data[i * num_classes + c] = 1.0;
    }
    Tensor::new(vec![classes.len(), num_classes], data)
}

impl Dataset {
    pub fn new(name: impl Into<String>, domain: impl Into<String>, inputs: Tensor, labels: Tensor) -> Result<Self> {
        let n = inputs.rows();
        if inputs.ndim() < 2 || n == 0 {
            return Err(MpbmError::shape("Dataset", format!("inputs {:?}", inputs.shape())));
        }
        if labels.ndim() != 2 || labels.rows() != n {
            return Err(MpbmError::shape(
                "Dataset",
                format!("{n} inputs but labels {:?}", labels.shape()),
            ));
        }
        if inputs.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(MpbmError::Invariant("dataset inputs must lie in [0, 1]".into()));
        }
        for i in 0..n {
            let row = labels.row(i);
            if row.iter().filter(|&&v| v == 1.0).count() != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(MpbmError::Invariant(format!("label row {i} is not one-hot")));
            }
        }
        Ok(Dataset {
            name: name.into(),
            domain: domain.into(),
            inputs,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    /// Per-instance input shape.
    pub fn input_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }

    pub fn num_classes(&self) -> usize {
        self.labels.cols()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.labels.argmax_rows()
    }

    pub fn batch(&self, idx: &[usize]) -> LabeledBatch {
        LabeledBatch {
            inputs: self.inputs.select_rows(idx),
            labels: self.labels.select_rows(idx),
        }
    }

    /// First `n` examples.
    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let b = self.batch(&idx);
        Dataset {
            name: self.name.clone(),
            domain: self.domain.clone(),
            inputs: b.inputs,
            labels: b.labels,
        }
    }

    /// Same labels, new inputs (already validated by the caller's transform).
    pub(crate) fn with_inputs(&self, inputs: Tensor) -> Result<Dataset> {
        Dataset::new(self.name.clone(), self.domain.clone(), inputs, self.labels.clone())
    }
}
