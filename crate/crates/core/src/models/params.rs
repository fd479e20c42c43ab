use crate::error::{MpbmError, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Ordered, named parameter tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        self.names.push(name.into());
        self.tensors.push(t);
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Register every tensor on `tape`: tracked leaves when `track`, constants
    /// (stop-gradient) otherwise.
    pub fn bind<'t>(&self, tape: &'t Tape, track: bool) -> Vec<Var<'t>> {
        self.tensors
            .iter()
            .map(|t| {
                if track {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn replace(&mut self, i: usize, t: Tensor) -> Result<()> {
        if t.shape() != self.tensors[i].shape() {
            return Err(MpbmError::shape(
                "ParamSet::replace",
                format!("{}: {:?} vs {:?}", self.names[i], self.tensors[i].shape(), t.shape()),
            ));
        }
        self.tensors[i] = t;
        Ok(())
    }

    /// Overwrite values from another set with identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(MpbmError::shape(
                "ParamSet::load_from",
                format!("names {:?} vs {:?}", self.names, other.names),
            ));
        }
        for i in 0..self.len() {
            self.replace(i, other.tensors[i].clone())?;
        }
        Ok(())
    }

    pub(crate) fn data_mut(&mut self, i: usize) -> &mut [f64] {
        self.tensors[i].data_mut()
    }

    /// Concatenate with name prefixes, for checkpointing several sets together.
    pub fn prefixed(&self, prefix: &str) -> ParamSet {
        ParamSet {
            names: self.names.iter().map(|n| format!("{prefix}{n}")).collect(),
            tensors: self.tensors.clone(),
        }
    }

    pub fn extend(&mut self, other: ParamSet) {
        self.names.extend(other.names);
        self.tensors.extend(other.tensors);
    }

    /// Sub-set whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in self.iter() {
            if let Some(rest) = n.strip_prefix(prefix) {
                out.push(rest, t.clone());
            }
        }
        out
    }
}
