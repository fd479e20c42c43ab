use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use crate::error::{MpbmError, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Descent,
    Ascent,
}

/// RMSprop without momentum: per-coordinate step scaled by a running RMS of
/// past gradients.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RmsProp {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    square_avg: Vec<Vec<f64>>,
}

impl RmsProp {
    pub fn new(lr: f64) -> Self {
        RmsProp {
            lr,
            decay: 0.99,
            eps: 1e-8,
            square_avg: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor], dir: Direction) -> Result<()> {
        if grads.len() != params.len() {
            return Err(MpbmError::shape(
                "RmsProp::step",
                format!("{} gradients for {} parameters", grads.len(), params.len()),
            ));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(MpbmError::NonFinite("gradient"));
        }
        if self.square_avg.is_empty() {
            self.square_avg = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        }
        let sign = match dir {
            Direction::Descent => -1.0,
            Direction::Ascent => 1.0,
        };
        for (i, g) in grads.iter().enumerate() {
            let sq = &mut self.square_avg[i];
            let p = params.data_mut(i);
            for ((p, s), &g) in p.iter_mut().zip(sq.iter_mut()).zip(g.data()) {
                *s = self.decay * *s + (1.0 - self.decay) * g * g;
                *p += sign * self.lr * g / (s.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
