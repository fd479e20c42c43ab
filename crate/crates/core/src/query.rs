//! Adversarial query inputs via stochastic gradient Langevin dynamics.
//!
//! Starting from a seed `x¹`, each step ascends the frozen model's
//! cross-entropy and injects Gaussian noise:
//!
//! ```text
//! x^{t+1} = clamp(x^t + η·∇ₓ CE(h(f(x^t)), y) + σ·ε),   ε ~ N(0, I),  σ = √(2η)
//! ```
//!
//! Rows of a batch are independent chains.

use serde::{Deserialize, Serialize};

use crate::error::{MpbmError, Result};
use crate::models::PredictionModel;
use crate::numerics::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgldConfig {
    pub steps: usize,
    pub eta: f64,
    /// Replaces `√(2η)` when set; `Some(0.0)` turns the chain deterministic.
    pub noise_scale_override: Option<f64>,
    /// Valid input range; `None` leaves iterates unconstrained.
    pub clamp: Option<(f64, f64)>,
}

impl Default for SgldConfig {
    fn default() -> Self {
        SgldConfig {
            steps: 5,
            eta: 0.01,
            noise_scale_override: None,
            clamp: Some((0.0, 1.0)),
        }
    }
}

impl SgldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(MpbmError::config("sgld.steps", "must be at least 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(MpbmError::config("sgld.eta", format!("must be positive, got {}", self.eta)));
        }
        if let Some(s) = self.noise_scale_override {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(MpbmError::config("sgld.noise_scale_override", "must be non-negative"));
            }
        }
        if let Some((lo, hi)) = self.clamp {
            if !(lo < hi) {
                return Err(MpbmError::config("sgld.clamp", format!("empty range [{lo}, {hi}]")));
            }
        }
        Ok(())
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale_override.unwrap_or_else(|| (2.0 * self.eta).sqrt())
    }
}

/// Gradient of the summed cross-entropy with respect to the inputs, parameters
/// held fixed. Row `i` of the gradient must depend on row `i` of `x` only.
pub trait InputGradient {
    fn input_gradient(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, f64)>;
}

impl InputGradient for PredictionModel {
    fn input_gradient(&self, x: &Tensor, y: &Tensor) -> Result<(Tensor, f64)> {
        PredictionModel::input_gradient(self, x, y)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SgldOutcome {
    pub query: Tensor,
    /// Completed steps per chain.
    pub steps_taken: Vec<usize>,
    /// Chains stopped early on a non-finite gradient; their rows hold the last
    /// finite iterate.
    pub aborted: Vec<bool>,
}

impl SgldOutcome {
    pub fn any_aborted(&self) -> bool {
        self.aborted.iter().any(|&a| a)
    }
}

pub fn sgld_query<M: InputGradient + ?Sized>(
    x_seed: &Tensor,
    y_seed: &Tensor,
    model: &M,
    cfg: &SgldConfig,
    rng: &mut Rng,
) -> Result<SgldOutcome> {
    cfg.validate()?;
    let n = x_seed.rows();
    if y_seed.rows() != n {
        return Err(MpbmError::shape(
            "sgld_query",
            format!("{n} seeds but {} labels", y_seed.rows()),
        ));
    }
    let per = x_seed.cols();
    let sigma = cfg.noise_scale();
    let mut x = x_seed.data().to_vec();
    let mut steps_taken = vec![0; n];
    let mut aborted = vec![false; n];

    for _ in 0..cfg.steps {
        let current = Tensor::new(x_seed.shape().to_vec(), x.clone())?;
        let grad = match model.input_gradient(&current, y_seed) {
            Ok((g, _)) => g,
            Err(MpbmError::NonFinite(_)) => {
                for a in aborted.iter_mut() {
                    *a = true;
                }
                break;
            }
            Err(e) => return Err(e),
        };
        for i in 0..n {
            if aborted[i] {
                continue;
            }
            let g = &grad.data()[i * per..(i + 1) * per];
            if g.iter().any(|v| !v.is_finite()) {
                aborted[i] = true;
                continue;
            }
            let row = &mut x[i * per..(i + 1) * per];
            for (v, &gk) in row.iter_mut().zip(g) {
                let mut next = *v + cfg.eta * gk;
                if sigma != 0.0 {
                    next += sigma * rng.normal();
                }
                if let Some((lo, hi)) = cfg.clamp {
                    next = next.clamp(lo, hi);
                }
                *v = next;
            }
            steps_taken[i] += 1;
        }
        if aborted.iter().all(|&a| a) {
            break;
        }
    }
    Ok(SgldOutcome {
        query: Tensor::new(x_seed.shape().to_vec(), x)?,
        steps_taken,
        aborted,
    })
}
