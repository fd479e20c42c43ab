use serde::{Deserialize, Serialize};

use super::{one_hot, Dataset};
use crate::error::{MpbmError, Result};
use crate::numerics::{Rng, Tensor};

/// Gaussian class clusters in the unit square.
///
/// Class `k` is centered at `(0.5, 0.5) + separation · (cos θ_k, sin θ_k)` with
/// `θ_k = 2πk / K`; points are clamped to `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub separation: f64,
    #[serde(default = "default_std")]
    pub std: f64,
    pub seed: u64,
}

fn default_std() -> f64 {
    0.05
}

pub fn synth_blobs(spec: &BlobSpec) -> Result<Dataset> {
    if spec.num_classes == 0 || spec.per_class == 0 || spec.separation <= 0.0 || spec.std <= 0.0 {
        return Err(MpbmError::config("blobs", "all blob parameters must be positive"));
    }
    let mut rng = Rng::new(spec.seed);
    let n = spec.num_classes * spec.per_class;
    let mut x = Vec::with_capacity(2 * n);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % spec.num_classes;
        let theta = std::f64::consts::TAU * k as f64 / spec.num_classes as f64;
        let (cx, cy) = (0.5 + spec.separation * theta.cos(), 0.5 + spec.separation * theta.sin());
        x.push((cx + spec.std * rng.normal()).clamp(0.0, 1.0));
        x.push((cy + spec.std * rng.normal()).clamp(0.0, 1.0));
        classes.push(k);
    }
    Dataset::new(
        format!("blobs-{}x{}", spec.num_classes, spec.per_class),
        "source",
        Tensor::new(vec![n, 2], x)?,
        one_hot(&classes, spec.num_classes)?,
    )
}
