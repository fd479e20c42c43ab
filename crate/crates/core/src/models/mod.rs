//! Prediction model (feature extractor + classifier), discriminator,
//! optimizer and checkpoint container.

mod arch;
pub mod checkpoint;
mod network;
mod optim;
mod params;

pub use arch::{Architecture, LayerSpec};
pub use checkpoint::Checkpoint;
pub use network::{Classifier, Discriminator, FeatureExtractor, PredictionModel, SCORE_EPS};
pub use optim::{Direction, RmsProp};
pub use params::ParamSet;
