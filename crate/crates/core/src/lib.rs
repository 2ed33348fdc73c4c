//! A laboratory for white-box membership inference attacks against
//! centralized and federated learning.
//!
//! The crate trains small feed-forward target models (centrally, with
//! fine-tuning, or by federated averaging), extracts white-box observables
//! for individual samples (layer outputs, loss, per-sample gradients), and
//! mounts supervised and clustering-based membership attacks whose quality
//! is reported as accuracy, precision, recall and ROC/AUC.

pub mod attack;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fedsim;
pub mod features;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{MiaError, Result};
pub use nn::{Architecture, LayerSpec, ModelSnapshot};
pub use tensor::Tensor;
