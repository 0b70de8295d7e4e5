//! Faithfulness evaluation of attention-based explanations for text classifiers.
//!
//! The crate is layered bottom-up: [`tensor`] (reverse-mode autodiff),
//! [`layers`] and [`models`] (the classifier zoo), [`explain`] (explanation
//! methods), [`perturb`] and [`metrics`] (token removal and faithfulness
//! scores), [`data`] (corpora) and [`experiment`] (end-to-end runs).

pub mod data;
pub mod error;
pub mod experiment;
pub mod explain;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod params;
pub mod perturb;
pub mod tensor;

pub use error::{Error, Result};
pub use explain::{ExplainConfig, Explanation, Method};
pub use models::{Classifier, ModelSpec, TrainedModel};
pub use tensor::{Tape, Tensor};
