//! SCTransNet: a U-shaped infrared small target detector whose skip connections
//! carry spatial-channel cross transformer blocks.
//!
//! The crate is self-contained: tensors, kernels and reverse-mode
//! differentiation live in [`tensor`], [`nn`] and [`tape`]; the network is
//! assembled in [`model`]; [`metrics`] implements the IRSTD evaluation
//! protocol and [`data`] the dataset layout, augmentation and a synthetic scene
//! generator.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod float;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod sctb;
pub mod tape;
pub mod tensor;
pub mod train;

pub use config::{LossWeights, ModelConfig, TrainHyper};
pub use error::{Error, Result};
pub use float::{DType, Float};
pub use model::SCTransNet;
pub use params::{Init, ParamId, ParamKind, ParamStore};
pub use tape::{Gradients, Mode, Tape, Var};
pub use tensor::{FeatureMap, Tensor};
pub use train::Trainer;
