//! Composed image+text retrieval.
//!
//! A query pairs an image (given as pre-extracted low/middle/high level
//! feature maps) with text token embeddings. A cross-attention block per level
//! injects the text into the image features; candidates are scored against the
//! composed query by a convex mix of a local term (learned region masks) and a
//! global term (pooled features), then ranked.
//!
//! Module map:
//! - [`tensor`], [`autodiff`], [`gradcheck`]: `f64` tensors, reverse-mode tape,
//!   finite-difference checks.
//! - [`composer`], [`alignment`], [`model`]: the trainable scoring function.
//! - [`retrieval`], [`metrics`]: ranking and evaluation.
//! - [`trainer`]: contrastive training, Adam, stratified folds, early stopping.
//! - [`bundle`], [`checkpoint`], [`synthetic`], [`config`], [`experiment`]:
//!   file formats and the cross-validation harness.

pub mod alignment;
pub mod autodiff;
pub mod bundle;
pub mod checkpoint;
pub mod composer;
pub mod config;
pub mod error;
pub mod experiment;
pub mod features;
pub mod gradcheck;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod params;
pub mod retrieval;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use features::{FeatureMap, Level, LevelDims, MultiLevelFeatures, TokenEmbeddings};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
