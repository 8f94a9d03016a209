//! Frozen-backbone video captioning laboratory: separable cross-attention,
//! gated adapters, pseudolabel pipeline, mixture training and metrics.

pub mod adapter;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod experiments;
mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod shard;
pub mod synth;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use framecap_tensor as tensor;
