pub mod annotation;
pub mod checkpoint;
pub mod data_pipeline;
pub mod error;
pub mod fusion_policy;
pub mod grpo;
pub mod image;
pub mod metrics;
pub mod nn;
pub mod overlay;
pub mod reward_model;
pub mod synthetic;

pub use error::{Error, Result};
