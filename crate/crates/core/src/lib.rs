//! Prompt tuning for frozen dual-encoder vision-language models with
//! separate real-domain, synthetic-domain and shared visual prompts.
//!
//! Training mixes few-shot real images of base classes with synthetic images
//! of base and novel classes. Each domain is classified in its own prompted
//! embedding space, and a triplet term pulls synthetic base-class features
//! toward real features of the same class.

pub mod archive;
pub mod autodiff;
pub mod data;
pub mod encoders;
pub mod model;
pub mod objectives;
pub mod error;
pub mod evaluation;
pub mod prompts;
pub mod study;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
