//! Few-shot segmentation across domains with composable meta-prompts, built
//! on small frozen toy encoders and a trainable prompt generator, frequency
//! alignment stage and mask decoder.

pub mod cmpg;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod fai;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod params;
pub mod rct;
pub mod tensor;
pub mod training;

pub use config::RunConfig;
pub use encoders::{BinaryMask, ImageSample};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Switches};
pub use numerics::FeatureMap;
pub use training::Episode;
