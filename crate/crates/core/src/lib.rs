//! Zero- and few-shot keypoint detection driven by visual prompts (annotated
//! support images), text prompts, or both.

pub mod auxgen;
pub mod corpus;
pub mod detector;
pub mod diverseprompt;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod llm;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod params;
pub mod prototype;
pub mod raster;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
