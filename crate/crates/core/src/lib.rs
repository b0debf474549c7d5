//! Desk-scale latent world-model laboratory: composite world-model training,
//! frozen-teacher reward distillation, MPPI planning, toy control tasks,
//! offline episode storage and FP16 checkpoint quantization.

pub mod checkpoint;
pub mod dataset;
pub mod distill;
pub mod envs;
pub mod f16;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pca;
pub mod planner;
pub mod quant;
pub mod rng;
pub mod tensor;
pub mod world_model;

pub use error::{Error, Result};
