//! Gaussian splatting reconstruction driven by frequency-filtered score
//! distillation.

pub mod distillation;
pub mod evaluation;
pub mod frequency;
pub mod pipeline;
pub mod priors;
pub mod render;
pub mod scene;
