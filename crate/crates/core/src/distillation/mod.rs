//! Score distillation with frequency-band residuals, the masked reference
//! loss, and the two-stage optimizer that combines them.

mod hybrid;
mod optim;
mod reference;
mod residual;
mod sds;

use thiserror::Error;

pub use hybrid::{
    hybrid_step, CutoffSource, HfConditioning, HybridOptimizer, OptimizationPlan, Providers, Stage,
    StepMetrics, ViewSet,
};
pub use optim::{Adam, AdamConfig, LearningRates};
pub use reference::{reference_loss, reference_loss_grad};
pub use residual::{sds_residual, ResidualMode};
pub use sds::{
    sds_pixel_gradient, sds_step_grad, Band, BranchTag, CutoffRule, NoiseDraw, SdsBranch,
    SdsGradient, SdsSettings,
};

use crate::frequency::FrequencyError;
use crate::priors::PriorError;
use crate::scene::SceneError;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("reference mask selects no pixels")]
    EmptyMask,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid plan: {0}")]
    InvalidPlan(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("{branch} provider {name} failed: {source}")]
    Provider {
        name: String,
        branch: BranchTag,
        source: PriorError,
    },
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Frequency(#[from] FrequencyError),
    #[error(transparent)]
    Scene(#[from] SceneError),
}
