//! Noise schedules, classifier-free guidance and score providers standing in
//! for pretrained diffusion models.

mod conditioning;
pub mod fixture;
mod latent;
mod provider;
pub mod remote;
mod schedule;
pub mod wire;

use thiserror::Error;

pub use conditioning::{Conditioning, ViewCondition};
pub use fixture::{FixtureArchive, FixtureProvider, RecordingProvider};
pub use latent::{cfg_combine, Encoder, Latent};
pub use provider::{
    SceneOracleProvider, ScoreProvider, ScoreRequest, ScoreResponse, SyntheticProvider,
};
pub use remote::RemoteProvider;
pub use schedule::{add_noise, ddim_step, BetaSchedule, NoiseSchedule, TimestepSampler, Weighting};

use wire::WireError;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("timestep {0} outside schedule of {1} steps")]
    InvalidTimestep(usize, usize),
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid conditioning: {0}")]
    InvalidConditioning(String),
    #[error("unsupported request: {0}")]
    Unsupported(String),
    #[error("no fixture recorded for request {0}")]
    MissingFixture(String),
    #[error("provider timed out")]
    Timeout,
    #[error("protocol version mismatch: expected {expected}, got {found}")]
    VersionMismatch { expected: u32, found: u64 },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote error {code}: {message}")]
    Remote { code: String, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<WireError> for PriorError {
    fn from(e: WireError) -> Self {
        match e {
            WireError::Timeout => PriorError::Timeout,
            WireError::VersionMismatch { expected, found } => {
                PriorError::VersionMismatch { expected, found }
            }
            WireError::Io(io) => PriorError::Io(io),
            other => PriorError::Protocol(other.to_string()),
        }
    }
}
