//! Staged training: checkpoints, latent cache, optimizer, and the stage drivers.

pub mod cache;
pub mod checkpoint;
pub mod corpus;
pub mod optim;
pub mod stages;

pub use cache::LatentCache;
pub use checkpoint::{StageCheckpoint, StagePhase, StageTag};
pub use corpus::Corpus;
pub use stages::{fit_losses, train_individual, train_iterative, train_joint, FitLosses, StageOutcome};
