//! Continuous-space speculative decoding over Gaussian latent tokens, with an
//! attention-entropy early-stop monitor and the draft-training losses.

pub mod entropy;
pub mod error;
pub mod latent;
pub mod models;
pub mod speculative;
pub mod train;

pub use error::{Error, Result};
pub use latent::{AttentionMap, GaussianParams, LatentToken, NoiseSchedule, RandomSource};
pub use models::{AnalyticGaussianModel, ArModel, ModelOutput, ToyARModel};
