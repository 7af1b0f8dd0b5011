//! Toy continuous-latent AR models standing in for large AR+diffusion
//! networks, plus the diffusion heads and the checkpoint container.

mod analytic;
pub mod checkpoint;
mod diffusion;
mod toy;

pub use analytic::AnalyticGaussianModel;
pub use diffusion::{
    denoise_step, gaussian_x0_prediction, time_embedding, Denoiser, DiffusionHead, HeadMode,
    MlpDenoiser, MlpGrads, MlpTrace, TIME_EMBED_DIM,
};
pub use toy::{
    init_draft_from_target, positional_encoding, AttentionBlock, BackwardSeeds, ForwardTrace,
    GaussianHead, HeadGrads, HeadWeights, InitScales, ModelGrads, ToyARModel, LOGVAR_MAX,
    LOGVAR_MIN,
};

use crate::latent::{AttentionMap, GaussianParams, LatentToken};
use crate::Result;

/// One forward pass: final feature, attention maps per layer per head, and
/// the next-token distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput {
    pub feature: Vec<f64>,
    pub attn: Vec<Vec<AttentionMap>>,
    pub next_dist: GaussianParams,
}

impl ModelOutput {
    pub fn depth(&self) -> usize {
        self.attn.len()
    }
}

/// Anything that can play the draft or target role in speculative decoding.
pub trait ArModel {
    fn dim(&self) -> usize;
    fn depth(&self) -> usize;
    fn forward(&self, ctx: &[LatentToken], condition: &LatentToken) -> Result<ModelOutput>;
}

impl<M: ArModel + ?Sized> ArModel for &M {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn depth(&self) -> usize {
        (**self).depth()
    }
    fn forward(&self, ctx: &[LatentToken], condition: &LatentToken) -> Result<ModelOutput> {
        (**self).forward(ctx, condition)
    }
}

/// Flat parameter access shared by the optimisers, `grad_check` and checkpoints.
pub trait Params {
    fn num_params(&self) -> usize;
    fn flatten(&self) -> Vec<f64>;
    fn assign(&mut self, flat: &[f64]) -> Result<()>;
}
