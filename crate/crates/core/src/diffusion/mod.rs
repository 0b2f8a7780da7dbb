//! Desk-scale identity-conditioned latent diffusion.

pub mod checkpoint;
mod denoiser;
mod sampler;
mod schedule;
mod train;
mod world;

pub use denoiser::{
    block_tag, timestep_embedding, BlockActivations, DenoiserParams, DenoiserSpec, Dims,
    ForwardCache, MASKABLE_BLOCK_MATRICES,
};
pub use sampler::{ancestral_from, guided_prediction, sample, sample_many};
pub use schedule::{
    forward_diffuse, make_schedule, predict_x0, Latent, NoiseSchedule, ScheduleSpec,
};
pub use train::{
    eps_mse_loss, eps_mse_loss_and_grad, noised_real_item, sample_base_batch, train_base,
    Condition, NoisedItem, TrainConfig, TrainedBase,
};
pub use world::{SynthWorld, WorldSpec};
