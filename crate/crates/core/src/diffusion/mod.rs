//! Source-domain trajectory diffusion: cosine schedule, forward noising,
//! the denoiser network, its training loop, and denoiser-to-score
//! conversion. EMA parameters are what downstream sampling uses.

pub mod denoiser;
pub mod schedule;
pub mod train;

pub use denoiser::{DenoiserArch, DenoiserModel, EMBED_DIM};
pub use schedule::{build_cosine_schedule, cosine_schedule, NoiseSchedule};
pub use train::{
    forward_noise, score_from_denoiser, smoothed, train_denoiser, DiffusionTrainConfig,
};
