//! Token-conditioned denoising diffusion on points: cosine noise schedule,
//! MLP noise predictor, training with condition dropout, and a
//! deterministic guided sampler.

mod denoiser;
mod sampler;
mod schedule;
mod train;

pub use denoiser::{
    time_features, BoundDenoiser, BoundTokens, ConditionalDenoiser, DenoiserConfig, Prompt,
    TokenTable, CHECKPOINT_FORMAT_VERSION,
};
pub use sampler::{guided_step, initial_noise, run_steps, sample, TERMINAL_NOISE_LABEL};
pub use schedule::{make_schedule, NoiseSchedule, COSINE_OFFSET, MIN_ALPHA_BAR};
pub use train::{train_denoiser, DenoiserTrainConfig};
