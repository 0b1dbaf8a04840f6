//! Class-conditional diffusion over observation vectors: noise schedule,
//! ε-prediction denoiser, reverse sampling with recorded transitions, and
//! the denoising objective used for pretraining and cold-start.

pub mod model;
pub mod sampling;
pub mod schedule;
pub mod training;

pub use model::{DenoiserCheckpoint, DenoiserConfig};
pub use sampling::{
    log_prob_step, posterior_mean, reverse_step, sample_trajectories, sample_trajectory,
    Trajectory, Transition,
};
pub use schedule::{build_schedule, q_sample, NoiseSchedule, ScheduleConfig};
pub use training::{
    coldstart_init, denoise_loss, denoise_loss_at, draw_noise, pretrain_generic,
    reset_embeddings, ColdStartConfig, LossPoint, NoisedExample, PretrainConfig, TrainedDenoiser,
};
