//! DDIM scheduler, toy denoiser, prompt embedding and trainer.

pub mod control;
pub mod denoiser;
pub mod prompt;
pub mod sampler;
pub mod schedule;
pub mod train;

pub use control::{AttentionControl, BlockMass, ForwardTrace, StepControl, TraceRequest};
pub use denoiser::{time_embedding, tokens_of, Block, SEEDED_OUT_GAIN, DenoiserDims, ToyDenoiser};
pub use prompt::{embed_composite, embed_prompt, token_vector, Lexicon, PromptEmbedding, END, START};
pub use sampler::{
    ddim_denoise, ddim_invert, ddim_step, relative_l2, DenoiseMode, DenoiseOptions, DenoiseOutput, Latent,
    Trajectory,
};
pub use schedule::{make_schedule, make_schedule_with, BetaSchedule, SchedulerParams};
pub use train::{loss_and_grad, mse_loss, train_toy, TrainConfig, TrainReport, TrainSample};
