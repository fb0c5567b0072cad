//! Two-stream sequence models over Gaussian-splat trajectories: transformer
//! encoders pooled into a latent code, a normalizing-flow prior, decoders that
//! predict the next resolution state, training with curvature-weighted
//! reconstruction, and gated extrapolation of new scene states.

mod blocks;
mod config;
mod error;
mod extrapolate;
mod flow;
mod loss;
mod params;
mod train;
mod vae;

pub use config::{ModelConfig, Stream};
pub use error::ModelError;
pub use extrapolate::{
    extrapolate, extrapolate_step, merge_and_prune, snapshot_of_tips, ExtrapolationOutcome,
    ExtrapolationPlan, PruneStats, SelectionWeights, StepReport,
};
pub use flow::{flow_forward, flow_inverse};
pub use loss::{
    chamfer_loss, closed_form_kl, kl_divergence, kl_loss, mc_kl_numeric, total_loss,
    AnnealSchedule, LossParts, LossWeights,
};
pub use params::{Bound, ParamStore};
pub use train::{loss_csv, train, truncate_half, TrainConfig, TrainReport, TrainRow};
pub use vae::{noise_tensor, seeded_noise, CheckpointMeta, Decoded, LatentCode, StreamVae};
