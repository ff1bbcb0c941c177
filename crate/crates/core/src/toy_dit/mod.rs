//! A tiny text-conditioned diffusion transformer: model, noise schedule,
//! sampler, trainer, synthetic dataset and checkpoint format.

pub mod checkpoint;
pub mod dataset;
pub(crate) mod layers;
pub mod model;
pub mod schedule;
pub mod train;

pub use dataset::{make_dataset, DatasetConfig, Layout, NamedColor, Placement, Region, ShapeKind, ToySample};
pub use model::{AttentionHook, ModelConfig, Params, TextEmbedding, ToyModel};
pub use schedule::{ddpm_step, sample, DiffusionSchedule, ScheduleConfig};
pub use train::{
    grounding_targets, train, GroundedTokens, Grounding, GroundingTarget, LossParts, Optimizer, TrainConfig,
    TrainReport,
};
