//! Self-coherence guidance: concept masks from the previous step's attention,
//! amplification of bound tokens inside them, and the guided sampling loop.

pub mod apply;
pub mod config;
pub mod guide;
pub mod kmeans;
pub mod prompt;
pub mod ratio;

pub use apply::scg_apply;
pub use config::{ActiveSteps, GuidanceConfig, MaskMethod, RatioSource};
pub use guide::{extract_masks, guided_sample, GuidanceTrace, Pass, StepRecord, TraceLevel, TraceOptions};
pub use kmeans::{kmeans_1d, kmeans_mask};
pub use prompt::{BindingPair, BindingPrompt, PairKind, Task};
pub use ratio::{ratio_mask, PlannerEndpoint, PlannerFallback, RatioPlan, RatioPlanner, RatioTable};
