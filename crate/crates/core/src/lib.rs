//! Self-coherence guidance for text-conditioned diffusion transformers.
//!
//! Guidance works on cross-attention maps during sampling: concept masks are
//! pulled from the previous step's layer-averaged attention, and attention
//! from positions inside each mask to the bound attribute token is amplified.
//! The crate carries everything needed to exercise that at desk scale: a small
//! dense tensor core, a trainable toy diffusion transformer, the guidance
//! loop, attention-entropy diagnostics and a binding benchmark with an oracle
//! evaluator.
//!
//! Numeric code is generic over [`Scalar`]; `f32` is the working precision and
//! the aliases below name the common instantiations.

pub mod attention;
pub mod benchmark;
pub mod diagnostics;
pub mod error;
pub mod image;
pub mod scalar;
pub mod scg;
pub mod tensor;
pub mod text;
pub mod toy_dit;

pub use attention::{average_attention_maps, cross_attention, AttentionTensor, ConceptMask};
pub use error::{Error, FormatError, Result};
pub use scalar::Scalar;
pub use tensor::{softmax_last_axis, Tensor};
pub use text::Vocab;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type AttentionTensor32 = AttentionTensor<f32>;
pub type AttentionTensor64 = AttentionTensor<f64>;
pub type ToyModel32 = toy_dit::ToyModel<f32>;
pub type ToyModel64 = toy_dit::ToyModel<f64>;
