//! Attention-entropy profiling and a portable dump format for attention maps.

pub mod dump;
pub mod entropy;

pub use dump::{decode_tensors, dump_tensors, encode_tensors, load_tensors, DUMP_MAGIC};
pub use entropy::{attention_entropy, profile_run, EntropyProfile, EntropyRow};
