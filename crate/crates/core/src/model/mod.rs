//! Character vocabulary, decoder-only transformer, sampler and checkpoints.

pub mod checkpoint;
pub mod sampling;
pub mod transformer;
pub mod vocab;

pub use checkpoint::{Container, PolicyCheckpoint, SectionData};
pub use sampling::{generate, sequence_logprob, Generation, SamplerConfig};
pub use transformer::{Bound, DecoderModel, ModelConfig};
pub use vocab::Vocabulary;
