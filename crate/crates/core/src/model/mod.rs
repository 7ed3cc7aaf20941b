// SPDX-License-Identifier: MIT OR Apache-2.0

//! Checkpoint loading, architecture descriptors and tokenizers.

pub mod arch;
pub mod bundle;
pub mod container;
pub mod tokenizer;

pub use arch::{ArchDescriptor, ChatTemplate, Family, ModelConfig, NormKind, PositionalScheme};
pub use bundle::{load_checkpoint, AttnWeights, HeadWeights, Layer, Mlp, ModelBundle, Norm};
pub use container::{Dtype, Tensor, TensorFile};
pub use tokenizer::Tokenizer;
