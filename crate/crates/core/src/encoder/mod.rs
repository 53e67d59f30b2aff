//! Miniature transformer encoder over a sentence+candidates layout.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod count;
pub mod gradcheck;
pub mod layout;
pub mod ops;
pub mod params;
pub mod stack;

pub use attention::{AttentionMode, Dropout};
pub use config::{Activation, EncoderConfig};
pub use count::{attention_entry_count, CountMode};
pub use layout::{build_quadrant_mask, InputLayout, QuadrantFlags, Region};
pub use params::{EmbeddingTable, EncoderParams, LayerParams, ParameterSet, Parameters};
pub use stack::{encode, encode_backward, encode_hidden, EncoderInput, EncoderOutput};

use crate::error::Result;

/// `forward_full`: masked attention with the given quadrant flags.
pub fn forward_full(
    params: &EncoderParams,
    config: &EncoderConfig,
    input: EncoderInput<'_>,
    flags: QuadrantFlags,
) -> Result<EncoderOutput> {
    encode(params, config, input, AttentionMode::Masked(flags), None)
}

/// `forward_structured_no_c2c`: reduced attention without candidate-to-candidate scores.
pub fn forward_structured_no_c2c(
    params: &EncoderParams,
    config: &EncoderConfig,
    input: EncoderInput<'_>,
) -> Result<EncoderOutput> {
    encode(params, config, input, AttentionMode::StructuredNoC2c, None)
}
