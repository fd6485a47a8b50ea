//! Text and vision transformer encoders, projection heads, and masked-token
//! pretraining for the text side.

mod layers;
mod mlm;
mod params;
mod text;
mod vision;

#[cfg(test)]
mod tests;

pub use layers::{Block, EncoderConfig, LayerNorm, Linear, ProjectionHead, INIT_STD};
pub use mlm::{mlm_recovery, pretrain_text_mlm, MlmConfig, TextModel};
pub use params::{Bound, GroupAdam, ParamEntry, ParamGroup, ParamId, ParamStore};
pub use text::{embed_sequences, encode_text, TextEncoder, TokenBatch};
pub use vision::{encode_image, patchify, VisionEncoder, NUM_PATCHES, PATCH, PATCH_PIXELS};
