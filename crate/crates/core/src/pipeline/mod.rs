//! Configuration, artifact formats and the experiment stages behind the
//! command-line driver.

pub mod artifacts;
pub mod config;
pub mod experiment;
pub mod persist;
pub mod report;

pub use artifacts::{run, Command, Layout};
pub use config::{Auto, List, RunConfig, Stage};
pub use experiment::{EncoderKind, NliData, UNTUNED};
pub use persist::{
    decode_checkpoint, decode_xaln, encode_checkpoint, encode_xaln, load_checkpoint, load_text_model,
    record_size, save_checkpoint, save_text_model, Record, XALN_MAGIC, XALN_VERSION,
};
pub use report::{scatter_svg, ProjectionSummary, RetrievalRow};
