//! Streaming long-video memory engine.
//!
//! Stage 1 runs a read-perceive-write cycle over sub-clips of a per-frame
//! token stream, keeping `W` compact tokens per frame in a [`MemoryBank`] and
//! the raw tokens in a [`FeatureBuffer`]. Stage 2 ([`dfs`]) picks key frames by
//! instruction relevance and density-peaks clustering, and [`assembly`] lays
//! out the final language-model input.

pub mod assembly;
pub mod check;
pub mod config;
pub mod dfs;
mod error;
pub mod format;
pub mod memory;
pub mod perceiver;
pub mod pipeline;
pub mod stream;
pub mod tensor;
pub mod verify;

pub use config::{RunConfig, TemporalMode, ZRepr};
pub use error::{Error, Result};
pub use memory::{FeatureBuffer, MemoryBank, MemoryEntry, QueryBank};
pub use perceiver::{ModelParams, PerceiverParams};
pub use stream::{FrameTokenStream, InstructionEncoding};
pub use tensor::Matrix;
