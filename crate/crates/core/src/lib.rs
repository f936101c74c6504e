//! Decoding engine for masked diffusion language models.
//!
//! Provides baseline single-token decoding, threshold parallel decoding and
//! trace-credit decoding (top-1 and full-vocabulary variants) over a
//! pluggable [`denoise::Denoiser`], plus traces and efficiency metrics
//! (tokens per forward, decoding boundaries).

pub mod credit;
pub mod decoder;
pub mod denoise;
pub mod error;
pub mod io;
pub mod model;
pub mod prob;
pub mod trace;

pub use decoder::{run_generation, Generation, RunAborted};
pub use error::{Error, ErrorKind, Result};
pub use model::{BlockLayout, DecoderConfig, Sampling, SequenceState, Strategy, TokenId, Vocab};
