//! Page-level text recognition with multi-token and windowed-query
//! autoregressive decoding.
//!
//! The crate covers the whole pipeline at desk scale: synthetic page
//! generation ([`synthdoc`]), the encoder/decoder network ([`nncore`]),
//! attention masks ([`masks`]), the decoding strategies and prediction
//! policies ([`decode`]), teacher-forced training and checkpoints
//! ([`train`]), and edit-distance metrics ([`metrics`]).

pub mod decode;
pub mod error;
pub mod font;
pub mod masks;
pub mod metrics;
pub mod nncore;
pub mod synthdoc;
pub mod textcodec;
pub mod train;

pub use decode::{DecodeCaps, DecodeTrace, PredictionPolicy, StopReason, Strategy};
pub use error::{Error, Result};
pub use masks::{AttentionMask, BlockAssignment};
pub use metrics::EvalReport;
pub use nncore::{FeatureGrid, Model, ModelConfig, Position};
pub use synthdoc::{DocumentSample, GrayImage, Manifest, SynthConfig};
pub use textcodec::{PaddedTargets, TokenId, TokenSeq, Vocab};
pub use train::{Checkpoint, TrainConfig, Trainer, Variant};
