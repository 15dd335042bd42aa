//! Paragraph classification for theorem/proof blocks in scientific PDFs.
//!
//! The crate covers the whole stack from extracted paragraph records to
//! block-sequence predictions:
//!
//! - [`corpus`]: JSONL records, layout features, font vocabulary, splits
//! - [`tensor`], [`autodiff`], [`nn`], [`optim`]: dense numerics with a
//!   reverse-mode tape, shared layers and Adam
//! - [`vision`]: bitmap normalization and a stand-in vision embedder
//! - [`font_encoder`]: recurrent encoder over font-id sequences
//! - [`fusion`]: late fusion of frozen text/vision/font features
//! - [`sequence`]: linear-chain CRF, sliding-window transformer and HAT
//! - [`train`]: metrics, baselines, training loops, checkpoints, synthetic data

pub mod autodiff;
pub mod corpus;
pub mod error;
pub mod font_encoder;
pub mod fusion;
pub mod gradcheck;
pub mod nn;
pub mod optim;
pub mod sequence;
pub mod tensor;
pub mod train;
pub mod vision;

pub use error::{Error, Result};
