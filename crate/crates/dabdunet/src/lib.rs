//! Dense-block U-Net segmentation with attention-gated skips and
//! bidirectional-LSTM skip fusion, built on a self-contained f64
//! reverse-mode autodiff.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and the gradient [`tensor::Tape`];
//! - [`nn`]: dense blocks, transitions, and the attention gate;
//! - [`lstm`]: the bidirectional LSTM skip fusion with channel attention;
//! - [`model`]: whole-network assembly, ablation variants, weight files;
//! - [`train`]: Dice metric, soft-Dice loss, SGD, training and ablation;
//! - [`data`]: the synthetic lesion dataset and sample file I/O;
//! - [`dtf`]: the raw tensor container format;
//! - [`gradcheck`]: finite-difference oracles for every gradient;
//! - [`config`]: the TOML run configuration shared by all CLI commands.
//!
//! The `dabdunet` binary exposes `gen`, `train`, `eval`, `infer`, `ablate`,
//! and `gradcheck` subcommands over these modules. Setting `DABDU_CHECKED=1`
//! makes every tensor operation assert that its output is finite.

pub mod config;
pub mod data;
pub mod dtf;
pub mod error;
pub mod gradcheck;
pub mod lstm;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor};
