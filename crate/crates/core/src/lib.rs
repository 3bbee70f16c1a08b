//! Latent-bottleneck attention model for single-channel speech separation.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`gradcheck`]: dense tensors, a reverse-mode
//!   tape and a finite-difference checker.
//! * [`attention`]: multi-head attention, the perceiving/latent block and
//!   multiply-accumulate accounting.
//! * [`model`]: encoder, masking network and decoder.
//! * [`objectives`]: SI-SNR and utterance-level permutation invariant loss.
//! * [`training`]: the AdamP optimizer, the training loop and checkpoints.
//! * [`data`]: synthetic mixtures, dataset splits, WAV and manifest I/O.
//! * [`config`]: the `key = value` run configuration.

pub mod attention;
pub mod autodiff;
pub mod chunking;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod params;
pub mod tensor;
pub mod training;

pub use attention::{MacCategory, MacCounter};
pub use autodiff::{Gradients, Tape, Var};
pub use chunking::{ChunkLayout, Overlap};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
pub use params::{Bound, ParamBuilder, ParamId, ParamStore};
pub use model::{count_params, ModelConfig, ModelLayout, ModelParams};
pub use config::RunConfig;
pub use training::{AdamP, AdamPConfig, Checkpoint, LrSchedule, Trainer};
