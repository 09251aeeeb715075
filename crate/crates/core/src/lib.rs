//! Rank-composable low-rank adapters for multilingual adaptation.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`gradcheck`]: dense `f64` matrices, a
//!   reverse-mode tape, and the finite-difference oracle.
//! * [`adapters`]: Vanilla, Independent, FlyLoRA and the three Zipper
//!   variants as parameterizations of a per-layer weight update.
//! * [`router`]: LID-embedding → rank-wise mixing weights, and synthetic
//!   embeddings with a prescribed cosine structure.
//! * [`model`]: a toy speech-LLM (encoder, gated projector, prompts, head).
//! * [`data`]: teacher/student multilingual regression tasks with a long tail.
//! * [`train`]: the two-stage regime, Adam, cosine schedule, Initial-B.
//! * [`experiment`], [`report`], [`checks`]: the runner behind the CLI.

pub mod adapters;
pub mod autodiff;
pub mod checks;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod report;
pub mod rng;
pub mod router;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Matrix;
