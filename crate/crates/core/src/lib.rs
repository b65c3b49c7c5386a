//! Camouflaged object detection: a boundary-guided encoder-decoder network
//! with multi-scale feature aggregation and gated cross-level propagation,
//! its training losses, a segmentation metric toolkit, dataset ingestion,
//! and the training/evaluation drivers behind the `fapnet` binary.

pub mod error;
pub mod graph;
pub mod kernels;
pub mod nn;
pub mod tensor;
pub mod data;
pub mod archive;
pub mod backbone;
pub mod bgm;
pub mod mfam;
pub mod cfpm;
pub mod network;
pub mod losses;
pub mod metrics;
pub mod checkpoint;
pub mod training;
pub mod config;
pub mod cli;

pub use error::{Error, Result};
pub use tensor::Tensor;
