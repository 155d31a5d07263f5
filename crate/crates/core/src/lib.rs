//! Adaptive graph convolution for salient object detection.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors and a reverse-mode tape.
//! - [`nn`]: parameter storage, convolution/affine layers, MLP and multi-head attention.
//! - [`agcm`]: prototype pooling, kNN graph, EdgeConv embedding, adaptive refinement
//!   and correlation scores.
//! - [`network`]: five-stage encoder, skip connections with optional AGCMs, ASPP and decoder.
//! - [`training`]: BCE loss, Adam, cosine schedule, flip augmentation and the training loop.
//! - [`metrics`]: max-F, MAE, E-measure and S-measure.
//! - [`data`]: synthetic scenes, PNM I/O and checkpoints.

pub mod agcm;
pub mod data;
pub mod error;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod tensor;
pub mod training;

mod warn;

pub use error::{Error, Result};
pub use tensor::{OpKind, Tape, Tensor, Var};
