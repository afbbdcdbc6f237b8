//! Prompt-attention segmentation of cell images.
//!
//! A small U-Net maps both a target image and an annotated prompt crop to
//! per-class feature grids. Inner products between target and prompt
//! locations, softened by a temperature, form an attention map that carries
//! the prompt's one-hot labels over to every target pixel. The same machinery
//! drives one-shot training and a two-stage partially-supervised pipeline
//! that grows rectangle annotations into pseudo-labels.

pub mod attention;
pub mod dataio;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod pipelines;
pub mod rng;
pub mod segnet;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
