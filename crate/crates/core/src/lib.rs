//! Self-supervised monocular depth estimation with a boundary-aware
//! lightweight decoder, semantic feature distillation from a frozen
//! segmentation encoder, and a depth-boundary evaluation metric.
//!
//! The pipeline: an [`backbone::Encoder`] produces a five-level feature
//! pyramid, the [`decoder::EfafDecoder`] fuses it into a bounded depth map,
//! [`posenet::PoseNet`] regresses the relative camera motion, and
//! [`geometry`] warps neighbouring frames so that [`losses`] can supervise
//! depth from video alone. [`trainer`] runs the two training stages and
//! [`metrics`] evaluates depth and boundary accuracy.

pub mod backbone;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod error;
pub mod geometry;
mod kernels;
pub mod losses;
pub mod maps;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod posenet;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
