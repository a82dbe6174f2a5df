//! Kernel-reusing differentiable architecture search for one-stage detector
//! backbones and feature pyramids.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`ops`], [`graph`], [`gradcheck`]: a small reverse-mode
//!   tensor engine with exactly the operations the supernet needs.
//! - [`kernelreuse`]: candidate masks over a shared 5x5 bank and the compound
//!   convolution that mixes all candidates of an edge in one pass.
//! - [`chansearch`]: Gumbel sampling of expansion rates, straight-through
//!   gates, channel slicing and the concat-to-sum weight split.
//! - [`supernet`]: search-space presets, supernet construction and forward,
//!   genotype derivation, materialisation and search-space counting.
//! - [`search`]: the bi-level search loop, toy detection loss and training of
//!   derived networks; [`data`] provides the synthetic dataset.

pub mod chansearch;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernelreuse;
pub mod ops;
pub mod params;
pub mod search;
pub mod selfcheck;
pub mod supernet;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use tensor::{max_rel_error, Real, Shape, Tensor};
