// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic visual-reasoning data, TopK sparse autoencoders and masked
//! residual-stream interventions, run against a seeded surrogate network.

pub mod activation;
pub mod circuits;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod intervention;
pub mod linalg;
pub mod probing;
pub mod sae;
pub mod seed;
pub mod svr;

pub use error::{Error, Result};
