// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration, staged pipeline and report tables.

pub mod config;
pub mod pipeline;
pub mod report;

pub use config::ExperimentConfig;
pub use pipeline::{Pipeline, RunManifest, Stage};
pub use report::{Schema, Table};
