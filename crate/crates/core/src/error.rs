// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the data generator, activation store, analysis
/// modules and the experiment harness.
#[derive(Debug, Error)]
pub enum Error {
    /// Scene or question generation ran out of resample attempts.
    #[error("generation failed after {attempts} attempts: constraint `{constraint}` never satisfied")]
    Generation {
        /// Name of the constraint that kept failing.
        constraint: String,
        /// Attempts spent before giving up.
        attempts: usize,
    },

    /// Example metadata is missing a field or holds an unexpected value.
    #[error("invalid metadata field `{field}`: {reason}")]
    Metadata {
        /// Dotted path of the offending field.
        field: String,
        /// What was wrong with it.
        reason: String,
    },

    /// Binary shard or checkpoint does not follow its format contract.
    #[error("format error at byte {offset}: {reason}")]
    Format {
        /// Byte offset where the problem was detected.
        offset: u64,
        /// Description of the problem.
        reason: String,
    },

    /// Dimensions of two operands disagree.
    #[error("dimension mismatch: {0}")]
    Shape(String),

    /// A numeric routine produced a non-finite value.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Invalid argument or configuration value.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// A pipeline stage was requested before the stage it depends on.
    #[error("stage `{stage}` needs artifacts from `{requires}`; run `{requires}` first (missing {missing})")]
    Dependency {
        /// Stage that was requested.
        stage: String,
        /// Stage that has to run first.
        requires: String,
        /// Artifact that was not found.
        missing: String,
    },

    /// Stored answers disagree with the validator.
    #[error("validation found {mismatches} mismatching record(s) in {split}")]
    Validation {
        /// Split that failed.
        split: String,
        /// Number of mismatches.
        mismatches: usize,
    },

    /// Refusing to clobber existing output.
    #[error("output {0} already exists; pass --overwrite to replace it")]
    Exists(PathBuf),

    /// I/O failure, tagged with the path involved.
    #[error("I/O error on {path}: {source}")]
    Io {
        /// Path being read or written.
        path: PathBuf,
        /// Underlying error.
        #[source]
        source: std::io::Error,
    },

    /// JSON (de)serialization failure.
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Config parse failure.
    #[error("config: {0}")]
    Config(String),

    /// Image encoding failure.
    #[error("image: {0}")]
    Image(#[from] image::ImageError),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn metadata(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::Metadata {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
