//! Mocap solving toolkit for unlabeled optical markers.
//!
//! Given a sequence of unlabeled 3D marker positions and a per-frame body
//! prior, the solver reconstructs the pose, shape, translation, and global
//! orientation of an articulated body model. The pipeline is: rigid-group
//! marker segmentation, kinematic-chain localization by exhaustive hypothesis
//! testing, then a staged optimization with multiple yaw hypotheses for the
//! root orientation.
//!
//! The crate also ships a synthetic-data generator (`synth`) used to verify
//! the pipeline end to end, standard evaluation metrics (`metrics`), and the
//! file formats plus CLI behind the `mocapfit` binary (`io`, `cli`).

pub mod body_model;
pub mod cli;
pub mod grid;
pub mod io;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod part_localization;
pub mod segmentation;
pub mod solver;
pub mod synth;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("optimizer failure: {0}")]
    Optim(String),
    #[error("unsupported format version {found}, expected major version {expected}")]
    FormatVersion { found: String, expected: u32 },
    #[error("parse error at {locus}: {message}")]
    Parse { locus: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
