//! File formats, manifests, checkpoints, parallel pipelines and the `sigver`
//! command line on top of `sigver-core`.

pub mod aligned;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod formats;
pub mod fsutil;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use error::{AppError, AppResult};
