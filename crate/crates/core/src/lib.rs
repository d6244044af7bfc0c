//! On-line handwritten signature verification with a Siamese CNN + Transformer.
//!
//! The pipeline runs raw pen-tablet samples through a 100 Hz resampler, the
//! 23 local time functions, DTW pair alignment to a fixed 2000-sample frame,
//! one of four encoder configurations and a sigmoid scoring head, and ends in
//! EER/DET evaluation split by random and skilled impostors.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, checkpoints and the command line live in the `sigver`
//! companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod dtw;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod signature;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
