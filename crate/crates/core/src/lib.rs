//! Learned reconstruction of crack profiles from eddy-current response maps.
//!
//! The pipeline: [`simulate`] synthesizes smoothed random crack profiles and
//! their three-frequency response maps, [`dataset`] assembles and persists
//! them, [`neural`] holds the encoder-decoder network with hand-written
//! backpropagation, [`optim`] the Ranger optimizer, and [`harness`] the
//! training loop, evaluation protocol and report writers used by the CLI.

mod codec;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod neural;
pub mod optim;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
