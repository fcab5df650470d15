//! Scene boundary detection over pre-extracted shot features.
//!
//! A video is a sequence of shots; each shot carries an entity feature (who
//! and what is on screen) and a place feature (where). The pipeline builds
//! two shot-relation graphs over a sliding window — an entity graph linking
//! each shot to its most similar shots regardless of distance, and a place
//! graph routing detail shots through wide establishing shots — smooths the
//! features along those graphs, compares the two halves of the window in a
//! similarity map, and classifies whether a scene boundary follows the
//! center shot.

pub mod blocks;
pub mod data;
pub mod ejg;
pub mod error;
pub mod gradcheck;
pub mod mcd;
pub mod metrics;
pub mod ops;
pub mod params;
pub mod pcg;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
