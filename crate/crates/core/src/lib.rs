//! Keypoint-guided test-time channel selection for frozen image classifiers,
//! with the trap-set splitting, training and evaluation machinery used to
//! measure it.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod image;
pub mod keypoints;
pub mod model;
pub mod selection;
pub mod synth;
pub mod toy;
pub mod trapset;

pub use error::{Error, Result};
