//! Vector field attention for deformable image registration.
//!
//! A shared or paired U-Net extracts feature pyramids from the fixed and
//! moving images. At every level, from coarse to fine, a parameter-free
//! attention compares each fixed feature with a small window of moving
//! features and turns the attention map directly into a displacement by
//! a weighted sum of the window offsets. Level transforms are scaled by
//! a learnable β and composed into the final transform.

pub mod attention;
pub mod dataio;
pub mod error;
pub mod extractor;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod train;

pub use error::{Result, VfaError};
