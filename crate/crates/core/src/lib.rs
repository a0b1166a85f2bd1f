//! Entropy-gated dynamic patchification for autoregressive generation over
//! raster-scanned token grids.

pub mod corpus;
pub mod entropy;
pub mod error;
pub mod kernels;
pub mod model;
pub mod patchifier;
pub mod positional;
pub mod runtime;
pub mod verify;

pub use error::{Error, Result};
