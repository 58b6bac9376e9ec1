//! Feature-guided non-rigid registration of a template mesh onto target
//! point clouds, with functional-map diagnostics and a geodesic
//! correspondence evaluation layer.

pub mod defgraph;
pub mod energies;
pub mod error;
pub mod fmaps;
pub mod geometry;
pub mod registration;
pub mod spatial;
pub mod spectral;

pub use error::{Error, Result};
