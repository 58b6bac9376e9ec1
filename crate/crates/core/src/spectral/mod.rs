//! Cotangent Laplace-Beltrami discretization and its eigenbasis.

pub mod eigen;
pub mod laplacian;

pub use eigen::{eigenbasis, eigenbasis_opts, residual_norms, SpectralBasis, DENSE_LIMIT};
pub use laplacian::{cotan_laplacian, cotan_laplacian_opts, LaplacianParts, SparseSym};
