//! Deformation-graph construction and application.

pub mod graph;
pub mod qslim;
pub mod rodrigues;

pub use graph::{build_graph, DeformGraph, GraphState, StateGrad};
pub use qslim::{qslim_decimate, DecimateResult};
pub use rodrigues::{rodrigues, rodrigues_jacobian, skew};
