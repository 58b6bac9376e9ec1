//! Pipeline layer on top of `dfr-core`: configuration, batch manifests,
//! alignment preprocessing, map composition, and the geodesic evaluation
//! metric.

pub mod align;
pub mod batch;
pub mod config;
pub mod evalmap;
pub mod manifest;

pub use align::{align_input, AlignMode};
pub use batch::{run_batch, EvalReport};
pub use config::Config;
pub use evalmap::{compose_maps, geodesic_error, GeodesicErrorReport};
pub use manifest::RunManifest;
