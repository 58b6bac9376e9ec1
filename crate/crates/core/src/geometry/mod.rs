//! Shape representation, file I/O, normalization, and geodesic distances.

pub mod geodesic;
pub mod io;
pub mod mesh;
pub mod normalize;
pub mod shapes;

pub use geodesic::{geodesic_row, EdgeGraph, GeodesicMatrix};
pub use io::{load_cloud, load_mesh, load_shape, save_cloud, save_mesh, save_shape, Shape, ShapeKind};
pub use mesh::{bbox_diagonal, PointCloud, TriMesh};
pub use normalize::{normalize_shape, NormalizeMode, SimilarityTransform};
