use nalgebra::Vector3;

use super::io::Shape;
use super::mesh::{PointCloud, TriMesh};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormalizeMode {
    Center,
    CenterUnitArea,
}

/// Uniform scale followed by translation: `p' = scale * p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.scale * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        SimilarityTransform {
            scale: 1.0 / self.scale,
            translation: -self.translation / self.scale,
        }
    }
}

/// Centers the shape at the origin; `CenterUnitArea` additionally scales a
/// mesh to unit surface area. Returns the transform that was applied.
pub fn normalize_shape(shape: &Shape, mode: NormalizeMode) -> Result<(Shape, SimilarityTransform)> {
    match (shape, mode) {
        (Shape::Cloud(_), NormalizeMode::CenterUnitArea) => Err(Error::UnsupportedMode(
            "center_unit_area requires a mesh (point clouds have no surface area)".into(),
        )),
        (Shape::Cloud(c), NormalizeMode::Center) => {
            let t = SimilarityTransform {
                scale: 1.0,
                translation: -c.centroid(),
            };
            let points = c.points.iter().map(|p| t.apply(p)).collect();
            Ok((
                Shape::Cloud(PointCloud {
                    points,
                    name: c.name.clone(),
                }),
                t,
            ))
        }
        (Shape::Mesh(m), mode) => {
            let centroid = m.centroid();
            let scale = match mode {
                NormalizeMode::Center => 1.0,
                NormalizeMode::CenterUnitArea => {
                    let area = m.surface_area();
                    if area <= 0.0 {
                        return Err(Error::Numerical(
                            "cannot normalize to unit area: total surface area is zero".into(),
                        ));
                    }
                    1.0 / area.sqrt()
                }
            };
            let t = SimilarityTransform {
                scale,
                translation: -scale * centroid,
            };
            let mesh = TriMesh {
                vertices: m.vertices.iter().map(|p| t.apply(p)).collect(),
                ..m.clone()
            };
            Ok((Shape::Mesh(mesh), t))
        }
    }
}
