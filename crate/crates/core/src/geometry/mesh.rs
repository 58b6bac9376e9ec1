use nalgebra::Vector3;

use crate::error::{Error, Result};

/// Triangle mesh with file-order vertex indexing.
///
/// Vertex order is preserved exactly as loaded; correspondence indices
/// throughout the engine are file-order indices into `vertices`.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<Vector3<f64>>,
    pub faces: Vec<[u32; 3]>,
    pub name: String,
    /// Per-vertex connected-component id over the edge graph.
    pub component: Vec<u32>,
    pub component_count: usize,
    /// Number of isolated vertices dropped at construction.
    pub dropped_isolated: usize,
}

impl TriMesh {
    /// Validates faces, drops isolated vertices (reindexing faces), and
    /// labels connected components.
    pub fn new(
        vertices: Vec<Vector3<f64>>,
        faces: Vec<[u32; 3]>,
        name: impl Into<String>,
    ) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::Argument("mesh has no faces".into()));
        }
        let n = vertices.len();
        for (fi, f) in faces.iter().enumerate() {
            for &v in f {
                if v as usize >= n {
                    return Err(Error::Argument(format!(
                        "face {fi} references vertex {v} but mesh has {n} vertices"
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Argument(format!(
                    "face {fi} has repeated vertex indices {f:?}"
                )));
            }
            for &v in f {
                if !vertices[v as usize].iter().all(|c| c.is_finite()) {
                    return Err(Error::Argument(format!("vertex {v} has non-finite coordinates")));
                }
            }
        }

        // Drop vertices not referenced by any face, preserving order.
        let mut used = vec![false; n];
        for f in &faces {
            for &v in f {
                used[v as usize] = true;
            }
        }
        let dropped = used.iter().filter(|u| !**u).count();
        let (vertices, faces) = if dropped > 0 {
            let mut remap = vec![u32::MAX; n];
            let mut kept = Vec::with_capacity(n - dropped);
            for (i, v) in vertices.into_iter().enumerate() {
                if used[i] {
                    remap[i] = kept.len() as u32;
                    kept.push(v);
                }
            }
            let faces = faces
                .into_iter()
                .map(|f| [remap[f[0] as usize], remap[f[1] as usize], remap[f[2] as usize]])
                .collect();
            (kept, faces)
        } else {
            (vertices, faces)
        };

        let (component, component_count) = label_components(vertices.len(), &faces);
        Ok(TriMesh {
            vertices,
            faces,
            name: name.into(),
            component,
            component_count,
            dropped_isolated: dropped,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    /// Total surface area as the sum of per-face cross-product areas.
    /// Returns `(area, degenerate)`; `degenerate` is set when every face
    /// has zero area.
    pub fn surface_area_flagged(&self) -> (f64, bool) {
        let mut total = 0.0;
        let mut any_positive = false;
        for f in &self.faces {
            let a = self.vertices[f[0] as usize];
            let b = self.vertices[f[1] as usize];
            let c = self.vertices[f[2] as usize];
            let area = 0.5 * (b - a).cross(&(c - a)).norm();
            if area > 0.0 {
                any_positive = true;
            }
            total += area;
        }
        (total, !any_positive)
    }

    pub fn surface_area(&self) -> f64 {
        self.surface_area_flagged().0
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for v in &self.vertices {
            c += v;
        }
        c / self.vertices.len() as f64
    }

    /// Undirected edge list (i < j), sorted, deduplicated.
    pub fn edges(&self) -> Vec<(u32, u32)> {
        let mut edges = Vec::with_capacity(self.faces.len() * 3);
        for f in &self.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                edges.push((a.min(b), a.max(b)));
            }
        }
        edges.sort_unstable();
        edges.dedup();
        edges
    }

    /// Axis-aligned bounding box diagonal length.
    pub fn bbox_diagonal(&self) -> f64 {
        bbox_diagonal(&self.vertices)
    }
}

/// Unstructured target point set.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Vector3<f64>>,
    pub name: String,
}

impl PointCloud {
    pub fn new(points: Vec<Vector3<f64>>, name: impl Into<String>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Argument("point cloud is empty".into()));
        }
        for (i, p) in points.iter().enumerate() {
            if !p.iter().all(|c| c.is_finite()) {
                return Err(Error::Argument(format!("point {i} has non-finite coordinates")));
            }
        }
        Ok(PointCloud {
            points,
            name: name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Vector3<f64> {
        let mut c = Vector3::zeros();
        for p in &self.points {
            c += p;
        }
        c / self.points.len() as f64
    }
}

pub fn bbox_diagonal(points: &[Vector3<f64>]) -> f64 {
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        for k in 0..3 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    (hi - lo).norm()
}

fn label_components(n: usize, faces: &[[u32; 3]]) -> (Vec<u32>, usize) {
    let mut adj: Vec<Vec<u32>> = vec![Vec::new(); n];
    for f in faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
    }
    let mut component = vec![u32::MAX; n];
    let mut count = 0u32;
    let mut stack = Vec::new();
    for start in 0..n {
        if component[start] != u32::MAX {
            continue;
        }
        component[start] = count;
        stack.push(start as u32);
        while let Some(v) = stack.pop() {
            for &w in &adj[v as usize] {
                if component[w as usize] == u32::MAX {
                    component[w as usize] = count;
                    stack.push(w);
                }
            }
        }
        count += 1;
    }
    (component, count as usize)
}
