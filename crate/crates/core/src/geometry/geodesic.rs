//! Graph geodesics over the mesh edge graph with Euclidean edge lengths.
//!
//! Distances between vertices in different connected components are the
//! sentinel `f32::INFINITY`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rayon::prelude::*;

use super::mesh::TriMesh;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DFRG";
const VERSION: u32 = 1;

/// Dense all-pairs geodesic matrix of a source mesh, stored in f32.
#[derive(Debug, Clone)]
pub struct GeodesicMatrix {
    pub n: usize,
    /// row-major n*n
    pub data: Vec<f32>,
    pub source_id: String,
}

/// Weighted adjacency list of the mesh edge graph.
#[derive(Debug, Clone)]
pub struct EdgeGraph {
    pub adj: Vec<Vec<(u32, f64)>>,
}

impl EdgeGraph {
    pub fn from_mesh(mesh: &TriMesh) -> Self {
        let mut adj = vec![Vec::new(); mesh.vertex_count()];
        for (a, b) in mesh.edges() {
            let len = (mesh.vertices[a as usize] - mesh.vertices[b as usize]).norm();
            adj[a as usize].push((b, len));
            adj[b as usize].push((a, len));
        }
        // neighbor order fixed for deterministic traversal
        for l in &mut adj {
            l.sort_unstable_by(|x, y| x.0.cmp(&y.0));
        }
        EdgeGraph { adj }
    }

    pub fn len(&self) -> usize {
        self.adj.len()
    }

    pub fn is_empty(&self) -> bool {
        self.adj.is_empty()
    }
}

#[derive(PartialEq)]
struct HeapItem {
    dist: f64,
    node: u32,
}

impl Eq for HeapItem {}

impl Ord for HeapItem {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on (dist, node)
        other
            .dist
            .partial_cmp(&self.dist)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for HeapItem {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source Dijkstra; the on-demand row mode for large meshes.
pub fn geodesic_row(graph: &EdgeGraph, source: usize) -> Vec<f64> {
    let n = graph.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut done = vec![false; n];
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(HeapItem {
        dist: 0.0,
        node: source as u32,
    });
    while let Some(HeapItem { dist: d, node }) = heap.pop() {
        let u = node as usize;
        if done[u] {
            continue;
        }
        done[u] = true;
        for &(v, w) in &graph.adj[u] {
            let nd = d + w;
            if nd < dist[v as usize] {
                dist[v as usize] = nd;
                heap.push(HeapItem { dist: nd, node: v });
            }
        }
    }
    dist
}

impl GeodesicMatrix {
    /// All-pairs shortest paths, one Dijkstra per source row. Rows are
    /// computed in parallel; each row is independent so the result is
    /// identical to sequential execution. The matrix is symmetrized by
    /// taking the entrywise minimum of (i,j) and (j,i).
    pub fn compute(mesh: &TriMesh) -> Self {
        let graph = EdgeGraph::from_mesh(mesh);
        let n = graph.len();
        let rows: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map(|i| geodesic_row(&graph, i))
            .collect();
        let mut data = vec![0f32; n * n];
        for i in 0..n {
            for j in 0..n {
                let d = rows[i][j].min(rows[j][i]);
                data[i * n + j] = d as f32;
            }
        }
        GeodesicMatrix {
            n,
            data,
            source_id: mesh.name.clone(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.n + j]
    }

    /// Cache file: magic "DFRG", u32 version, u64 n, n*n f32 LE row-major.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::with_capacity(16 + self.data.len() * 4);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, source_id: impl Into<String>) -> Result<Self> {
        let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        if buf.len() < 16 || &buf[0..4] != MAGIC {
            return Err(Error::parse(path, 0, "bad geodesic cache magic"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::parse(path, 0, format!("unsupported cache version {version}")));
        }
        let n = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let expected = 16 + n * n * 4;
        if buf.len() != expected {
            return Err(Error::parse(
                path,
                0,
                format!("cache size mismatch: expected {expected} bytes, got {}", buf.len()),
            ));
        }
        let data = buf[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(GeodesicMatrix {
            n,
            data,
            source_id: source_id.into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;

    #[test]
    fn path_graph_distance() {
        let m = shapes::path_mesh(3);
        let geo = GeodesicMatrix::compute(&m);
        assert_eq!(geo.get(0, 2), 2.0);
        assert_eq!(geo.get(0, 0), 0.0);
    }

    #[test]
    fn equilateral_triangle() {
        let h = 3f64.sqrt() / 2.0;
        let m = TriMesh::new(
            vec![
                nalgebra::Vector3::new(0.0, 0.0, 0.0),
                nalgebra::Vector3::new(1.0, 0.0, 0.0),
                nalgebra::Vector3::new(0.5, h, 0.0),
            ],
            vec![[0, 1, 2]],
            "eq",
        )
        .unwrap();
        let geo = GeodesicMatrix::compute(&m);
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.0 } else { 1.0 };
                assert!((geo.get(i, j) as f64 - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn disconnected_sentinel() {
        let m = TriMesh::new(
            vec![
                nalgebra::Vector3::new(0.0, 0.0, 0.0),
                nalgebra::Vector3::new(1.0, 0.0, 0.0),
                nalgebra::Vector3::new(0.0, 1.0, 0.0),
                nalgebra::Vector3::new(9.0, 0.0, 0.0),
                nalgebra::Vector3::new(10.0, 0.0, 0.0),
                nalgebra::Vector3::new(9.0, 1.0, 0.0),
            ],
            vec![[0, 1, 2], [3, 4, 5]],
            "two",
        )
        .unwrap();
        let geo = GeodesicMatrix::compute(&m);
        assert!(geo.get(0, 3).is_infinite());
        assert!(geo.get(0, 1).is_finite());
    }

    #[test]
    fn dominates_chord_length() {
        let m = shapes::icosphere(1);
        let geo = GeodesicMatrix::compute(&m);
        for i in 0..m.vertex_count() {
            for j in 0..m.vertex_count() {
                let chord = (m.vertices[i] - m.vertices[j]).norm();
                assert!(geo.get(i, j) as f64 >= chord - 1e-5);
            }
        }
    }

    #[test]
    fn symmetric_zero_diagonal() {
        let m = shapes::grid(4, 4);
        let geo = GeodesicMatrix::compute(&m);
        for i in 0..16 {
            assert_eq!(geo.get(i, i), 0.0);
            for j in 0..16 {
                assert_eq!(geo.get(i, j), geo.get(j, i));
            }
        }
    }

    #[test]
    fn cache_roundtrip() {
        let m = shapes::octahedron();
        let geo = GeodesicMatrix::compute(&m);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("geo.dfrg");
        geo.save(&p).unwrap();
        let loaded = GeodesicMatrix::load(&p, "octahedron").unwrap();
        assert_eq!(geo.data, loaded.data);
        assert_eq!(geo.n, loaded.n);
    }
}
