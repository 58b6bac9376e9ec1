//! Quadric-error-metric edge-collapse decimation.
//!
//! Deterministic: collapse candidates are ordered by (cost, insertion id),
//! the surviving vertex of a collapse is the smaller index, and all
//! adjacency is kept in ordered sets.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, BTreeSet};

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::geometry::TriMesh;

const BOUNDARY_WEIGHT: f64 = 1e3;

pub struct DecimateResult {
    pub mesh: TriMesh,
    /// original vertex index -> vertex index in the decimated mesh
    pub survivor_map: Vec<u32>,
    pub achieved: usize,
    /// true when collapses stalled before reaching the target count
    pub stalled: bool,
    /// sum of the quadric costs of all performed collapses
    pub total_error: f64,
}

struct Candidate {
    cost: f64,
    id: u64,
    u: u32,
    v: u32,
    ver_u: u32,
    ver_v: u32,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cost == other.cost && self.id == other.id
    }
}
impl Eq for Candidate {}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap: smaller cost first, then smaller insertion id
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.id.cmp(&self.id))
    }
}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn plane_quadric(normal: &Vector3<f64>, point: &Vector3<f64>) -> Matrix4<f64> {
    let d = -normal.dot(point);
    let p = Vector4::new(normal.x, normal.y, normal.z, d);
    p * p.transpose()
}

fn quadric_cost(q: &Matrix4<f64>, x: &Vector3<f64>) -> f64 {
    let h = Vector4::new(x.x, x.y, x.z, 1.0);
    (h.transpose() * q * h)[(0, 0)].max(0.0)
}

/// Quadric-optimal placement; falls back to the best of the endpoints and
/// the midpoint when the 3x3 system is ill conditioned.
fn optimal_position(
    q: &Matrix4<f64>,
    pu: &Vector3<f64>,
    pv: &Vector3<f64>,
) -> (Vector3<f64>, f64) {
    let a = Matrix3::new(
        q[(0, 0)], q[(0, 1)], q[(0, 2)],
        q[(1, 0)], q[(1, 1)], q[(1, 2)],
        q[(2, 0)], q[(2, 1)], q[(2, 2)],
    );
    let b = Vector3::new(q[(0, 3)], q[(1, 3)], q[(2, 3)]);
    let scale = a.norm();
    if scale > 0.0 {
        if let Some(x) = a.lu().solve(&(-b)) {
            // reject wildly conditioned solves
            let residual = (a * x + b).norm();
            if x.iter().all(|c| c.is_finite()) && residual <= 1e-8 * scale.max(1.0) {
                return (x, quadric_cost(q, &x));
            }
        }
    }
    let mid = 0.5 * (pu + pv);
    let mut best = (*pu, quadric_cost(q, pu));
    for cand in [(*pv, quadric_cost(q, pv)), (mid, quadric_cost(q, &mid))] {
        if cand.1 < best.1 {
            best = cand;
        }
    }
    best
}

pub fn qslim_decimate(mesh: &TriMesh, target: usize) -> Result<DecimateResult> {
    let n = mesh.vertex_count();
    if target < 4 {
        return Err(Error::Argument(format!("decimation target {target} must be >= 4")));
    }
    if target > n {
        return Err(Error::Argument(format!(
            "decimation target {target} exceeds vertex count {n}"
        )));
    }
    if target == n {
        return Ok(DecimateResult {
            mesh: mesh.clone(),
            survivor_map: (0..n as u32).collect(),
            achieved: n,
            stalled: false,
            total_error: 0.0,
        });
    }

    let mut positions = mesh.vertices.clone();
    let mut quadrics = vec![Matrix4::<f64>::zeros(); n];
    let mut faces: Vec<[u32; 3]> = mesh.faces.clone();
    let mut face_alive = vec![true; faces.len()];
    let mut vertex_faces: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];
    let mut adjacency: Vec<BTreeSet<u32>> = vec![BTreeSet::new(); n];

    // face plane quadrics
    let mut edge_face_count = std::collections::BTreeMap::new();
    for (fi, f) in faces.iter().enumerate() {
        let p0 = positions[f[0] as usize];
        let p1 = positions[f[1] as usize];
        let p2 = positions[f[2] as usize];
        let cross = (p1 - p0).cross(&(p2 - p0));
        let norm = cross.norm();
        if norm > 0.0 {
            let q = plane_quadric(&(cross / norm), &p0);
            for &v in f {
                quadrics[v as usize] += q;
            }
        }
        for &v in f {
            vertex_faces[v as usize].insert(fi as u32);
        }
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            adjacency[a as usize].insert(b);
            adjacency[b as usize].insert(a);
            *edge_face_count.entry((a.min(b), a.max(b))).or_insert(0u32) += 1;
        }
    }

    // boundary preservation: an edge with a single incident face gets a
    // heavily weighted quadric for the plane through the edge and
    // perpendicular to that face
    for (&(a, b), &count) in &edge_face_count {
        if count != 1 {
            continue;
        }
        let pa = positions[a as usize];
        let pb = positions[b as usize];
        let fi = *vertex_faces[a as usize]
            .intersection(&vertex_faces[b as usize])
            .next()
            .unwrap() as usize;
        let f = faces[fi];
        let p0 = positions[f[0] as usize];
        let p1 = positions[f[1] as usize];
        let p2 = positions[f[2] as usize];
        let face_n = (p1 - p0).cross(&(p2 - p0));
        let edge = pb - pa;
        let perp = edge.cross(&face_n);
        let norm = perp.norm();
        if norm > 0.0 {
            let q = BOUNDARY_WEIGHT * edge.norm_squared() * plane_quadric(&(perp / norm), &pa);
            quadrics[a as usize] += q;
            quadrics[b as usize] += q;
        }
    }

    let mut alive = vec![true; n];
    let mut version = vec![0u32; n];
    let mut parent: Vec<u32> = (0..n as u32).collect();
    let mut alive_count = n;
    let mut heap = BinaryHeap::new();
    let mut next_id = 0u64;
    let mut total_error = 0.0;

    let push_edge = |heap: &mut BinaryHeap<Candidate>,
                         next_id: &mut u64,
                         u: u32,
                         v: u32,
                         quadrics: &[Matrix4<f64>],
                         positions: &[Vector3<f64>],
                         version: &[u32]| {
        let (u, v) = (u.min(v), u.max(v));
        let q = quadrics[u as usize] + quadrics[v as usize];
        let (_, cost) = optimal_position(&q, &positions[u as usize], &positions[v as usize]);
        heap.push(Candidate {
            cost,
            id: *next_id,
            u,
            v,
            ver_u: version[u as usize],
            ver_v: version[v as usize],
        });
        *next_id += 1;
    };

    for (&(a, b), _) in &edge_face_count {
        push_edge(&mut heap, &mut next_id, a, b, &quadrics, &positions, &version);
    }

    while alive_count > target {
        let Some(c) = heap.pop() else { break };
        let (u, v) = (c.u as usize, c.v as usize);
        if !alive[u]
            || !alive[v]
            || version[u] != c.ver_u
            || version[v] != c.ver_v
            || !adjacency[u].contains(&c.v)
        {
            continue;
        }

        // link condition: every common neighbor of u and v must be the
        // apex of a face shared by the edge, otherwise the collapse
        // creates a fin / duplicated face
        let shared_faces = vertex_faces[u].intersection(&vertex_faces[v]).count();
        let common_neighbors = adjacency[u].intersection(&adjacency[v]).count();
        if common_neighbors != shared_faces {
            continue;
        }

        let q = quadrics[u] + quadrics[v];
        let (pos, cost) = optimal_position(&q, &positions[u], &positions[v]);
        total_error += cost;

        // collapse v into u
        positions[u] = pos;
        quadrics[u] = q;
        alive[v] = false;
        parent[v] = u as u32;
        alive_count -= 1;

        // rewrite faces of v; drop those that become degenerate
        let v_faces: Vec<u32> = vertex_faces[v].iter().copied().collect();
        for fi in v_faces {
            let f = &mut faces[fi as usize];
            if !face_alive[fi as usize] {
                continue;
            }
            for idx in f.iter_mut() {
                if *idx == c.v {
                    *idx = c.u;
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                face_alive[fi as usize] = false;
                let fcopy = *f;
                for &w in &fcopy {
                    vertex_faces[w as usize].remove(&fi);
                }
            } else {
                vertex_faces[u].insert(fi);
            }
        }
        vertex_faces[v].clear();

        // merge adjacency
        let v_neighbors: Vec<u32> = adjacency[v].iter().copied().collect();
        for w in v_neighbors {
            adjacency[w as usize].remove(&c.v);
            if w != c.u {
                adjacency[w as usize].insert(c.u);
                adjacency[u].insert(w);
            }
        }
        adjacency[u].remove(&c.u);
        adjacency[u].remove(&c.v);
        adjacency[v].clear();
        version[u] += 1;

        // refresh candidates incident to the merged vertex
        let u_neighbors: Vec<u32> = adjacency[u].iter().copied().collect();
        for w in u_neighbors {
            if alive[w as usize] {
                push_edge(&mut heap, &mut next_id, c.u, w, &quadrics, &positions, &version);
            }
        }
    }

    // assemble the decimated mesh; only vertices referenced by live faces
    // survive
    let mut referenced = vec![false; n];
    let mut out_faces = Vec::new();
    for (fi, f) in faces.iter().enumerate() {
        if face_alive[fi] {
            out_faces.push(*f);
            for &v in f {
                referenced[v as usize] = true;
            }
        }
    }
    let mut remap = vec![u32::MAX; n];
    let mut out_vertices = Vec::new();
    for i in 0..n {
        if alive[i] && referenced[i] {
            remap[i] = out_vertices.len() as u32;
            out_vertices.push(positions[i]);
        }
    }
    if out_vertices.is_empty() {
        return Err(Error::Numerical("decimation destroyed every face".into()));
    }
    for f in &mut out_faces {
        for v in f.iter_mut() {
            *v = remap[*v as usize];
        }
    }

    // resolve the collapse forest to final indices; alive-but-unreferenced
    // roots map to the geometrically nearest kept vertex
    let mut survivor_map = vec![0u32; n];
    for i in 0..n {
        let mut r = i as u32;
        while parent[r as usize] != r {
            r = parent[r as usize];
        }
        survivor_map[i] = if remap[r as usize] != u32::MAX {
            remap[r as usize]
        } else {
            let p = positions[r as usize];
            let mut best = (f64::INFINITY, 0u32);
            for (j, q) in out_vertices.iter().enumerate() {
                let d = (p - q).norm_squared();
                if d < best.0 {
                    best = (d, j as u32);
                }
            }
            best.1
        };
    }

    let achieved = out_vertices.len();
    let mesh = TriMesh::new(out_vertices, out_faces, format!("{}_dec{target}", mesh.name))?;
    Ok(DecimateResult {
        stalled: achieved != target,
        achieved,
        mesh,
        survivor_map,
        total_error,
    })
}
