//! Embedded deformation graph: node construction from a decimated mesh,
//! vertex skinning, and application of per-node rigid transforms.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Vector3};

use super::qslim::qslim_decimate;
use super::rodrigues::{rodrigues, rodrigues_jacobian};
use crate::error::{Error, Result};
use crate::geometry::TriMesh;
use crate::spatial::KdTree3;

const MAGIC: &[u8; 4] = b"DFRD";
const VERSION: u32 = 1;

/// Deformation graph over H nodes. Skinning binds every source vertex to
/// at most K nodes with nonnegative weights summing to one.
#[derive(Debug, Clone)]
pub struct DeformGraph {
    /// node rest positions (H x 3)
    pub nodes: Vec<Vector3<f64>>,
    /// 1-ring adjacency of the decimated mesh; symmetric, sorted, no
    /// self-loops
    pub adjacency: Vec<Vec<u32>>,
    /// per source vertex: K node indices (padded entries carry weight 0)
    pub skin_indices: Vec<u32>,
    /// matching weights, row-normalized
    pub skin_weights: Vec<f64>,
    pub h: usize,
    pub k: usize,
    /// source vertex count
    pub n: usize,
}

/// Optimization state: per-node axis-angle and translation.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphState {
    pub theta: Vec<Vector3<f64>>,
    pub delta: Vec<Vector3<f64>>,
}

impl GraphState {
    pub fn identity(h: usize) -> Self {
        GraphState {
            theta: vec![Vector3::zeros(); h],
            delta: vec![Vector3::zeros(); h],
        }
    }

    pub fn h(&self) -> usize {
        self.theta.len()
    }

    /// Wraps every axis-angle so its norm stays in [0, pi].
    pub fn wrap_angles(&mut self) {
        use std::f64::consts::PI;
        for t in &mut self.theta {
            let phi = t.norm();
            if phi > PI {
                let wrapped = phi - 2.0 * PI * ((phi + PI) / (2.0 * PI)).floor();
                *t *= wrapped / phi;
            }
        }
    }

    /// Flat view used by the optimizer: 6H values, theta rows then delta
    /// rows interleaved per node.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.h() * 6);
        for h in 0..self.h() {
            out.extend_from_slice(self.theta[h].as_slice());
            out.extend_from_slice(self.delta[h].as_slice());
        }
        out
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert_eq!(flat.len() % 6, 0);
        let h = flat.len() / 6;
        let mut state = GraphState::identity(h);
        for i in 0..h {
            state.theta[i] = Vector3::new(flat[6 * i], flat[6 * i + 1], flat[6 * i + 2]);
            state.delta[i] = Vector3::new(flat[6 * i + 3], flat[6 * i + 4], flat[6 * i + 5]);
        }
        state
    }
}

/// Gradient with the same layout as [`GraphState`].
#[derive(Debug, Clone)]
pub struct StateGrad {
    pub theta: Vec<Vector3<f64>>,
    pub delta: Vec<Vector3<f64>>,
}

impl StateGrad {
    pub fn zeros(h: usize) -> Self {
        StateGrad {
            theta: vec![Vector3::zeros(); h],
            delta: vec![Vector3::zeros(); h],
        }
    }

    pub fn add_scaled(&mut self, other: &StateGrad, s: f64) {
        for h in 0..self.theta.len() {
            self.theta[h] += s * other.theta[h];
            self.delta[h] += s * other.delta[h];
        }
    }

    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for h in 0..self.theta.len() {
            acc += self.theta[h].norm_squared() + self.delta[h].norm_squared();
        }
        acc.sqrt()
    }
}

/// Builds the graph: nodes are the QSlim-decimated vertices, adjacency is
/// the decimated 1-ring, and each source vertex is skinned to its K
/// nearest nodes with `(1 - d/d_{K+1})^2` falloff weights.
pub fn build_graph(mesh: &TriMesh, h: usize, k: usize) -> Result<DeformGraph> {
    let n = mesh.vertex_count();
    if h < 4 {
        return Err(Error::Argument(format!("node count H={h} must be >= 4")));
    }
    if h > n {
        return Err(Error::Argument(format!("node count H={h} exceeds vertex count {n}")));
    }
    if k < 1 {
        return Err(Error::Argument("skinning neighbor count K must be >= 1".into()));
    }

    let decimated = qslim_decimate(mesh, h)?;
    let nodes = decimated.mesh.vertices.clone();
    let h_actual = nodes.len();
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); h_actual];
    for (a, b) in decimated.mesh.edges() {
        adjacency[a as usize].push(b);
        adjacency[b as usize].push(a);
    }
    for l in &mut adjacency {
        l.sort_unstable();
        l.dedup();
    }

    let k_eff = k.min(h_actual.saturating_sub(1)).max(1);
    let tree = KdTree3::build(&nodes);
    let mut skin_indices = vec![0u32; n * k];
    let mut skin_weights = vec![0.0f64; n * k];
    for (i, v) in mesh.vertices.iter().enumerate() {
        let nearest = tree.knearest(v, k_eff + 1);
        let d_next = nearest.last().map(|e| e.0).unwrap_or(0.0);
        let row_i = &mut skin_indices[i * k..(i + 1) * k];
        let row_w = &mut skin_weights[i * k..(i + 1) * k];
        if d_next <= 0.0 {
            // all candidates coincide with the vertex: rigid bind
            row_i[0] = nearest[0].1;
            row_w[0] = 1.0;
            for (slot, e) in row_i.iter_mut().enumerate().skip(1) {
                *e = nearest.get(slot).map(|x| x.1).unwrap_or(nearest[0].1);
            }
            continue;
        }
        let mut sum = 0.0;
        for (slot, &(d, idx)) in nearest.iter().take(k_eff).enumerate() {
            let w = (1.0 - d / d_next).powi(2);
            row_i[slot] = idx;
            row_w[slot] = w;
            sum += w;
        }
        if sum <= 0.0 {
            // all K nearest sit exactly at d_next; fall back to uniform
            for w in row_w.iter_mut().take(k_eff) {
                *w = 1.0 / k_eff as f64;
            }
        } else {
            for w in row_w.iter_mut().take(k_eff) {
                *w /= sum;
            }
        }
        for slot in k_eff..k {
            row_i[slot] = row_i[0];
        }
    }

    Ok(DeformGraph {
        nodes,
        adjacency,
        skin_indices,
        skin_weights,
        h: h_actual,
        k,
        n,
    })
}

impl DeformGraph {
    /// Blended application of per-node rigid transforms, always evaluated
    /// from the rest positions with the accumulated state:
    /// `v_i' = sum_h w_ih [ R(theta_h)(v_i0 - g_h) + g_h + delta_h ]`.
    pub fn apply(&self, state: &GraphState, rest: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
        assert_eq!(rest.len(), self.n);
        assert_eq!(state.h(), self.h);
        let rotations: Vec<Matrix3<f64>> = state.theta.iter().map(rodrigues).collect();
        let mut out = Vec::with_capacity(self.n);
        for (i, v0) in rest.iter().enumerate() {
            let mut v = Vector3::zeros();
            for slot in 0..self.k {
                let w = self.skin_weights[i * self.k + slot];
                if w == 0.0 {
                    continue;
                }
                let h = self.skin_indices[i * self.k + slot] as usize;
                let g = self.nodes[h];
                v += w * (rotations[h] * (v0 - g) + g + state.delta[h]);
            }
            out.push(v);
        }
        out
    }

    /// Chains per-vertex gradients through the skinning Jacobian into
    /// (theta, delta) space.
    pub fn backprop_vertices(
        &self,
        state: &GraphState,
        rest: &[Vector3<f64>],
        grad_vertices: &[Vector3<f64>],
    ) -> StateGrad {
        assert_eq!(rest.len(), self.n);
        assert_eq!(grad_vertices.len(), self.n);
        let jacobians: Vec<[Matrix3<f64>; 3]> =
            state.theta.iter().map(rodrigues_jacobian).collect();
        let mut grad = StateGrad::zeros(self.h);
        for i in 0..self.n {
            let gv = grad_vertices[i];
            if gv == Vector3::zeros() {
                continue;
            }
            for slot in 0..self.k {
                let w = self.skin_weights[i * self.k + slot];
                if w == 0.0 {
                    continue;
                }
                let h = self.skin_indices[i * self.k + slot] as usize;
                let local = rest[i] - self.nodes[h];
                grad.delta[h] += w * gv;
                for a in 0..3 {
                    grad.theta[h][a] += w * gv.dot(&(jacobians[h][a] * local));
                }
            }
        }
        grad
    }

    /// Graph cache: magic "DFRD", u32 version, u64 H, u64 K, u64 N, node
    /// positions, CSR adjacency (u64 offsets, u32 indices), skin indices
    /// (u32) and weights (f64); little-endian throughout.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.h as u64).to_le_bytes());
        buf.extend_from_slice(&(self.k as u64).to_le_bytes());
        buf.extend_from_slice(&(self.n as u64).to_le_bytes());
        for g in &self.nodes {
            for c in g.iter() {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
        let mut offset = 0u64;
        buf.extend_from_slice(&offset.to_le_bytes());
        for l in &self.adjacency {
            offset += l.len() as u64;
            buf.extend_from_slice(&offset.to_le_bytes());
        }
        for l in &self.adjacency {
            for &j in l {
                buf.extend_from_slice(&j.to_le_bytes());
            }
        }
        for &i in &self.skin_indices {
            buf.extend_from_slice(&i.to_le_bytes());
        }
        for &w in &self.skin_weights {
            buf.extend_from_slice(&w.to_le_bytes());
        }
        File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 32 || &buf[0..4] != MAGIC {
            return Err(Error::parse(path, 0, "bad graph cache magic"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::parse(path, 0, format!("unsupported cache version {version}")));
        }
        let mut off = 8usize;
        let read_u64 = |buf: &[u8], off: &mut usize| {
            let v = u64::from_le_bytes(buf[*off..*off + 8].try_into().unwrap());
            *off += 8;
            v as usize
        };
        let h = read_u64(&buf, &mut off);
        let k = read_u64(&buf, &mut off);
        let n = read_u64(&buf, &mut off);
        let need = |off: usize, bytes: usize| -> Result<()> {
            if off + bytes > buf.len() {
                Err(Error::parse(path, 0, "graph cache truncated"))
            } else {
                Ok(())
            }
        };
        need(off, h * 24)?;
        let mut nodes = Vec::with_capacity(h);
        for _ in 0..h {
            let mut c = [0.0; 3];
            for v in &mut c {
                *v = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
                off += 8;
            }
            nodes.push(Vector3::new(c[0], c[1], c[2]));
        }
        need(off, (h + 1) * 8)?;
        let mut offsets = Vec::with_capacity(h + 1);
        for _ in 0..=h {
            offsets.push(u64::from_le_bytes(buf[off..off + 8].try_into().unwrap()) as usize);
            off += 8;
        }
        let total = *offsets.last().unwrap();
        need(off, total * 4)?;
        let mut adjacency = Vec::with_capacity(h);
        for w in offsets.windows(2) {
            let mut l = Vec::with_capacity(w[1] - w[0]);
            for _ in w[0]..w[1] {
                l.push(u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
                off += 4;
            }
            adjacency.push(l);
        }
        need(off, n * k * 4 + n * k * 8)?;
        let mut skin_indices = Vec::with_capacity(n * k);
        for _ in 0..n * k {
            skin_indices.push(u32::from_le_bytes(buf[off..off + 4].try_into().unwrap()));
            off += 4;
        }
        let mut skin_weights = Vec::with_capacity(n * k);
        for _ in 0..n * k {
            skin_weights.push(f64::from_le_bytes(buf[off..off + 8].try_into().unwrap()));
            off += 8;
        }
        Ok(DeformGraph {
            nodes,
            adjacency,
            skin_indices,
            skin_weights,
            h,
            k,
            n,
        })
    }
}
