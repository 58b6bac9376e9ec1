//! Cotangent Laplace-Beltrami discretization with barycentric lumped mass.

use nalgebra::DMatrix;

use crate::error::Result;
use crate::geometry::TriMesh;

/// Sparse symmetric matrix in CSR form.
#[derive(Debug, Clone)]
pub struct SparseSym {
    pub n: usize,
    pub offsets: Vec<usize>,
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
}

impl SparseSym {
    pub fn from_triplets(n: usize, triplets: &[(u32, u32, f64)]) -> Self {
        let mut rows: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        for &(i, j, v) in triplets {
            rows[i as usize].push((j, v));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        offsets.push(0);
        for row in &mut rows {
            row.sort_unstable_by_key(|&(c, _)| c);
            let mut k = 0;
            while k < row.len() {
                let c = row[k].0;
                let mut v = 0.0;
                while k < row.len() && row[k].0 == c {
                    v += row[k].1;
                    k += 1;
                }
                if v != 0.0 {
                    cols.push(c);
                    vals.push(v);
                }
            }
            offsets.push(cols.len());
        }
        SparseSym { n, offsets, cols, vals }
    }

    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for i in 0..self.n {
            let mut acc = 0.0;
            for k in self.offsets[i]..self.offsets[i + 1] {
                acc += self.vals[k] * x[self.cols[k] as usize];
            }
            y[i] = acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for k in self.offsets[i]..self.offsets[i + 1] {
                m[(i, self.cols[k] as usize)] = self.vals[k];
            }
        }
        m
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        for k in self.offsets[i]..self.offsets[i + 1] {
            if self.cols[k] as usize == j {
                return self.vals[k];
            }
        }
        0.0
    }
}

/// Result of the Laplacian assembly: stiffness L (positive semidefinite,
/// `L = D - W` sign convention), lumped mass vector, and the number of
/// zero-area faces that contributed nothing.
pub struct LaplacianParts {
    pub stiffness: SparseSym,
    pub mass: Vec<f64>,
    pub degenerate_faces: usize,
}

pub fn cotan_laplacian(mesh: &TriMesh) -> Result<LaplacianParts> {
    cotan_laplacian_opts(mesh, false)
}

/// `clamp_negative` clamps negative cotangent weights to zero; the default
/// keeps them and relies on symmetrization only.
pub fn cotan_laplacian_opts(mesh: &TriMesh, clamp_negative: bool) -> Result<LaplacianParts> {
    let n = mesh.vertex_count();
    let mut triplets: Vec<(u32, u32, f64)> = Vec::with_capacity(mesh.face_count() * 12);
    let mut mass = vec![0.0f64; n];
    let mut degenerate = 0usize;

    for f in &mesh.faces {
        let p = [
            mesh.vertices[f[0] as usize],
            mesh.vertices[f[1] as usize],
            mesh.vertices[f[2] as usize],
        ];
        let area2 = (p[1] - p[0]).cross(&(p[2] - p[0])).norm();
        if area2 <= 0.0 {
            degenerate += 1;
            continue;
        }
        let area = 0.5 * area2;
        for k in 0..3 {
            mass[f[k] as usize] += area / 3.0;
        }
        // cot at corner c opposite edge (a, b): dot / (2*area)
        for c in 0..3 {
            let a = f[(c + 1) % 3];
            let b = f[(c + 2) % 3];
            let e1 = p[(c + 1) % 3] - p[c];
            let e2 = p[(c + 2) % 3] - p[c];
            let mut cot = e1.dot(&e2) / area2;
            if clamp_negative && cot < 0.0 {
                cot = 0.0;
            }
            let w = 0.5 * cot;
            triplets.push((a, b, -w));
            triplets.push((b, a, -w));
            triplets.push((a, a, w));
            triplets.push((b, b, w));
        }
    }

    // Keep M invertible when a vertex only touches degenerate faces.
    let mean_mass = mass.iter().sum::<f64>() / n as f64;
    let floor = (mean_mass * 1e-12).max(f64::MIN_POSITIVE);
    for m in &mut mass {
        if *m <= 0.0 {
            *m = floor;
        }
    }

    // L <- (L + L^T)/2; assembly above is already structurally symmetric,
    // this removes rounding asymmetry.
    let l = SparseSym::from_triplets(n, &triplets);
    let mut sym_triplets = Vec::with_capacity(l.vals.len());
    for i in 0..n {
        for k in l.offsets[i]..l.offsets[i + 1] {
            let j = l.cols[k] as usize;
            let v = 0.5 * (l.vals[k] + l.get(j, i));
            sym_triplets.push((i as u32, j as u32, v));
        }
    }
    let stiffness = SparseSym::from_triplets(n, &sym_triplets);

    Ok(LaplacianParts {
        stiffness,
        mass,
        degenerate_faces: degenerate,
    })
}
