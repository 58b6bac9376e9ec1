//! Generalized eigenproblem L phi = lambda M phi and the spectral basis.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::laplacian::SparseSym;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DFRB";
const VERSION: u32 = 1;

/// Threshold above which the iterative shift-invert Lanczos path is used
/// instead of a dense solve.
pub const DENSE_LIMIT: usize = 3000;

/// Mass-orthonormal Laplace-Beltrami eigenbasis: `Phi^T M Phi = I`.
#[derive(Debug, Clone)]
pub struct SpectralBasis {
    /// n x k eigenfunctions, columns ordered by ascending eigenvalue.
    pub phi: DMatrix<f64>,
    /// ascending, nonnegative
    pub eigenvalues: Vec<f64>,
    /// lumped mass (diagonal of M)
    pub mass: Vec<f64>,
    pub k: usize,
}

impl SpectralBasis {
    pub fn n(&self) -> usize {
        self.phi.nrows()
    }

    /// `Phi^T M f` — the mass-weighted projection (exact pseudo-inverse
    /// under mass-orthonormality).
    pub fn project(&self, f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if f.nrows() != self.n() {
            return Err(Error::Dimension(format!(
                "project: function has {} rows, basis has {}",
                f.nrows(),
                self.n()
            )));
        }
        let mut mf = f.clone();
        for i in 0..mf.nrows() {
            let m = self.mass[i];
            for j in 0..mf.ncols() {
                mf[(i, j)] *= m;
            }
        }
        Ok(self.phi.transpose() * mf)
    }

    /// Basis cache: magic "DFRB", u32 version, u64 n, u64 k, then
    /// eigenvalues (k f64), mass (n f64), Phi (n*k f64 row-major), LE.
    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.n();
        let k = self.k;
        let mut buf = Vec::with_capacity(24 + 8 * (k + n + n * k));
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(k as u64).to_le_bytes());
        for v in &self.eigenvalues {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.mass {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for i in 0..n {
            for j in 0..k {
                buf.extend_from_slice(&self.phi[(i, j)].to_le_bytes());
            }
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
        if buf.len() < 24 || &buf[0..4] != MAGIC {
            return Err(Error::parse(path, 0, "bad basis cache magic"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::parse(path, 0, format!("unsupported cache version {version}")));
        }
        let n = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let k = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
        let expected = 24 + 8 * (k + n + n * k);
        if buf.len() != expected {
            return Err(Error::parse(path, 0, "basis cache size mismatch"));
        }
        let mut off = 24;
        let mut read_f64 = |buf: &[u8]| {
            let v = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
            off += 8;
            v
        };
        let eigenvalues: Vec<f64> = (0..k).map(|_| read_f64(&buf)).collect();
        let mass: Vec<f64> = (0..n).map(|_| read_f64(&buf)).collect();
        let mut phi = DMatrix::zeros(n, k);
        for i in 0..n {
            for j in 0..k {
                phi[(i, j)] = read_f64(&buf);
            }
        }
        Ok(SpectralBasis {
            phi,
            eigenvalues,
            mass,
            k,
        })
    }
}

/// Smallest-k generalized eigenpairs of `L phi = lambda M phi` with
/// diagonal M. Dense solve up to [`DENSE_LIMIT`] vertices, shift-invert
/// Lanczos above.
pub fn eigenbasis(stiffness: &SparseSym, mass: &[f64], k: usize) -> Result<SpectralBasis> {
    eigenbasis_opts(stiffness, mass, k, stiffness.n <= DENSE_LIMIT)
}

pub fn eigenbasis_opts(
    stiffness: &SparseSym,
    mass: &[f64],
    k: usize,
    dense: bool,
) -> Result<SpectralBasis> {
    let n = stiffness.n;
    if k == 0 || k > n {
        return Err(Error::Argument(format!("basis size k={k} must be in 1..={n}")));
    }
    if mass.len() != n {
        return Err(Error::Dimension("mass vector length != matrix size".into()));
    }
    // Standard form: B = M^{-1/2} L M^{-1/2}, psi = M^{1/2} phi.
    let inv_sqrt_m: Vec<f64> = mass.iter().map(|&m| 1.0 / m.sqrt()).collect();

    let (vals, mut vecs) = if dense {
        dense_smallest(stiffness, &inv_sqrt_m, k)
    } else {
        lanczos_smallest(stiffness, &inv_sqrt_m, k)?
    };

    // phi = M^{-1/2} psi
    for i in 0..n {
        for j in 0..k {
            vecs[(i, j)] *= inv_sqrt_m[i];
        }
    }
    // Sign convention: the entry of largest magnitude in each eigenfunction
    // is positive; ties resolved by the smaller row index.
    for j in 0..k {
        let mut best = (0.0f64, 0usize);
        for i in 0..n {
            let a = vecs[(i, j)].abs();
            if a > best.0 {
                best = (a, i);
            }
        }
        if vecs[(best.1, j)] < 0.0 {
            for i in 0..n {
                vecs[(i, j)] = -vecs[(i, j)];
            }
        }
    }
    let max_abs = vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let eigenvalues = vals
        .iter()
        .map(|&v| {
            if v < 0.0 && -v <= 1e-8 * (1.0 + max_abs) {
                0.0
            } else {
                v
            }
        })
        .collect();
    Ok(SpectralBasis {
        phi: vecs,
        eigenvalues,
        mass: mass.to_vec(),
        k,
    })
}

fn dense_smallest(
    stiffness: &SparseSym,
    inv_sqrt_m: &[f64],
    k: usize,
) -> (Vec<f64>, DMatrix<f64>) {
    let n = stiffness.n;
    let mut b = DMatrix::zeros(n, n);
    for i in 0..n {
        for idx in stiffness.offsets[i]..stiffness.offsets[i + 1] {
            let j = stiffness.cols[idx] as usize;
            b[(i, j)] = stiffness.vals[idx] * inv_sqrt_m[i] * inv_sqrt_m[j];
        }
    }
    // enforce exact symmetry before factorization
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (b[(i, j)] + b[(j, i)]);
            b[(i, j)] = v;
            b[(j, i)] = v;
        }
    }
    let eig = b.symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[c]).unwrap());
    let vals: Vec<f64> = order[..k].iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = DMatrix::zeros(n, k);
    for (col, &src) in order[..k].iter().enumerate() {
        vecs.set_column(col, &eig.eigenvectors.column(src));
    }
    (vals, vecs)
}

/// Shift-invert Lanczos with full reorthogonalization. The inner solve
/// `(B + sigma I) x = b` uses conjugate gradients.
fn lanczos_smallest(
    stiffness: &SparseSym,
    inv_sqrt_m: &[f64],
    k: usize,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let n = stiffness.n;
    let matvec_b = |x: &[f64], y: &mut [f64], tmp: &mut [f64]| {
        for i in 0..n {
            tmp[i] = x[i] * inv_sqrt_m[i];
        }
        stiffness.matvec(tmp, y);
        for i in 0..n {
            y[i] *= inv_sqrt_m[i];
        }
    };
    // scale-aware shift keeps B + sigma I well posed
    let mut diag_sum = 0.0;
    let mut tmp = vec![0.0; n];
    {
        let mut e = vec![0.0; n];
        let mut col = vec![0.0; n];
        // estimate trace via diagonal of B
        for i in 0..n {
            e[i] = 1.0;
            matvec_b(&e, &mut col, &mut tmp);
            diag_sum += col[i];
            e[i] = 0.0;
            if n > 256 && i >= 255 {
                diag_sum *= n as f64 / 256.0;
                break;
            }
        }
    }
    let sigma = (diag_sum / n as f64).abs().max(1e-12) * 1e-4;

    let cg = |b: &[f64], x: &mut Vec<f64>, tmp: &mut Vec<f64>| -> Result<()> {
        x.iter_mut().for_each(|v| *v = 0.0);
        let mut r = b.to_vec();
        let mut p = r.clone();
        let mut ap = vec![0.0; n];
        let mut rs: f64 = r.iter().map(|v| v * v).sum();
        let b_norm = rs.sqrt().max(f64::MIN_POSITIVE);
        for _ in 0..20 * n {
            if rs.sqrt() <= 1e-12 * b_norm {
                return Ok(());
            }
            matvec_b(&p, &mut ap, tmp);
            for i in 0..n {
                ap[i] += sigma * p[i];
            }
            let pap: f64 = p.iter().zip(&ap).map(|(a, b)| a * b).sum();
            if pap <= 0.0 {
                return Err(Error::Numerical("CG breakdown: matrix not positive definite".into()));
            }
            let alpha = rs / pap;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            let rs_new: f64 = r.iter().map(|v| v * v).sum();
            let beta = rs_new / rs;
            rs = rs_new;
            for i in 0..n {
                p[i] = r[i] + beta * p[i];
            }
        }
        Err(Error::Numerical(format!(
            "CG failed to converge: residual {:.3e} of {:.3e}",
            rs.sqrt(),
            b_norm
        )))
    };

    let steps = (2 * k + 30).min(n);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(steps);
    let mut alphas = Vec::with_capacity(steps);
    let mut betas = Vec::with_capacity(steps);

    // deterministic start vector
    let mut v: Vec<f64> = (0..n)
        .map(|i| 1.0 + (i as f64 * 0.754877666).sin())
        .collect();
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);

    let mut w = vec![0.0; n];
    let mut tmp2 = vec![0.0; n];
    for step in 0..steps {
        cg(&v, &mut w, &mut tmp2)?;
        // full reorthogonalization against all previous Lanczos vectors
        for prev in &basis {
            let dot: f64 = prev.iter().zip(&w).map(|(a, b)| a * b).sum();
            for i in 0..n {
                w[i] -= dot * prev[i];
            }
        }
        let dot: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        alphas.push(dot);
        for i in 0..n {
            w[i] -= dot * v[i];
        }
        basis.push(v.clone());
        let beta = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if step + 1 == steps || beta < 1e-14 {
            break;
        }
        betas.push(beta);
        for i in 0..n {
            v[i] = w[i] / beta;
        }
    }

    let m = alphas.len();
    let mut t = DMatrix::zeros(m, m);
    for i in 0..m {
        t[(i, i)] = alphas[i];
        if i + 1 < m {
            t[(i, i + 1)] = betas[i];
            t[(i + 1, i)] = betas[i];
        }
    }
    let eig = t.symmetric_eigen();
    // largest eigenvalues of (B + sigma I)^{-1} = smallest of B
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].partial_cmp(&eig.eigenvalues[a]).unwrap());
    if order.len() < k {
        return Err(Error::Numerical(format!(
            "Lanczos produced only {} Ritz pairs, need {k}",
            order.len()
        )));
    }
    let mut vals = Vec::with_capacity(k);
    let mut vecs = DMatrix::zeros(n, k);
    let mut residuals = Vec::with_capacity(k);
    for (col, &ri) in order[..k].iter().enumerate() {
        let mu = eig.eigenvalues[ri];
        let lambda = 1.0 / mu - sigma;
        vals.push(lambda);
        let mut x = vec![0.0; n];
        for (s, bv) in basis.iter().enumerate() {
            let c = eig.eigenvectors[(s, ri)];
            for i in 0..n {
                x[i] += c * bv[i];
            }
        }
        let nrm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        x.iter_mut().for_each(|v| *v /= nrm);
        // residual || B x - lambda x ||
        matvec_b(&x, &mut w, &mut tmp2);
        let res: f64 = w
            .iter()
            .zip(&x)
            .map(|(bx, xi)| (bx - lambda * xi).powi(2))
            .sum::<f64>()
            .sqrt();
        residuals.push(res);
        for i in 0..n {
            vecs[(i, col)] = x[i];
        }
    }
    let scale = vals.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    if residuals.iter().any(|&r| r > 1e-6 * scale.max(1.0)) {
        return Err(Error::Numerical(format!(
            "Lanczos did not converge; residual norms: {:?}",
            residuals
        )));
    }
    // ensure ascending order among the selected pairs
    let mut idx: Vec<usize> = (0..k).collect();
    idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap());
    let sorted_vals: Vec<f64> = idx.iter().map(|&i| vals[i]).collect();
    let mut sorted_vecs = DMatrix::zeros(n, k);
    for (col, &src) in idx.iter().enumerate() {
        sorted_vecs.set_column(col, &vecs.column(src));
    }
    Ok((sorted_vals, sorted_vecs))
}

/// Residual norms `||L phi_i - lambda_i M phi_i||` for diagnostics.
pub fn residual_norms(stiffness: &SparseSym, basis: &SpectralBasis) -> Vec<f64> {
    let n = basis.n();
    let mut out = Vec::with_capacity(basis.k);
    let mut lphi = vec![0.0; n];
    for j in 0..basis.k {
        let col: Vec<f64> = (0..n).map(|i| basis.phi[(i, j)]).collect();
        stiffness.matvec(&col, &mut lphi);
        let mut res = 0.0;
        for i in 0..n {
            let r = lphi[i] - basis.eigenvalues[j] * basis.mass[i] * col[i];
            res += r * r;
        }
        out.push(res.sqrt());
    }
    out
}

#[allow(dead_code)]
fn unused(_: &DVector<f64>) {}
