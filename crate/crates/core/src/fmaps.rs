//! Functional-map estimation and spectral losses computed on supplied
//! feature matrices. No learning happens here; features arrive as files
//! and these routines score them.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::spatial::nearest_rows;
use crate::spectral::SpectralBasis;

const MAGIC: &[u8; 4] = b"DFRF";
const VERSION: u32 = 1;

/// Per-point embedding matrix (n rows, d columns).
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub shape_id: String,
}

impl FeatureMatrix {
    pub fn new(values: DMatrix<f64>, shape_id: impl Into<String>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("feature matrix contains non-finite entries".into()));
        }
        Ok(FeatureMatrix {
            values,
            shape_id: shape_id.into(),
        })
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn d(&self) -> usize {
        self.values.ncols()
    }

    pub fn row_flat(&self) -> Vec<f64> {
        let (n, d) = (self.n(), self.d());
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                out.push(self.values[(i, j)]);
            }
        }
        out
    }

    /// Feature file: magic "DFRF", u32 version=1, u64 n, u64 d, then
    /// n*d f64 LE row-major. A text sidecar `<path>.meta` links the file
    /// to its shape by name and point count.
    pub fn save(&self, path: &Path) -> Result<()> {
        let (n, d) = (self.n(), self.d());
        let mut buf = Vec::with_capacity(24 + 8 * n * d);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&(n as u64).to_le_bytes());
        buf.extend_from_slice(&(d as u64).to_le_bytes());
        for i in 0..n {
            for j in 0..d {
                buf.extend_from_slice(&self.values[(i, j)].to_le_bytes());
            }
        }
        File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))?;
        let meta = format!("shape = {}\npoints = {}\n", self.shape_id, n);
        let meta_path = sidecar_path(path);
        std::fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        if buf.len() < 24 || &buf[0..4] != MAGIC {
            return Err(Error::parse(path, 0, "bad feature file magic"));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::parse(path, 0, format!("unsupported feature version {version}")));
        }
        let n = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
        let d = u64::from_le_bytes(buf[16..24].try_into().unwrap()) as usize;
        if buf.len() != 24 + 8 * n * d {
            return Err(Error::parse(path, 0, "feature file size mismatch"));
        }
        let mut values = DMatrix::zeros(n, d);
        let mut off = 24;
        for i in 0..n {
            for j in 0..d {
                values[(i, j)] = f64::from_le_bytes(buf[off..off + 8].try_into().unwrap());
                off += 8;
            }
        }
        // sidecar name takes precedence when present
        let mut shape_id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "features".into());
        let meta_path = sidecar_path(path);
        if let Ok(meta) = std::fs::read_to_string(&meta_path) {
            for line in meta.lines() {
                if let Some((key, val)) = line.split_once('=') {
                    match key.trim() {
                        "shape" => shape_id = val.trim().to_string(),
                        "points" => {
                            let pts: usize = val.trim().parse().map_err(|_| {
                                Error::parse(&meta_path, 0, "bad points count in sidecar")
                            })?;
                            if pts != n {
                                return Err(Error::Dimension(format!(
                                    "sidecar declares {pts} points but feature file has {n} rows"
                                )));
                            }
                        }
                        _ => {}
                    }
                }
            }
        }
        FeatureMatrix::new(values, shape_id)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    std::path::PathBuf::from(s)
}

/// k x k map from basis-1 coefficients to basis-2 coefficients.
#[derive(Debug, Clone)]
pub struct FunctionalMap {
    pub c: DMatrix<f64>,
}

/// Row-stochastic soft correspondence matrix (n1 x n2).
#[derive(Debug, Clone)]
pub struct SoftMap {
    pub pi: DMatrix<f64>,
    pub alpha: f64,
}

/// One softmax row of the soft map without materializing the matrix.
pub fn soft_map_row(f1_row: &[f64], f2: &FeatureMatrix, alpha: f64) -> Vec<f64> {
    let (m, d) = (f2.n(), f2.d());
    debug_assert_eq!(f1_row.len(), d);
    let mut logits = Vec::with_capacity(m);
    let mut max = f64::NEG_INFINITY;
    for j in 0..m {
        let mut dist = 0.0;
        for k in 0..d {
            let t = f1_row[k] - f2.values[(j, k)];
            dist += t * t;
        }
        let l = -alpha * dist.sqrt();
        max = max.max(l);
        logits.push(l);
    }
    let mut sum = 0.0;
    for l in &mut logits {
        *l = (*l - max).exp();
        sum += *l;
    }
    for l in &mut logits {
        *l /= sum;
    }
    logits
}

/// Feature-distance softmax map, stabilized by per-row max subtraction.
pub fn soft_map(f1: &FeatureMatrix, f2: &FeatureMatrix, alpha: f64) -> Result<SoftMap> {
    if alpha <= 0.0 {
        return Err(Error::Argument(format!("soft map temperature alpha={alpha} must be > 0")));
    }
    if f1.d() != f2.d() {
        return Err(Error::Dimension(format!(
            "feature dimensions differ: {} vs {}",
            f1.d(),
            f2.d()
        )));
    }
    let (n, m) = (f1.n(), f2.n());
    let mut pi = DMatrix::zeros(n, m);
    for i in 0..n {
        let row: Vec<f64> = (0..f1.d()).map(|k| f1.values[(i, k)]).collect();
        let soft = soft_map_row(&row, f2, alpha);
        for j in 0..m {
            pi[(i, j)] = soft[j];
        }
    }
    Ok(SoftMap { pi, alpha })
}

/// Least-squares functional map fit with Laplacian-commutativity
/// regularization, solved row-wise in closed form:
/// `C = argmin ||C A1 - A2||_F^2 + reg * sum_pq ((ev2_p - ev1_q) C_pq)^2`.
pub fn solve_fmap(
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    reg: f64,
    evals1: &[f64],
    evals2: &[f64],
) -> Result<FunctionalMap> {
    let k = a1.nrows();
    if a2.nrows() != k || a1.ncols() != a2.ncols() {
        return Err(Error::Dimension(format!(
            "coefficient matrices disagree: {}x{} vs {}x{}",
            a1.nrows(),
            a1.ncols(),
            a2.nrows(),
            a2.ncols()
        )));
    }
    if evals1.len() != k || evals2.len() != k {
        return Err(Error::Dimension("eigenvalue lists must have length k".into()));
    }
    if reg < 0.0 {
        return Err(Error::Argument("regularization weight must be nonnegative".into()));
    }
    let gram = a1 * a1.transpose(); // k x k
    let rhs_all = a2 * a1.transpose(); // row p of C solves against row p here
    let mut c = DMatrix::zeros(k, k);
    for p in 0..k {
        let mut lhs = gram.clone();
        for q in 0..k {
            let diff = evals2[p] - evals1[q];
            lhs[(q, q)] += reg * diff * diff;
        }
        let rhs = rhs_all.row(p).transpose();
        let solved = lhs.lu().solve(&rhs).ok_or_else(|| {
            Error::Singular(
                "normal matrix is rank deficient; use a positive regularization weight".into(),
            )
        })?;
        if solved.iter().any(|v| !v.is_finite()) {
            return Err(Error::Singular(
                "normal matrix is ill conditioned; use a positive regularization weight".into(),
            ));
        }
        for q in 0..k {
            c[(p, q)] = solved[q];
        }
    }
    Ok(FunctionalMap { c })
}

/// Weights combining the spectral losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmapWeights {
    pub bij: f64,
    pub orth: f64,
    pub align: f64,
}

impl Default for FmapWeights {
    fn default() -> Self {
        FmapWeights {
            bij: 1.0,
            orth: 1.0,
            align: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FmapLosses {
    /// `||C12 C21 - I||_F^2`
    pub e_bij: f64,
    /// `||C12 C12^T - I||_F + ||C21 C21^T - I||_F` (unsquared)
    pub e_ortho: f64,
    /// squared-Frobenius alignment residual (used in the combined loss)
    pub e_align_sq: f64,
    /// unsquared alignment residual, reported alongside
    pub e_align: f64,
    /// weighted combination of bij / ortho / align
    pub e_dfm: f64,
}

pub fn fmap_losses(
    c12: &FunctionalMap,
    c21: &FunctionalMap,
    pi12: &SoftMap,
    pi21: &SoftMap,
    basis1: &SpectralBasis,
    basis2: &SpectralBasis,
    weights: FmapWeights,
) -> Result<FmapLosses> {
    let k = c12.c.nrows();
    if c21.c.nrows() != k || basis1.k != k || basis2.k != k {
        return Err(Error::Dimension("functional maps and bases must share k".into()));
    }
    if pi12.pi.nrows() != basis1.n()
        || pi12.pi.ncols() != basis2.n()
        || pi21.pi.nrows() != basis2.n()
        || pi21.pi.ncols() != basis1.n()
    {
        return Err(Error::Dimension("soft map sizes do not match the bases".into()));
    }
    let eye = DMatrix::identity(k, k);
    let e_bij = (&c12.c * &c21.c - &eye).norm().powi(2);
    let e_ortho =
        (&c12.c * c12.c.transpose() - &eye).norm() + (&c21.c * c21.c.transpose() - &eye).norm();

    // Phi^dagger Pi Phi with Phi^dagger = Phi^T M
    let est12 = basis2.project(&(&pi21.pi * &basis1.phi))?; // estimate of C12
    let est21 = basis1.project(&(&pi12.pi * &basis2.phi))?; // estimate of C21
    let r1 = (&c12.c - est12).norm();
    let r2 = (&c21.c - est21).norm();
    let e_align = r1 + r2;
    let e_align_sq = r1 * r1 + r2 * r2;
    let e_dfm = weights.bij * e_bij + weights.orth * e_ortho + weights.align * e_align_sq;
    Ok(FmapLosses {
        e_bij,
        e_ortho,
        e_align_sq,
        e_align,
        e_dfm,
    })
}

/// Single-shape PointInfoNCE value, stabilized by per-row max subtraction.
pub fn nce_loss(f: &FeatureMatrix, g: &FeatureMatrix, gamma: f64) -> Result<f64> {
    if gamma <= 0.0 {
        return Err(Error::Argument(format!("gamma={gamma} must be > 0")));
    }
    if f.n() != g.n() || f.d() != g.d() {
        return Err(Error::Dimension(format!(
            "feature matrices disagree: {}x{} vs {}x{}",
            f.n(),
            f.d(),
            g.n(),
            g.d()
        )));
    }
    let n = f.n();
    let mut loss = 0.0;
    for i in 0..n {
        let mut logits = Vec::with_capacity(n);
        let mut max = f64::NEG_INFINITY;
        for j in 0..n {
            let mut dot = 0.0;
            for k in 0..f.d() {
                dot += f.values[(i, k)] * g.values[(j, k)];
            }
            let l = dot / gamma;
            max = max.max(l);
            logits.push(l);
        }
        let log_denom = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss -= logits[i] - log_denom;
    }
    Ok(loss)
}

/// Spectral nearest-row conversion of a functional map to a vertex map
/// `[n1] -> [n2]`; ties resolve to the smaller target index.
pub fn fmap_to_pointmap(
    c12: &FunctionalMap,
    basis1: &SpectralBasis,
    basis2: &SpectralBasis,
) -> Result<Vec<u32>> {
    let k = c12.c.nrows();
    if basis1.k != k || basis2.k != k {
        return Err(Error::Dimension("bases must match the functional map size".into()));
    }
    let mapped = &basis1.phi * c12.c.transpose(); // n1 x k
    let flat_q: Vec<f64> = {
        let (n, kk) = (mapped.nrows(), mapped.ncols());
        let mut v = Vec::with_capacity(n * kk);
        for i in 0..n {
            for j in 0..kk {
                v.push(mapped[(i, j)]);
            }
        }
        v
    };
    let flat_d: Vec<f64> = {
        let (n, kk) = (basis2.phi.nrows(), basis2.phi.ncols());
        let mut v = Vec::with_capacity(n * kk);
        for i in 0..n {
            for j in 0..kk {
                v.push(basis2.phi[(i, j)]);
            }
        }
        v
    };
    Ok(nearest_rows(&flat_q, &flat_d, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;
    use crate::spectral::{cotan_laplacian, eigenbasis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn basis_for(mesh: &crate::geometry::TriMesh, k: usize) -> SpectralBasis {
        let parts = cotan_laplacian(mesh).unwrap();
        eigenbasis(&parts.stiffness, &parts.mass, k).unwrap()
    }

    fn random_matrix(rng: &mut impl Rng, n: usize, m: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn solve_identity() {
        let eye = DMatrix::identity(4, 4);
        let evals = vec![0.0; 4];
        let c = solve_fmap(&eye, &eye, 0.0, &evals, &evals).unwrap();
        assert!((c.c - DMatrix::identity(4, 4)).norm() < 1e-12);
    }

    #[test]
    fn solve_recovers_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = 5;
        let a1 = random_matrix(&mut rng, k, 9);
        let r = random_matrix(&mut rng, k, k);
        let a2 = &r * &a1;
        let evals = vec![0.0; k];
        let c = solve_fmap(&a1, &a2, 0.0, &evals, &evals).unwrap();
        assert!((c.c - r).norm() < 1e-8);
    }

    #[test]
    fn solve_singular_without_reg() {
        // rank-1 A1 makes the normal matrix singular
        let a1 = DMatrix::from_fn(3, 4, |_, j| j as f64);
        let a2 = a1.clone();
        let evals = vec![0.0; 3];
        let err = solve_fmap(&a1, &a2, 0.0, &evals, &evals);
        assert!(matches!(err, Err(Error::Singular(_))));
        // positive reg makes it solvable
        let evals2 = vec![1.0, 2.0, 3.0];
        assert!(solve_fmap(&a1, &a2, 1e-3, &evals, &evals2).is_ok());
    }

    #[test]
    fn soft_map_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f1 = FeatureMatrix::new(random_matrix(&mut rng, 7, 5), "a").unwrap();
        let f2 = FeatureMatrix::new(random_matrix(&mut rng, 9, 5), "b").unwrap();
        let sm = soft_map(&f1, &f2, 3.0).unwrap();
        for i in 0..7 {
            let s: f64 = (0..9).map(|j| sm.pi[(i, j)]).sum();
            assert!((s - 1.0).abs() < 1e-6);
            for j in 0..9 {
                assert!(sm.pi[(i, j)] >= 0.0 && sm.pi[(i, j)] <= 1.0);
            }
        }
    }

    #[test]
    fn soft_map_hard_limit() {
        // identical feature sets with unit-separated rows and huge alpha
        let f = FeatureMatrix::new(DMatrix::from_fn(5, 2, |i, j| if j == 0 { i as f64 } else { 0.0 }), "s")
            .unwrap();
        let sm = soft_map(&f, &f, 1e4).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((sm.pi[(i, j)] - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn soft_map_translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f1 = random_matrix(&mut rng, 6, 4);
        let f2 = random_matrix(&mut rng, 8, 4);
        let shift = random_matrix(&mut rng, 1, 4);
        let shifted = |m: &DMatrix<f64>| {
            let mut out = m.clone();
            for i in 0..out.nrows() {
                for j in 0..out.ncols() {
                    out[(i, j)] += shift[(0, j)];
                }
            }
            out
        };
        let a = soft_map(
            &FeatureMatrix::new(f1.clone(), "a").unwrap(),
            &FeatureMatrix::new(f2.clone(), "b").unwrap(),
            2.0,
        )
        .unwrap();
        let b = soft_map(
            &FeatureMatrix::new(shifted(&f1), "a").unwrap(),
            &FeatureMatrix::new(shifted(&f2), "b").unwrap(),
            2.0,
        )
        .unwrap();
        assert!((a.pi - b.pi).norm() < 1e-10);
    }

    #[test]
    fn losses_zero_at_identity() {
        let mesh = shapes::octahedron();
        let basis = basis_for(&mesh, 3);
        let eye = FunctionalMap {
            c: DMatrix::identity(3, 3),
        };
        let pi = SoftMap {
            pi: DMatrix::identity(6, 6),
            alpha: 1.0,
        };
        let l = fmap_losses(&eye, &eye, &pi, &pi, &basis, &basis, FmapWeights::default()).unwrap();
        assert!(l.e_bij < 1e-12);
        assert!(l.e_ortho < 1e-6);
    }

    #[test]
    fn losses_forced_arithmetic() {
        // C12 = 2I (k=2), C21 = I: E_bij = ||2I - I||_F^2 = 2,
        // first ortho term ||4I - I||_F = 3*sqrt(2)
        let mesh = shapes::octahedron();
        let basis = basis_for(&mesh, 2);
        let c12 = FunctionalMap {
            c: DMatrix::identity(2, 2) * 2.0,
        };
        let c21 = FunctionalMap {
            c: DMatrix::identity(2, 2),
        };
        let pi = SoftMap {
            pi: DMatrix::identity(6, 6),
            alpha: 1.0,
        };
        let l = fmap_losses(&c12, &c21, &pi, &pi, &basis, &basis, FmapWeights::default()).unwrap();
        assert!((l.e_bij - 2.0).abs() < 1e-12);
        let first_term = (DMatrix::<f64>::identity(2, 2) * 3.0).norm();
        assert!((first_term - 3.0 * 2f64.sqrt()).abs() < 1e-12);
        // e_ortho includes the zero second term
        assert!((l.e_ortho - 3.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn nce_single_point_zero() {
        let f = FeatureMatrix::new(DMatrix::from_row_slice(1, 3, &[1.0, 2.0, 3.0]), "f").unwrap();
        assert_eq!(nce_loss(&f, &f, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn nce_orthonormal_limit() {
        let f = FeatureMatrix::new(DMatrix::identity(4, 4), "f").unwrap();
        let mut prev = f64::INFINITY;
        for gamma in [1.0, 0.5, 0.1, 0.01] {
            let l = nce_loss(&f, &f, gamma).unwrap();
            assert!(l < prev, "loss must decrease as gamma shrinks");
            prev = l;
        }
        assert!(prev < 1e-10);
    }

    #[test]
    fn nce_rejects_bad_gamma() {
        let f = FeatureMatrix::new(DMatrix::identity(2, 2), "f").unwrap();
        assert!(nce_loss(&f, &f, 0.0).is_err());
    }

    #[test]
    fn pointmap_identity() {
        let mesh = shapes::octahedron();
        let basis = basis_for(&mesh, 4);
        let eye = FunctionalMap {
            c: DMatrix::identity(4, 4),
        };
        let t = fmap_to_pointmap(&eye, &basis, &basis).unwrap();
        assert_eq!(t, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn pointmap_permutation() {
        let mesh = shapes::octahedron();
        let basis = basis_for(&mesh, 4);
        // permute rows of Phi2
        let perm = [2usize, 0, 4, 1, 5, 3];
        let mut phi2 = basis.phi.clone();
        let mut mass2 = basis.mass.clone();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for j in 0..4 {
                phi2[(new_row, j)] = basis.phi[(old_row, j)];
            }
            mass2[new_row] = basis.mass[old_row];
        }
        let basis2 = SpectralBasis {
            phi: phi2,
            eigenvalues: basis.eigenvalues.clone(),
            mass: mass2,
            k: 4,
        };
        let eye = FunctionalMap {
            c: DMatrix::identity(4, 4),
        };
        let t = fmap_to_pointmap(&eye, &basis, &basis2).unwrap();
        // T(i) = row of Phi2 equal to row i of Phi1 = position of i in perm
        for (i, ti) in t.iter().enumerate() {
            assert_eq!(perm[*ti as usize], i);
        }
    }

    #[test]
    fn feature_file_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let f = FeatureMatrix::new(random_matrix(&mut rng, 6, 128), "octa").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.dfrf");
        f.save(&p).unwrap();
        let g = FeatureMatrix::load(&p).unwrap();
        assert_eq!(f.values, g.values);
        assert_eq!(g.shape_id, "octa");
    }
}
