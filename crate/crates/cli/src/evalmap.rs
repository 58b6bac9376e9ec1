//! Map composition through the template hub and the geodesic evaluation
//! metric.

use dfr_core::geometry::GeodesicMatrix;
use dfr_core::{Error, Result};

/// Composes two hard maps: `T_12(i) = T_s2(T_1s(i))`.
pub fn compose_maps(t_1s: &[u32], t_s2: &[u32]) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(t_1s.len());
    for (i, &s) in t_1s.iter().enumerate() {
        let img = t_s2.get(s as usize).ok_or_else(|| {
            Error::Dimension(format!(
                "map composition: index {s} (image of {i}) outside second map of length {}",
                t_s2.len()
            ))
        })?;
        out.push(*img);
    }
    Ok(out)
}

/// Mean geodesic error of a predicted map against ground-truth pairs,
/// normalized by the square root of the target surface area. Pairs whose
/// distance is the disconnected sentinel are excluded and counted.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodesicErrorReport {
    pub mean: f64,
    pub evaluated: usize,
    pub excluded: usize,
}

pub fn geodesic_error(
    pred: &[u32],
    gt: &[(u32, u32)],
    geo_target: &GeodesicMatrix,
    area: f64,
) -> Result<GeodesicErrorReport> {
    if !(area > 0.0) {
        return Err(Error::Argument("target surface area must be positive".into()));
    }
    let norm = area.sqrt();
    let mut sum = 0.0;
    let mut evaluated = 0usize;
    let mut excluded = 0usize;
    for &(i, j) in gt {
        let p = *pred.get(i as usize).ok_or_else(|| {
            Error::Dimension(format!(
                "ground-truth index {i} outside predicted map of length {}",
                pred.len()
            ))
        })?;
        let d = geo_target.get(p as usize, j as usize);
        if d.is_finite() {
            sum += d as f64 / norm;
            evaluated += 1;
        } else {
            excluded += 1;
        }
    }
    if evaluated == 0 {
        return Err(Error::Argument(
            "no evaluable ground-truth pairs (all disconnected or empty)".into(),
        ));
    }
    Ok(GeodesicErrorReport {
        mean: sum / evaluated as f64,
        evaluated,
        excluded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dfr_core::geometry::shapes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn compose_identity() {
        let id: Vec<u32> = (0..5).collect();
        assert_eq!(compose_maps(&id, &id).unwrap(), id);
    }

    #[test]
    fn compose_permutation_with_inverse() {
        let p = vec![2u32, 0, 3, 1];
        let mut inv = vec![0u32; 4];
        for (i, &v) in p.iter().enumerate() {
            inv[v as usize] = i as u32;
        }
        assert_eq!(compose_maps(&p, &inv).unwrap(), (0..4).collect::<Vec<u32>>());
    }

    #[test]
    fn compose_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        for _ in 0..20 {
            let a: Vec<u32> = (0..7).map(|_| rng.gen_range(0..7)).collect();
            let b: Vec<u32> = (0..7).map(|_| rng.gen_range(0..7)).collect();
            let got = compose_maps(&a, &b).unwrap();
            for i in 0..7 {
                assert_eq!(got[i], b[a[i] as usize]);
            }
        }
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let a: Vec<u32> = (0..9).map(|_| rng.gen_range(0..9)).collect();
        let b: Vec<u32> = (0..9).map(|_| rng.gen_range(0..9)).collect();
        let c: Vec<u32> = (0..9).map(|_| rng.gen_range(0..9)).collect();
        let left = compose_maps(&compose_maps(&a, &b).unwrap(), &c).unwrap();
        let right = compose_maps(&a, &compose_maps(&b, &c).unwrap()).unwrap();
        assert_eq!(left, right);
    }

    #[test]
    fn compose_out_of_range() {
        assert!(compose_maps(&[5], &[0, 1]).is_err());
    }

    #[test]
    fn error_zero_for_exact_map() {
        let mesh = shapes::grid(4, 4);
        let geo = GeodesicMatrix::compute(&mesh);
        let n = mesh.vertices.len() as u32;
        let pred: Vec<u32> = (0..n).collect();
        let gt: Vec<(u32, u32)> = (0..n).map(|i| (i, i)).collect();
        let r = geodesic_error(&pred, &gt, &geo, mesh.surface_area()).unwrap();
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.evaluated, n as usize);
        assert_eq!(r.excluded, 0);
    }

    #[test]
    fn error_one_edge_off_on_path() {
        let mesh = shapes::path_mesh(4);
        let geo = GeodesicMatrix::compute(&mesh);
        let area = mesh.surface_area();
        // predict vertex 1 where the truth is vertex 2: one unit edge away
        let pred: Vec<u32> = (0..mesh.vertices.len() as u32).collect();
        let r = geodesic_error(&pred, &[(1, 2)], &geo, area).unwrap();
        assert!((r.mean - 1.0 / area.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn error_matches_direct_summation() {
        let mesh = shapes::grid(5, 5);
        let geo = GeodesicMatrix::compute(&mesh);
        let area = mesh.surface_area();
        let n = mesh.vertices.len();
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        for _ in 0..10 {
            let pred: Vec<u32> = (0..n).map(|_| rng.gen_range(0..n as u32)).collect();
            let gt: Vec<(u32, u32)> = (0..n)
                .map(|i| (i as u32, rng.gen_range(0..n as u32)))
                .collect();
            let r = geodesic_error(&pred, &gt, &geo, area).unwrap();
            let want: f64 = gt
                .iter()
                .map(|&(i, j)| geo.get(pred[i as usize] as usize, j as usize) as f64)
                .sum::<f64>()
                / (n as f64 * area.sqrt());
            assert!((r.mean - want).abs() < 1e-12);
        }
    }

    #[test]
    fn error_scale_invariant() {
        let mesh = shapes::grid(4, 4);
        let geo = GeodesicMatrix::compute(&mesh);
        let mut scaled = mesh.clone();
        for v in &mut scaled.vertices {
            *v *= 3.0;
        }
        let geo_s = GeodesicMatrix::compute(&scaled);
        let n = mesh.vertices.len();
        let mut rng = ChaCha8Rng::seed_from_u64(73);
        let pred: Vec<u32> = (0..n).map(|_| rng.gen_range(0..n as u32)).collect();
        let gt: Vec<(u32, u32)> = (0..n)
            .map(|i| (i as u32, rng.gen_range(0..n as u32)))
            .collect();
        let a = geodesic_error(&pred, &gt, &geo, mesh.surface_area()).unwrap();
        let b = geodesic_error(&pred, &gt, &geo_s, scaled.surface_area()).unwrap();
        // distances are stored in f32, so invariance holds to ~1e-7 relative
        assert!((a.mean - b.mean).abs() < 1e-5 * a.mean.max(1.0));
    }

    #[test]
    fn disconnected_pairs_are_excluded() {
        // two far-apart octahedra: cross-component distances are infinite
        let a = shapes::octahedron();
        let mut vertices = a.vertices.clone();
        let mut faces = a.faces.clone();
        let off = vertices.len() as u32;
        for v in &a.vertices {
            vertices.push(v + nalgebra::Vector3::new(10.0, 0.0, 0.0));
        }
        for f in &a.faces {
            faces.push([f[0] + off, f[1] + off, f[2] + off]);
        }
        let mesh = dfr_core::geometry::TriMesh::new(vertices, faces, "pair").unwrap();
        let geo = GeodesicMatrix::compute(&mesh);
        let pred: Vec<u32> = (0..12).collect();
        let gt = vec![(0u32, 1u32), (0, 6)]; // second pair crosses components
        let r = geodesic_error(&pred, &gt, &geo, mesh.surface_area()).unwrap();
        assert_eq!(r.evaluated, 1);
        assert_eq!(r.excluded, 1);
    }
}
