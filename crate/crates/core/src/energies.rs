//! Registration energies (correspondence, Chamfer, as-rigid-as-possible)
//! and their analytic gradients with respect to the graph state.

use nalgebra::Vector3;

use crate::defgraph::{rodrigues, rodrigues_jacobian, DeformGraph, GraphState, StateGrad};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::spatial::KdTree3;

/// Weighting factors of the total energy plus the smooth-rotation weight
/// inside the ARAP term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyWeights {
    pub lambda_cd: f64,
    pub lambda_corr: f64,
    pub lambda_arap: f64,
    pub alpha_smooth: f64,
}

impl EnergyWeights {
    /// Stage-I defaults: correspondence-driven with strong rigidity.
    pub fn stage_one() -> Self {
        EnergyWeights {
            lambda_cd: 0.01,
            lambda_corr: 1.0,
            lambda_arap: 20.0,
            alpha_smooth: 0.2,
        }
    }

    /// Stage-II defaults: Chamfer-driven refinement.
    pub fn stage_two() -> Self {
        EnergyWeights {
            lambda_cd: 1.0,
            lambda_corr: 0.01,
            lambda_arap: 1.0,
            alpha_smooth: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_cd, self.lambda_corr, self.lambda_arap];
        if all.iter().any(|&w| w < 0.0 || !w.is_finite()) {
            return Err(Error::Argument("energy weights must be finite and nonnegative".into()));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Argument("at least one energy weight must be positive".into()));
        }
        Ok(())
    }
}

/// Mean squared distance over the filtered correspondence pairs.
/// Returns the value and its gradient with respect to the deformed
/// vertices. An empty pair set contributes zero (the caller decides how
/// to refill it).
pub fn e_corr(
    deformed: &[Vector3<f64>],
    target: &PointCloud,
    pairs: &[(u32, u32)],
) -> Result<(f64, Vec<Vector3<f64>>)> {
    let mut grad = vec![Vector3::zeros(); deformed.len()];
    if pairs.is_empty() {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / pairs.len() as f64;
    let mut value = 0.0;
    for &(i, j) in pairs {
        let v = deformed
            .get(i as usize)
            .ok_or_else(|| Error::Argument(format!("correspondence source index {i} out of range")))?;
        let u = target
            .points
            .get(j as usize)
            .ok_or_else(|| Error::Argument(format!("correspondence target index {j} out of range")))?;
        let diff = v - u;
        value += inv * diff.norm_squared();
        grad[i as usize] += 2.0 * inv * diff;
    }
    Ok((value, grad))
}

/// Symmetric Chamfer distance with sub-gradient through the argmin
/// matches (fixed within one evaluation). Nearest neighbors break ties
/// toward the smaller index.
pub fn e_cd(deformed: &[Vector3<f64>], target: &PointCloud) -> (f64, Vec<Vector3<f64>>) {
    let n = deformed.len();
    let m = target.points.len();
    assert!(n >= 1 && m >= 1);
    let mut grad = vec![Vector3::zeros(); n];
    let mut value = 0.0;

    let target_tree = KdTree3::build(&target.points);
    let inv_n = 1.0 / n as f64;
    for (i, v) in deformed.iter().enumerate() {
        let j = target_tree.nearest(v);
        let diff = v - target.points[j];
        value += inv_n * diff.norm_squared();
        grad[i] += 2.0 * inv_n * diff;
    }

    let source_tree = KdTree3::build(deformed);
    let inv_m = 1.0 / m as f64;
    for u in &target.points {
        let i = source_tree.nearest(u);
        let diff = deformed[i] - u;
        value += inv_m * diff.norm_squared();
        grad[i] += 2.0 * inv_m * diff;
    }
    (value, grad)
}

/// ARAP deviation over directed graph edges:
/// `sum_h sum_{l in psi(h)} ( |d_hl|^2 + alpha |R(theta_h) - R(theta_l)|_F^2 )`
/// with `d_hl = R(theta_h)(g_l - g_h) + delta_h + g_h - (g_l + delta_l)`.
pub fn e_arap(graph: &DeformGraph, state: &GraphState, alpha_smooth: f64) -> (f64, StateGrad) {
    assert_eq!(state.h(), graph.h);
    let rotations: Vec<_> = state.theta.iter().map(rodrigues).collect();
    let jacobians: Vec<_> = state.theta.iter().map(rodrigues_jacobian).collect();
    let mut grad = StateGrad::zeros(graph.h);
    let mut value = 0.0;
    for h in 0..graph.h {
        let g_h = graph.nodes[h];
        for &l in &graph.adjacency[h] {
            let l = l as usize;
            let g_l = graph.nodes[l];
            let rel = g_l - g_h;
            let d = rotations[h] * rel + state.delta[h] + g_h - (g_l + state.delta[l]);
            value += d.norm_squared();
            grad.delta[h] += 2.0 * d;
            grad.delta[l] -= 2.0 * d;
            for a in 0..3 {
                grad.theta[h][a] += 2.0 * d.dot(&(jacobians[h][a] * rel));
            }
            if alpha_smooth != 0.0 {
                let diff = rotations[h] - rotations[l];
                value += alpha_smooth * diff.norm_squared();
                for a in 0..3 {
                    grad.theta[h][a] += 2.0 * alpha_smooth * diff.dot(&jacobians[h][a]);
                    grad.theta[l][a] -= 2.0 * alpha_smooth * diff.dot(&jacobians[l][a]);
                }
            }
        }
    }
    (value, grad)
}

/// Per-term values of the last total-energy evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub total: f64,
    pub cd: f64,
    pub corr: f64,
    pub arap: f64,
}

/// Weighted total energy and its gradient in (theta, delta) space.
/// Vertex-space gradients of the extrinsic terms are chained through the
/// skinning Jacobian.
pub fn e_total(
    graph: &DeformGraph,
    state: &GraphState,
    rest: &[Vector3<f64>],
    target: &PointCloud,
    pairs: &[(u32, u32)],
    weights: &EnergyWeights,
) -> Result<(EnergyBreakdown, StateGrad)> {
    weights.validate()?;
    let deformed = graph.apply(state, rest);
    if deformed.iter().any(|v| !v.iter().all(|c| c.is_finite())) {
        return Err(Error::Numerical(
            "non-finite deformed vertices (diverged state)".into(),
        ));
    }
    let mut vertex_grad = vec![Vector3::zeros(); rest.len()];

    let cd = if weights.lambda_cd != 0.0 {
        let (v, g) = e_cd(&deformed, target);
        for (acc, gi) in vertex_grad.iter_mut().zip(&g) {
            *acc += weights.lambda_cd * gi;
        }
        v
    } else {
        0.0
    };
    let corr = if weights.lambda_corr != 0.0 {
        let (v, g) = e_corr(&deformed, target, pairs)?;
        for (acc, gi) in vertex_grad.iter_mut().zip(&g) {
            *acc += weights.lambda_corr * gi;
        }
        v
    } else {
        0.0
    };

    let mut grad = graph.backprop_vertices(state, rest, &vertex_grad);

    let arap = if weights.lambda_arap != 0.0 {
        let (v, g) = e_arap(graph, state, weights.alpha_smooth);
        grad.add_scaled(&g, weights.lambda_arap);
        v
    } else {
        0.0
    };

    let total = weights.lambda_cd * cd + weights.lambda_corr * corr + weights.lambda_arap * arap;
    if !total.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite total energy: cd={cd} corr={corr} arap={arap}"
        )));
    }
    Ok((
        EnergyBreakdown {
            total,
            cd,
            corr,
            arap,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::defgraph::build_graph;
    use crate::geometry::shapes;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<Vector3<f64>>) -> PointCloud {
        PointCloud::new(points, "target").unwrap()
    }

    #[test]
    fn corr_perfect_match() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0), Vector3::new(1.0, 1.0, 1.0)];
        let t = cloud(pts.clone());
        let (v, g) = e_corr(&pts, &t, &[(0, 0), (1, 1)]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|x| x.norm() == 0.0));
    }

    #[test]
    fn corr_single_pair() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0)];
        let t = cloud(vec![Vector3::new(3.0, 0.0, 0.0)]);
        let (v, _) = e_corr(&pts, &t, &[(0, 0)]).unwrap();
        assert_eq!(v, 9.0);
    }

    #[test]
    fn corr_index_out_of_range() {
        let pts = vec![Vector3::new(0.0, 0.0, 0.0)];
        let t = cloud(vec![Vector3::new(1.0, 0.0, 0.0)]);
        assert!(e_corr(&pts, &t, &[(5, 0)]).is_err());
    }

    #[test]
    fn cd_identical_sets() {
        let pts = shapes::octahedron().vertices;
        let (v, _) = e_cd(&pts, &cloud(pts.clone()));
        assert_eq!(v, 0.0);
    }

    #[test]
    fn cd_single_points() {
        let v = vec![Vector3::new(0.0, 0.0, 0.0)];
        let u = cloud(vec![Vector3::new(1.0, 0.0, 0.0)]);
        let (val, _) = e_cd(&v, &u);
        assert_eq!(val, 2.0);
    }

    #[test]
    fn cd_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let v: Vec<Vector3<f64>> = (0..10)
                .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect();
            let u: Vec<Vector3<f64>> = (0..12)
                .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect();
            let (val, _) = e_cd(&v, &cloud(u.clone()));
            let mut want = 0.0;
            for p in &v {
                want += u.iter().map(|q| (p - q).norm_squared()).fold(f64::INFINITY, f64::min)
                    / v.len() as f64;
            }
            for q in &u {
                want += v.iter().map(|p| (p - q).norm_squared()).fold(f64::INFINITY, f64::min)
                    / u.len() as f64;
            }
            assert!((val - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cd_symmetric_under_swap() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let a: Vec<Vector3<f64>> = (0..8)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let b: Vec<Vector3<f64>> = (0..8)
            .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let (v1, _) = e_cd(&a, &cloud(b.clone()));
        let (v2, _) = e_cd(&b, &cloud(a.clone()));
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn arap_identity_zero() {
        let g = build_graph(&shapes::octahedron(), 6, 2).unwrap();
        let (v, grad) = e_arap(&g, &GraphState::identity(g.h), 0.2);
        assert_eq!(v, 0.0);
        assert!(grad.norm() < 1e-12);
    }

    #[test]
    fn arap_zero_under_global_rigid_motion() {
        let g = build_graph(&shapes::icosphere(1), 20, 4).unwrap();
        let theta = Vector3::new(0.7, -0.3, 0.5);
        let r = rodrigues(&theta);
        let t = Vector3::new(0.2, 1.0, -0.4);
        let mut state = GraphState::identity(g.h);
        for h in 0..g.h {
            state.theta[h] = theta;
            state.delta[h] = r * g.nodes[h] + t - g.nodes[h];
        }
        let (v, _) = e_arap(&g, &state, 0.2);
        assert!(v < 1e-10, "E_arap = {v}");
    }

    #[test]
    fn arap_permutation_invariant() {
        let g = build_graph(&shapes::unit_cube(), 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mut state = GraphState::identity(g.h);
        for h in 0..g.h {
            state.theta[h] = Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.1);
            state.delta[h] = Vector3::new(rng.gen_range(-0.5..0.5), 0.0, rng.gen_range(-0.5..0.5));
        }
        let (v, _) = e_arap(&g, &state, 0.2);

        // permute the node labels
        let perm: Vec<usize> = vec![2, 0, 3, 1];
        let mut inv = vec![0usize; 4];
        for (new, &old) in perm.iter().enumerate() {
            inv[old] = new;
        }
        let g2 = DeformGraph {
            nodes: perm.iter().map(|&o| g.nodes[o]).collect(),
            adjacency: perm
                .iter()
                .map(|&o| {
                    let mut l: Vec<u32> = g.adjacency[o].iter().map(|&x| inv[x as usize] as u32).collect();
                    l.sort_unstable();
                    l
                })
                .collect(),
            skin_indices: g.skin_indices.iter().map(|&x| inv[x as usize] as u32).collect(),
            skin_weights: g.skin_weights.clone(),
            h: g.h,
            k: g.k,
            n: g.n,
        };
        let state2 = GraphState {
            theta: perm.iter().map(|&o| state.theta[o]).collect(),
            delta: perm.iter().map(|&o| state.delta[o]).collect(),
        };
        let (v2, _) = e_arap(&g2, &state2, 0.2);
        assert!((v - v2).abs() < 1e-10);
    }

    fn finite_difference_check(
        graph: &DeformGraph,
        state: &GraphState,
        rest: &[Vector3<f64>],
        target: &PointCloud,
        pairs: &[(u32, u32)],
        weights: &EnergyWeights,
        rel_tol: f64,
    ) {
        let (_, grad) = e_total(graph, state, rest, target, pairs, weights).unwrap();
        let h = 1e-6;
        let mut flat = state.to_flat();
        let grad_flat = {
            let mut g = Vec::with_capacity(flat.len());
            for i in 0..graph.h {
                g.extend_from_slice(grad.theta[i].as_slice());
                g.extend_from_slice(grad.delta[i].as_slice());
            }
            g
        };
        let scale = grad_flat.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-8);
        for p in 0..flat.len() {
            let orig = flat[p];
            flat[p] = orig + h;
            let sp = GraphState::from_flat(&flat);
            let (ep, _) = e_total(graph, &sp, rest, target, pairs, weights).unwrap();
            flat[p] = orig - h;
            let sm = GraphState::from_flat(&flat);
            let (em, _) = e_total(graph, &sm, rest, target, pairs, weights).unwrap();
            flat[p] = orig;
            let fd = (ep.total - em.total) / (2.0 * h);
            let err = (grad_flat[p] - fd).abs() / scale.max(fd.abs());
            assert!(err < rel_tol, "param {p}: analytic {} vs fd {fd}", grad_flat[p]);
        }
    }

    #[test]
    fn corr_gradient_matches_finite_differences() {
        let mesh = shapes::octahedron();
        let graph = build_graph(&mesh, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let mut state = GraphState::identity(graph.h);
        for h in 0..graph.h {
            state.theta[h] = Vector3::new(rng.gen_range(-0.4..0.4), rng.gen_range(-0.4..0.4), 0.0);
            state.delta[h] = Vector3::new(rng.gen_range(-0.3..0.3), 0.1, rng.gen_range(-0.3..0.3));
        }
        let target = cloud(
            (0..5)
                .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect(),
        );
        let pairs: Vec<(u32, u32)> = vec![(0, 0), (1, 2), (3, 4), (4, 1), (5, 3)];
        let weights = EnergyWeights {
            lambda_cd: 0.0,
            lambda_corr: 1.0,
            lambda_arap: 0.0,
            alpha_smooth: 0.2,
        };
        finite_difference_check(&graph, &state, &mesh.vertices, &target, &pairs, &weights, 1e-4);
    }

    #[test]
    fn arap_gradient_matches_finite_differences() {
        let mesh = shapes::unit_cube();
        let graph = build_graph(&mesh, 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(52);
        let mut state = GraphState::identity(graph.h);
        for h in 0..graph.h {
            state.theta[h] = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
            state.delta[h] = Vector3::new(
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
            );
        }
        let target = cloud(mesh.vertices.clone());
        let weights = EnergyWeights {
            lambda_cd: 0.0,
            lambda_corr: 0.0,
            lambda_arap: 1.0,
            alpha_smooth: 0.2,
        };
        finite_difference_check(&graph, &state, &mesh.vertices, &target, &[], &weights, 1e-4);
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let mesh = shapes::octahedron();
        let graph = build_graph(&mesh, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let mut state = GraphState::identity(graph.h);
        for h in 0..graph.h {
            state.theta[h] = Vector3::new(rng.gen_range(-0.3..0.3), 0.1, rng.gen_range(-0.3..0.3));
            state.delta[h] = Vector3::new(0.05, rng.gen_range(-0.2..0.2), 0.0);
        }
        let target = cloud(
            (0..7)
                .map(|_| Vector3::new(rng.gen::<f64>() * 2.0 - 1.0, rng.gen(), rng.gen()))
                .collect(),
        );
        let pairs = vec![(0u32, 1u32), (2, 3), (5, 6)];
        // Chamfer argmin assignments can flip under perturbation; keep the
        // weights modest so the sub-gradient check stays within tolerance.
        let weights = EnergyWeights {
            lambda_cd: 0.01,
            lambda_corr: 1.0,
            lambda_arap: 20.0,
            alpha_smooth: 0.2,
        };
        finite_difference_check(&graph, &state, &mesh.vertices, &target, &pairs, &weights, 1e-3);
    }

    #[test]
    fn total_zero_at_global_optimum() {
        let mesh = shapes::octahedron();
        let graph = build_graph(&mesh, 6, 2).unwrap();
        let target = cloud(mesh.vertices.clone());
        let pairs: Vec<(u32, u32)> = (0..6).map(|i| (i, i)).collect();
        let (b, grad) = e_total(
            &graph,
            &GraphState::identity(graph.h),
            &mesh.vertices,
            &target,
            &pairs,
            &EnergyWeights::stage_one(),
        )
        .unwrap();
        assert!(b.total < 1e-12);
        assert!(grad.norm() < 1e-10);
    }

    #[test]
    fn weights_arap_only_equals_arap() {
        let mesh = shapes::unit_cube();
        let graph = build_graph(&mesh, 4, 2).unwrap();
        let mut state = GraphState::identity(graph.h);
        state.theta[0] = Vector3::new(0.3, 0.0, -0.2);
        state.delta[2] = Vector3::new(0.1, 0.4, 0.0);
        let target = cloud(mesh.vertices.clone());
        let weights = EnergyWeights {
            lambda_cd: 0.0,
            lambda_corr: 0.0,
            lambda_arap: 1.0,
            alpha_smooth: 0.2,
        };
        let (b, _) = e_total(&graph, &state, &mesh.vertices, &target, &[], &weights).unwrap();
        let (arap, _) = e_arap(&graph, &state, 0.2);
        assert_eq!(b.total, arap);
    }

    #[test]
    fn weights_homogeneous_degree_one() {
        let mesh = shapes::octahedron();
        let graph = build_graph(&mesh, 4, 2).unwrap();
        let mut state = GraphState::identity(graph.h);
        state.theta[1] = Vector3::new(0.2, -0.1, 0.3);
        state.delta[0] = Vector3::new(0.3, 0.0, -0.1);
        let target = cloud(mesh.vertices.clone());
        let pairs = vec![(0u32, 0u32), (1, 1)];
        let w1 = EnergyWeights::stage_one();
        let w3 = EnergyWeights {
            lambda_cd: 3.0 * w1.lambda_cd,
            lambda_corr: 3.0 * w1.lambda_corr,
            lambda_arap: 3.0 * w1.lambda_arap,
            alpha_smooth: w1.alpha_smooth,
        };
        let (b1, _) = e_total(&graph, &state, &mesh.vertices, &target, &pairs, &w1).unwrap();
        let (b3, _) = e_total(&graph, &state, &mesh.vertices, &target, &pairs, &w3).unwrap();
        assert!((b3.total - 3.0 * b1.total).abs() < 1e-10 * b1.total.max(1.0));
    }
}
