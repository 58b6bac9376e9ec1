//! Two-stage non-rigid registration: feature-guided coarse alignment
//! followed by coordinate-driven refinement, with periodically refreshed
//! and bijectivity-filtered correspondences.

use std::io::Write as _;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::Vector3;

use crate::defgraph::{build_graph, DeformGraph, GraphState};
use crate::energies::{e_total, EnergyWeights};
use crate::error::{Error, Result};
use crate::fmaps::FeatureMatrix;
use crate::geometry::{io, GeodesicMatrix, PointCloud, TriMesh};
use crate::spatial::{nearest_indices, nearest_rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn index(self) -> u8 {
        match self {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

/// Where the current hard maps came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Feature,
    Coordinate,
}

/// A filtered correspondence set together with the hard maps it was
/// drawn from.
#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    /// retained (source vertex, target point) pairs
    pub pairs: Vec<(u32, u32)>,
    pub pi_st: Vec<u32>,
    pub pi_ts: Vec<u32>,
    pub provenance: Provenance,
    /// iteration at which this set was built
    pub iteration: usize,
}

/// Adam step parameters; `line_search` enables monotone backtracking on
/// top of the Adam direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerParams {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub line_search: bool,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        OptimizerParams {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            line_search: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationConfig {
    pub stage_one_weights: EnergyWeights,
    pub stage_two_weights: EnergyWeights,
    /// correspondence refresh period in iterations
    pub update_interval: usize,
    pub eps_stage_one: f64,
    pub eps_stage_two: f64,
    /// consecutive small-decrease iterations required to stop
    pub patience: usize,
    /// iteration cap per stage
    pub max_iterations: usize,
    /// filter threshold as a fraction of sqrt(surface area)
    pub tau: f64,
    /// deformation node count; `None` means floor(N/2)
    pub graph_nodes: Option<usize>,
    /// skinning neighbors per vertex
    pub graph_neighbors: usize,
    pub optimizer: OptimizerParams,
    /// optional command re-extracting features from the deforming source;
    /// `{mesh}` and `{out}` are replaced by an OFF path and the expected
    /// feature-file path
    pub feature_command: Option<String>,
}

impl Default for RegistrationConfig {
    fn default() -> Self {
        RegistrationConfig {
            stage_one_weights: EnergyWeights::stage_one(),
            stage_two_weights: EnergyWeights::stage_two(),
            update_interval: 100,
            eps_stage_one: 1e-8,
            eps_stage_two: 1e-7,
            patience: 15,
            max_iterations: 5000,
            tau: 0.05,
            graph_nodes: None,
            graph_neighbors: 4,
            optimizer: OptimizerParams::default(),
            feature_command: None,
        }
    }
}

impl RegistrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.update_interval < 1 {
            return Err(Error::Argument("update_interval must be >= 1".into()));
        }
        if !(self.eps_stage_one > 0.0) || !(self.eps_stage_two > 0.0) {
            return Err(Error::Argument("eps must be positive".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Argument("tau must be positive".into()));
        }
        if self.max_iterations < 1 {
            return Err(Error::Argument("max_iterations must be >= 1".into()));
        }
        if self.graph_neighbors < 1 {
            return Err(Error::Argument("graph_neighbors must be >= 1".into()));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Argument("learning_rate must be positive".into()));
        }
        self.stage_one_weights.validate()?;
        self.stage_two_weights.validate()
    }
}

/// One row of the energy trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub stage: u8,
    pub e_total: f64,
    pub e_cd: f64,
    pub e_corr: f64,
    pub e_arap: f64,
    pub corr_len: usize,
}

/// Hard nearest-neighbor maps in both directions. Stage-I matches in
/// feature space, Stage-II in coordinate space. Ties break toward the
/// smaller index.
pub fn update_correspondences(
    deformed: &[Vector3<f64>],
    target: &PointCloud,
    features_s: Option<&FeatureMatrix>,
    features_t: Option<&FeatureMatrix>,
    stage: Stage,
) -> Result<(Vec<u32>, Vec<u32>)> {
    match stage {
        Stage::One => {
            let (fs, ft) = match (features_s, features_t) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    return Err(Error::Argument(
                        "stage one requires feature matrices for both shapes".into(),
                    ))
                }
            };
            if fs.n() != deformed.len() {
                return Err(Error::Dimension(format!(
                    "source features have {} rows for {} vertices",
                    fs.n(),
                    deformed.len()
                )));
            }
            if ft.n() != target.points.len() {
                return Err(Error::Dimension(format!(
                    "target features have {} rows for {} points",
                    ft.n(),
                    target.points.len()
                )));
            }
            if fs.d() != ft.d() {
                return Err(Error::Dimension(format!(
                    "feature widths differ: {} vs {}",
                    fs.d(),
                    ft.d()
                )));
            }
            let a = fs.row_flat();
            let b = ft.row_flat();
            Ok((nearest_rows(&a, &b, fs.d()), nearest_rows(&b, &a, fs.d())))
        }
        Stage::Two => Ok((
            nearest_indices(deformed, &target.points),
            nearest_indices(&target.points, deformed),
        )),
    }
}

/// Keeps (i, pi_st[i]) iff the round trip through the target lands
/// within `tau_abs` geodesic distance of i on the rest-pose source.
pub fn bijectivity_filter(
    pi_st: &[u32],
    pi_ts: &[u32],
    geo: &GeodesicMatrix,
    tau_abs: f64,
) -> Vec<(u32, u32)> {
    let mut pairs = Vec::new();
    for (i, &j) in pi_st.iter().enumerate() {
        let back = pi_ts[j as usize] as usize;
        let d = geo.get(i, back) as f64;
        if d <= tau_abs {
            pairs.push((i as u32, j));
        }
    }
    pairs
}

/// Per-stage outcome summary.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageReport {
    pub iterations: usize,
    pub seconds: f64,
    pub converged: bool,
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(n: usize) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Returns the (unscaled) descent direction for the current gradient.
    fn direction(&mut self, grad: &[f64], p: &OptimizerParams) -> Vec<f64> {
        self.t += 1;
        let b1t = 1.0 - p.beta1.powi(self.t as i32);
        let b2t = 1.0 - p.beta2.powi(self.t as i32);
        grad.iter()
            .enumerate()
            .map(|(i, &g)| {
                self.m[i] = p.beta1 * self.m[i] + (1.0 - p.beta1) * g;
                self.v[i] = p.beta2 * self.v[i] + (1.0 - p.beta2) * g * g;
                (self.m[i] / b1t) / ((self.v[i] / b2t).sqrt() + p.epsilon)
            })
            .collect()
    }
}

/// Runs one optimization stage to convergence (or the iteration cap).
/// `corr_provider` is called with the current deformed vertices whenever
/// the correspondence set is due for a refresh. Appends to `trace` and
/// returns the report; `iter_base` offsets the global iteration counter
/// in the trace.
#[allow(clippy::too_many_arguments)]
pub fn optimize_stage(
    state: &mut GraphState,
    graph: &DeformGraph,
    rest: &[Vector3<f64>],
    target: &PointCloud,
    mut corr_provider: impl FnMut(&[Vector3<f64>], usize) -> Result<CorrespondenceSet>,
    weights: &EnergyWeights,
    eps: f64,
    patience: usize,
    interval: usize,
    optimizer: &OptimizerParams,
    max_iterations: usize,
    stage: Stage,
    iter_base: usize,
    trace: &mut Vec<TraceRecord>,
) -> Result<StageReport> {
    let start = Instant::now();
    let mut adam = Adam::new(6 * graph.h);
    let mut corr: Option<CorrespondenceSet> = None;
    let mut prev_energy = f64::INFINITY;
    let mut small_count = 0usize;
    let mut converged = false;
    let mut iterations = 0usize;

    for local in 0..max_iterations {
        if local % interval == 0 || corr.is_none() {
            let deformed = graph.apply(state, rest);
            corr = Some(corr_provider(&deformed, iter_base + local)?);
        }
        let pairs = &corr.as_ref().unwrap().pairs;

        let (breakdown, grad) = e_total(graph, state, rest, target, pairs, weights)
            .map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!(
                    "{msg} at iteration {} (stage {}); max |theta| = {:.3e}, max |delta| = {:.3e}",
                    iter_base + local,
                    stage.index(),
                    state.theta.iter().map(|t| t.norm()).fold(0.0, f64::max),
                    state.delta.iter().map(|d| d.norm()).fold(0.0, f64::max),
                )),
                other => other,
            })?;
        trace.push(TraceRecord {
            iter: iter_base + local,
            stage: stage.index(),
            e_total: breakdown.total,
            e_cd: breakdown.cd,
            e_corr: breakdown.corr,
            e_arap: breakdown.arap,
            corr_len: pairs.len(),
        });
        iterations = local + 1;

        if prev_energy - breakdown.total < eps {
            small_count += 1;
            if small_count > patience {
                converged = true;
                break;
            }
        } else {
            small_count = 0;
        }
        prev_energy = breakdown.total;

        let mut flat = state.to_flat();
        let mut grad_flat = Vec::with_capacity(flat.len());
        for h in 0..graph.h {
            grad_flat.extend_from_slice(grad.theta[h].as_slice());
            grad_flat.extend_from_slice(grad.delta[h].as_slice());
        }
        // Adam normalizes away gradient magnitude, so a numerically zero
        // gradient must not produce a unit-scale step away from the optimum
        if grad_flat.iter().all(|g| g.abs() <= 1e-12) {
            continue;
        }
        let dir = adam.direction(&grad_flat, optimizer);
        let mut step = optimizer.learning_rate;
        if optimizer.line_search {
            let mut accepted = false;
            for _ in 0..20 {
                let cand: Vec<f64> = flat
                    .iter()
                    .zip(&dir)
                    .map(|(x, d)| x - step * d)
                    .collect();
                let cand_state = GraphState::from_flat(&cand);
                let (b, _) = e_total(graph, &cand_state, rest, target, pairs, weights)?;
                if b.total <= breakdown.total {
                    flat = cand;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                // stuck at a (local) minimum along the Adam direction
                continue;
            }
        } else {
            for (x, d) in flat.iter_mut().zip(&dir) {
                *x -= step * d;
            }
        }
        *state = GraphState::from_flat(&flat);
        state.wrap_angles();
    }

    Ok(StageReport {
        iterations,
        seconds: start.elapsed().as_secs_f64(),
        converged,
    })
}

/// Everything produced by one registration run.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    pub state: GraphState,
    pub deformed: TriMesh,
    pub pi_st: Vec<u32>,
    pub pi_ts: Vec<u32>,
    pub trace: Vec<TraceRecord>,
    pub warnings: Vec<String>,
    pub stage_one: Option<StageReport>,
    pub stage_two: StageReport,
}

fn refresh_features(
    command: &str,
    deformed: &[Vector3<f64>],
    faces: &[[u32; 3]],
    name: &str,
) -> Result<FeatureMatrix> {
    let dir = std::env::temp_dir().join(format!("dfr-feat-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mesh_path = dir.join(format!("{name}.off"));
    let out_path = dir.join(format!("{name}.dfrf"));
    io::save_shape(&mesh_path, deformed, faces)?;
    let cmd = command
        .replace("{mesh}", &mesh_path.to_string_lossy())
        .replace("{out}", &out_path.to_string_lossy());
    let status = Command::new("sh")
        .arg("-c")
        .arg(&cmd)
        .status()
        .map_err(|e| Error::External(format!("feature command failed to start: {e}")))?;
    if !status.success() {
        return Err(Error::External(format!(
            "feature command exited with {status}: {cmd}"
        )));
    }
    FeatureMatrix::load(&out_path)
}

/// Full two-stage registration of a source mesh onto a target cloud.
/// Stage-I needs feature matrices for both shapes; without them it is
/// skipped with a warning and the run degrades to coordinate-only
/// refinement.
pub fn register(
    source: &TriMesh,
    target: &PointCloud,
    features: Option<(&FeatureMatrix, &FeatureMatrix)>,
    config: &RegistrationConfig,
) -> Result<RegistrationResult> {
    config.validate()?;
    if target.points.is_empty() {
        return Err(Error::Argument("target cloud is empty".into()));
    }
    let n = source.vertices.len();
    let h = config.graph_nodes.unwrap_or((n / 2).max(4)).min(n);
    let graph = build_graph(source, h, config.graph_neighbors)?;
    let geo = GeodesicMatrix::compute(source);
    let tau_abs = config.tau * source.surface_area().sqrt();

    let mut state = GraphState::identity(graph.h);
    let mut trace = Vec::new();
    let mut warnings = Vec::new();

    let rest = &source.vertices;
    let mut stage_one = None;

    if let Some((fs, ft)) = features {
        let mut current_fs = fs.clone();
        let mut warn_empty = false;
        let mut warn_feature_cmd: Option<String> = None;
        let report = optimize_stage(
            &mut state,
            &graph,
            rest,
            target,
            |deformed, iteration| {
                if let Some(cmd) = &config.feature_command {
                    match refresh_features(cmd, deformed, &source.faces, &source.name) {
                        Ok(f) if f.n() == n && f.d() == ft.d() => current_fs = f,
                        Ok(f) => {
                            warn_feature_cmd = Some(format!(
                                "feature command produced {}x{} matrix, expected {}x{}; reusing previous features",
                                f.n(),
                                f.d(),
                                n,
                                ft.d()
                            ));
                        }
                        Err(e) => warn_feature_cmd = Some(e.to_string()),
                    }
                }
                let (pi_st, pi_ts) = update_correspondences(
                    deformed,
                    target,
                    Some(&current_fs),
                    Some(ft),
                    Stage::One,
                )?;
                let mut pairs = bijectivity_filter(&pi_st, &pi_ts, &geo, tau_abs);
                if pairs.is_empty() {
                    warn_empty = true;
                    pairs = pi_st.iter().enumerate().map(|(i, &j)| (i as u32, j)).collect();
                }
                Ok(CorrespondenceSet {
                    pairs,
                    pi_st,
                    pi_ts,
                    provenance: Provenance::Feature,
                    iteration,
                })
            },
            &config.stage_one_weights,
            config.eps_stage_one,
            config.patience,
            config.update_interval,
            &config.optimizer,
            config.max_iterations,
            Stage::One,
            0,
            &mut trace,
        )?;
        if warn_empty {
            warnings.push(
                "bijectivity filter rejected every pair; fell back to unfiltered matches".into(),
            );
        }
        if let Some(w) = warn_feature_cmd {
            warnings.push(w);
        }
        stage_one = Some(report);
    } else {
        warnings.push("no features supplied; skipping stage one (coordinate-only registration)".into());
    }

    let iter_base = trace.len();
    let mut warn_empty = false;
    let stage_two = optimize_stage(
        &mut state,
        &graph,
        rest,
        target,
        |deformed, iteration| {
            let (pi_st, pi_ts) =
                update_correspondences(deformed, target, None, None, Stage::Two)?;
            let mut pairs = bijectivity_filter(&pi_st, &pi_ts, &geo, tau_abs);
            if pairs.is_empty() {
                warn_empty = true;
                pairs = pi_st.iter().enumerate().map(|(i, &j)| (i as u32, j)).collect();
            }
            Ok(CorrespondenceSet {
                pairs,
                pi_st,
                pi_ts,
                provenance: Provenance::Coordinate,
                iteration,
            })
        },
        &config.stage_two_weights,
        config.eps_stage_two,
        config.patience,
        config.update_interval,
        &config.optimizer,
        config.max_iterations,
        Stage::Two,
        iter_base,
        &mut trace,
    )?;
    if warn_empty {
        warnings.push(
            "bijectivity filter rejected every pair in stage two; fell back to unfiltered matches"
                .into(),
        );
    }

    let deformed_vertices = graph.apply(&state, rest);
    let pi_st = nearest_indices(&deformed_vertices, &target.points);
    let pi_ts = nearest_indices(&target.points, &deformed_vertices);
    let deformed = TriMesh::new(
        deformed_vertices,
        source.faces.clone(),
        format!("{}_registered", source.name),
    )?;

    Ok(RegistrationResult {
        state,
        deformed,
        pi_st,
        pi_ts,
        trace,
        warnings,
        stage_one,
        stage_two,
    })
}

/// Writes the trace as CSV with one row per iteration.
pub fn write_trace_csv(path: &Path, trace: &[TraceRecord]) -> Result<()> {
    let mut out = String::from("iter,stage,E_total,E_cd,E_corr,E_arap,|C|\n");
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.iter, r.stage, r.e_total, r.e_cd, r.e_corr, r.e_arap, r.corr_len
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes a hard map as "i j" lines under a provenance header.
pub fn write_correspondences(
    path: &Path,
    source_name: &str,
    target_name: &str,
    pi_st: &[u32],
) -> Result<()> {
    let mut out = format!("# source={source_name} target={target_name} stage=final\n");
    for (i, &j) in pi_st.iter().enumerate() {
        out.push_str(&format!("{i} {j}\n"));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads a map written by [`write_correspondences`] (or sparse ground
/// truth in the same format). Comment lines start with `#`.
pub fn read_correspondences(path: &Path) -> Result<Vec<(u32, u32)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut it = line.split_whitespace();
        let parse = |tok: Option<&str>| -> Result<u32> {
            tok.ok_or_else(|| Error::parse(path, lineno + 1, "expected two indices"))?
                .parse()
                .map_err(|_| Error::parse(path, lineno + 1, "invalid index"))
        };
        let i = parse(it.next())?;
        let j = parse(it.next())?;
        if it.next().is_some() {
            return Err(Error::parse(path, lineno + 1, "expected exactly two indices"));
        }
        pairs.push((i, j));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::shapes;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(points: Vec<Vector3<f64>>) -> PointCloud {
        PointCloud::new(points, "target").unwrap()
    }

    #[test]
    fn stage_two_identity_maps() {
        let mesh = shapes::octahedron();
        let t = cloud(mesh.vertices.clone());
        let (st, ts) =
            update_correspondences(&mesh.vertices, &t, None, None, Stage::Two).unwrap();
        assert_eq!(st, (0..6).collect::<Vec<u32>>());
        assert_eq!(ts, (0..6).collect::<Vec<u32>>());
    }

    #[test]
    fn stage_one_recovers_permutation() {
        let n = 8;
        let d = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(60);
        let fs = DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>());
        let perm: Vec<usize> = vec![3, 1, 7, 0, 5, 2, 6, 4];
        let ft = DMatrix::from_fn(n, d, |i, j| fs[(perm[i], j)]);
        let fs = FeatureMatrix::new(fs, "s").unwrap();
        let ft = FeatureMatrix::new(ft, "t").unwrap();
        let pts = vec![Vector3::zeros(); n];
        let t = cloud(pts.clone());
        let (st, _) =
            update_correspondences(&pts, &t, Some(&fs), Some(&ft), Stage::One).unwrap();
        // ft row i equals fs row perm[i], so fs row k maps to the i with perm[i] = k
        for (k, &img) in st.iter().enumerate() {
            assert_eq!(perm[img as usize], k);
        }
    }

    #[test]
    fn stage_one_without_features_errors() {
        let mesh = shapes::octahedron();
        let t = cloud(mesh.vertices.clone());
        assert!(update_correspondences(&mesh.vertices, &t, None, None, Stage::One).is_err());
    }

    #[test]
    fn correspondences_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(61);
        for _ in 0..5 {
            let v: Vec<Vector3<f64>> = (0..20)
                .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect();
            let u: Vec<Vector3<f64>> = (0..17)
                .map(|_| Vector3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect();
            let t = cloud(u.clone());
            let (st, ts) = update_correspondences(&v, &t, None, None, Stage::Two).unwrap();
            for (i, &j) in st.iter().enumerate() {
                let mut best = (f64::INFINITY, 0u32);
                for (q, p) in u.iter().enumerate() {
                    let d = (v[i] - p).norm_squared();
                    if d < best.0 {
                        best = (d, q as u32);
                    }
                }
                assert_eq!(j, best.1);
            }
            for (q, &i) in ts.iter().enumerate() {
                let mut best = (f64::INFINITY, 0u32);
                for (k, p) in v.iter().enumerate() {
                    let d = (u[q] - p).norm_squared();
                    if d < best.0 {
                        best = (d, k as u32);
                    }
                }
                assert_eq!(i, best.1);
            }
        }
    }

    #[test]
    fn filter_keeps_all_on_identity_round_trip() {
        let mesh = shapes::octahedron();
        let geo = GeodesicMatrix::compute(&mesh);
        let pi: Vec<u32> = (0..6).collect();
        let pairs = bijectivity_filter(&pi, &pi, &geo, 1e-9);
        assert_eq!(pairs.len(), 6);
    }

    #[test]
    fn filter_rejects_distant_round_trip() {
        // path 0-1-2 with unit edges; round trip from 0 lands on 2
        let mesh = shapes::path_mesh(3);
        let geo = GeodesicMatrix::compute(&mesh);
        let n = mesh.vertices.len();
        let mut pi_st: Vec<u32> = (0..n as u32).collect();
        let mut pi_ts: Vec<u32> = (0..n as u32).collect();
        pi_st[0] = 1;
        pi_ts[1] = 2;
        let pairs = bijectivity_filter(&pi_st, &pi_ts, &geo, 1.0);
        assert!(!pairs.iter().any(|&(i, _)| i == 0));
        assert!(pairs.iter().any(|&(i, _)| i == 1));
    }

    #[test]
    fn filter_matches_predicate_oracle() {
        let mesh = shapes::grid(5, 5);
        let geo = GeodesicMatrix::compute(&mesh);
        let n = mesh.vertices.len();
        let mut rng = ChaCha8Rng::seed_from_u64(62);
        for _ in 0..10 {
            let pi_st: Vec<u32> = (0..n).map(|_| rng.gen_range(0..n as u32)).collect();
            let pi_ts: Vec<u32> = (0..n).map(|_| rng.gen_range(0..n as u32)).collect();
            let tau = rng.gen_range(0.5..3.0);
            let got = bijectivity_filter(&pi_st, &pi_ts, &geo, tau);
            let want: Vec<(u32, u32)> = (0..n)
                .filter(|&i| {
                    geo.get(i, pi_ts[pi_st[i] as usize] as usize) as f64 <= tau
                })
                .map(|i| (i as u32, pi_st[i]))
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn filter_monotone_in_threshold() {
        let mesh = shapes::grid(4, 4);
        let geo = GeodesicMatrix::compute(&mesh);
        let n = mesh.vertices.len();
        let mut rng = ChaCha8Rng::seed_from_u64(63);
        let pi_st: Vec<u32> = (0..n).map(|_| rng.gen_range(0..n as u32)).collect();
        let pi_ts: Vec<u32> = (0..n).map(|_| rng.gen_range(0..n as u32)).collect();
        let mut prev = 0usize;
        for tau in [0.1, 0.5, 1.0, 2.0, 10.0] {
            let kept = bijectivity_filter(&pi_st, &pi_ts, &geo, tau).len();
            assert!(kept >= prev);
            prev = kept;
        }
        assert_eq!(bijectivity_filter(&pi_st, &pi_ts, &geo, f64::INFINITY).len(), n);
    }

    #[test]
    fn register_identity_target() {
        let mesh = shapes::icosphere(1);
        let t = cloud(mesh.vertices.clone());
        let config = RegistrationConfig {
            max_iterations: 50,
            ..RegistrationConfig::default()
        };
        let res = register(&mesh, &t, None, &config).unwrap();
        assert!(res.warnings.iter().any(|w| w.contains("skipping stage one")));
        assert!(res.stage_one.is_none());
        for (a, b) in res.deformed.vertices.iter().zip(&mesh.vertices) {
            assert!((a - b).norm() < 1e-6);
        }
        let n = mesh.vertices.len() as u32;
        assert_eq!(res.pi_st, (0..n).collect::<Vec<u32>>());
        assert_eq!(res.pi_ts, (0..n).collect::<Vec<u32>>());
        assert!(res.trace.last().unwrap().e_total <= 1e-10);
    }

    #[test]
    fn trace_monotone_with_line_search() {
        let mesh = shapes::grid(4, 4);
        let mut shifted = mesh.vertices.clone();
        for p in &mut shifted {
            *p += Vector3::new(0.15, -0.1, 0.2);
        }
        let config = RegistrationConfig {
            max_iterations: 120,
            optimizer: OptimizerParams {
                line_search: true,
                learning_rate: 0.05,
                ..OptimizerParams::default()
            },
            ..RegistrationConfig::default()
        };
        let res = register(&mesh, &cloud(shifted), None, &config).unwrap();
        for w in res.trace.windows(2) {
            // refresh points may re-pair and raise the energy; within a
            // window accepted steps never increase it
            if w[0].corr_len == w[1].corr_len && w[1].iter % config.update_interval != 0 {
                assert!(w[1].e_total <= w[0].e_total + 1e-12);
            }
        }
    }

    #[test]
    fn stage_switch_labels() {
        let mesh = shapes::octahedron();
        let t = cloud(mesh.vertices.clone());
        let d = 4;
        let fs = FeatureMatrix::new(DMatrix::from_fn(6, d, |i, j| (i * d + j) as f64), "s").unwrap();
        let config = RegistrationConfig {
            max_iterations: 30,
            ..RegistrationConfig::default()
        };
        let res = register(&mesh, &t, Some((&fs, &fs)), &config).unwrap();
        let mut seen_two = false;
        for r in &res.trace {
            if r.stage == 2 {
                seen_two = true;
            } else {
                assert!(!seen_two, "stage one after stage two");
            }
        }
        assert!(seen_two);
        assert!(res.stage_one.is_some());
    }

    #[test]
    fn register_is_deterministic() {
        let mesh = shapes::grid(4, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(64);
        let target: Vec<Vector3<f64>> = mesh
            .vertices
            .iter()
            .map(|p| p + Vector3::new(rng.gen::<f64>() * 0.1, rng.gen::<f64>() * 0.1, 0.05))
            .collect();
        let config = RegistrationConfig {
            max_iterations: 60,
            ..RegistrationConfig::default()
        };
        let a = register(&mesh, &cloud(target.clone()), None, &config).unwrap();
        let b = register(&mesh, &cloud(target), None, &config).unwrap();
        assert_eq!(a.pi_st, b.pi_st);
        assert_eq!(a.trace.len(), b.trace.len());
        for (x, y) in a.trace.iter().zip(&b.trace) {
            assert_eq!(x.e_total.to_bits(), y.e_total.to_bits());
        }
    }

    #[test]
    fn correspondence_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.txt");
        let pi = vec![2u32, 0, 1, 3];
        write_correspondences(&path, "src", "tgt", &pi).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# source=src target=tgt stage=final\n"));
        let pairs = read_correspondences(&path).unwrap();
        assert_eq!(pairs, vec![(0, 2), (1, 0), (2, 1), (3, 3)]);
    }

    #[test]
    fn trace_csv_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        let trace = vec![TraceRecord {
            iter: 0,
            stage: 1,
            e_total: 1.5,
            e_cd: 0.5,
            e_corr: 1.0,
            e_arap: 0.0,
            corr_len: 12,
        }];
        write_trace_csv(&path, &trace).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "iter,stage,E_total,E_cd,E_corr,E_arap,|C|\n0,1,1.5,0.5,1,0,12\n");
    }

    #[test]
    fn default_config_matches_published_constants() {
        let c = RegistrationConfig::default();
        assert_eq!(c.update_interval, 100);
        assert_eq!(c.eps_stage_one, 1e-8);
        assert_eq!(c.eps_stage_two, 1e-7);
        assert_eq!(c.patience, 15);
        assert_eq!(
            (
                c.stage_one_weights.lambda_cd,
                c.stage_one_weights.lambda_corr,
                c.stage_one_weights.lambda_arap
            ),
            (0.01, 1.0, 20.0)
        );
        assert_eq!(
            (
                c.stage_two_weights.lambda_cd,
                c.stage_two_weights.lambda_corr,
                c.stage_two_weights.lambda_arap
            ),
            (1.0, 0.01, 1.0)
        );
        assert_eq!(c.stage_one_weights.alpha_smooth, 0.2);
        assert_eq!(c.tau, 0.05);
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = RegistrationConfig::default();
        c.update_interval = 0;
        assert!(c.validate().is_err());
        let mut c = RegistrationConfig::default();
        c.tau = 0.0;
        assert!(c.validate().is_err());
        let mut c = RegistrationConfig::default();
        c.eps_stage_one = -1.0;
        assert!(c.validate().is_err());
    }
}
