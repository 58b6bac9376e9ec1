//! Batch orchestration: register a template onto every target in a
//! manifest, write artifacts per target, then evaluate requested pairs by
//! composing their maps through the template hub.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use dfr_core::energies::e_cd;
use dfr_core::fmaps::FeatureMatrix;
use dfr_core::geometry::{io, GeodesicMatrix, PointCloud, TriMesh};
use dfr_core::registration::{
    read_correspondences, register, write_correspondences, write_trace_csv, StageReport,
};
use dfr_core::{Error, Result};

use crate::align::{align_input, read_rotation, AlignMode};
use crate::evalmap::{compose_maps, geodesic_error};
use crate::manifest::RunManifest;

#[derive(Debug, Clone)]
pub struct TargetReport {
    pub name: String,
    pub chamfer: f64,
    pub stage_one: Option<StageReport>,
    pub stage_two: Option<StageReport>,
    pub warnings: Vec<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PairReport {
    pub first: String,
    pub second: String,
    pub mean_x100: Option<f64>,
    pub evaluated: usize,
    pub excluded: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub align: AlignMode,
    pub targets: Vec<TargetReport>,
    pub pairs: Vec<PairReport>,
    /// arithmetic mean of the per-pair means (x100)
    pub aggregate_x100: Option<f64>,
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mode = match self.align {
            AlignMode::None => "none",
            AlignMode::RotationFile => "rotation_file",
            AlignMode::Pca => "pca",
        };
        let mut out = format!("# batch registration report\nalign_mode = {mode}\n");
        for t in &self.targets {
            out.push_str(&format!("\n[target {}]\n", t.name));
            if let Some(err) = &t.error {
                out.push_str(&format!("status = failed\nerror = {err}\n"));
                continue;
            }
            out.push_str("status = ok\n");
            out.push_str(&format!("chamfer = {:e}\n", t.chamfer));
            if let Some(s) = &t.stage_one {
                out.push_str(&format!(
                    "stage1_iterations = {}\nstage1_seconds = {:.3}\n",
                    s.iterations, s.seconds
                ));
            }
            if let Some(s) = &t.stage_two {
                out.push_str(&format!(
                    "stage2_iterations = {}\nstage2_seconds = {:.3}\n",
                    s.iterations, s.seconds
                ));
            }
            for w in &t.warnings {
                out.push_str(&format!("warning = {w}\n"));
            }
        }
        for p in &self.pairs {
            out.push_str(&format!("\n[pair {} {}]\n", p.first, p.second));
            match (&p.error, p.mean_x100) {
                (Some(err), _) => out.push_str(&format!("status = failed\nerror = {err}\n")),
                (None, Some(mean)) => out.push_str(&format!(
                    "mean_geodesic_error_x100 = {mean}\nevaluated = {}\nexcluded = {}\n",
                    p.evaluated, p.excluded
                )),
                (None, None) => out.push_str("status = failed\n"),
            }
        }
        if let Some(a) = self.aggregate_x100 {
            out.push_str(&format!("\naggregate_x100 = {a}\n"));
        }
        out
    }
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "shape".into())
}

fn pool_size(config_threads: usize) -> usize {
    match std::env::var("DFR_THREADS") {
        Ok(v) => v.parse().unwrap_or(config_threads),
        Err(_) => config_threads,
    }
}

struct TargetOutcome {
    report: TargetReport,
    /// template -> target and target -> template maps
    maps: Option<(Vec<u32>, Vec<u32>)>,
}

fn load_aligned_cloud(
    path: &Path,
    mode: AlignMode,
    rotation: Option<&PathBuf>,
) -> Result<PointCloud> {
    let cloud = io::load_cloud(path)?;
    let rot = match rotation {
        Some(p) => Some(read_rotation(p)?),
        None => None,
    };
    let (points, _) = align_input(&cloud.points, mode, rot.as_ref())?;
    PointCloud::new(points, cloud.name)
}

fn run_target(
    template: &TriMesh,
    template_features: Option<&FeatureMatrix>,
    spec: &crate::manifest::TargetSpec,
    manifest: &RunManifest,
) -> Result<(TargetReport, Vec<u32>, Vec<u32>)> {
    let name = stem(&spec.path);
    let target = load_aligned_cloud(&spec.path, manifest.align, spec.rotation.as_ref())?;
    let target_features = match &spec.features {
        Some(p) => {
            let f = FeatureMatrix::load(p)?;
            if f.n() != target.points.len() {
                return Err(Error::Dimension(format!(
                    "{}: {} feature rows for {} points",
                    p.display(),
                    f.n(),
                    target.points.len()
                )));
            }
            Some(f)
        }
        None => None,
    };
    let features = match (template_features, &target_features) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    let result = register(template, &target, features, &manifest.config.registration)?;

    let dir = manifest.output_dir.join(&name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    io::save_mesh(&dir.join("deformed.off"), &result.deformed)?;
    write_correspondences(&dir.join("map_st.txt"), &template.name, &name, &result.pi_st)?;
    write_correspondences(&dir.join("map_ts.txt"), &name, &template.name, &result.pi_ts)?;
    write_trace_csv(&dir.join("trace.csv"), &result.trace)?;

    let (chamfer, _) = e_cd(&result.deformed.vertices, &target);
    Ok((
        TargetReport {
            name,
            chamfer,
            stage_one: result.stage_one,
            stage_two: Some(result.stage_two),
            warnings: result.warnings,
            error: None,
        },
        result.pi_st,
        result.pi_ts,
    ))
}

/// Registers the template onto every target and evaluates the requested
/// pairs. Per-target failures are recorded in the report and the batch
/// continues; manifest-level problems (bad template, bad features) fail
/// the whole run.
pub fn run_batch(manifest: &RunManifest) -> Result<EvalReport> {
    let template_raw = io::load_mesh(&manifest.template)?;
    let rot = match &manifest.template_rotation {
        Some(p) => Some(read_rotation(p)?),
        None => None,
    };
    let (points, _) = align_input(&template_raw.vertices, manifest.align, rot.as_ref())?;
    let template = TriMesh::new(points, template_raw.faces.clone(), template_raw.name.clone())?;
    let template_features = match &manifest.template_features {
        Some(p) => {
            let f = FeatureMatrix::load(p)?;
            if f.n() != template.vertices.len() {
                return Err(Error::Dimension(format!(
                    "{}: {} feature rows for {} template vertices",
                    p.display(),
                    f.n(),
                    template.vertices.len()
                )));
            }
            Some(f)
        }
        None => None,
    };
    std::fs::create_dir_all(&manifest.output_dir)
        .map_err(|e| Error::io(&manifest.output_dir, e))?;

    let threads = pool_size(manifest.config.threads);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::External(format!("failed to build worker pool: {e}")))?;
    let outcomes: Vec<TargetOutcome> = pool.install(|| {
        manifest
            .targets
            .par_iter()
            .map(|spec| match run_target(&template, template_features.as_ref(), spec, manifest) {
                Ok((report, pi_st, pi_ts)) => TargetOutcome {
                    report,
                    maps: Some((pi_st, pi_ts)),
                },
                Err(e) => TargetOutcome {
                    report: TargetReport {
                        name: stem(&spec.path),
                        chamfer: f64::NAN,
                        stage_one: None,
                        stage_two: None,
                        warnings: Vec::new(),
                        error: Some(e.to_string()),
                    },
                    maps: None,
                },
            })
            .collect()
    });

    let mut pairs = Vec::new();
    for pair in &manifest.eval_pairs {
        let idx_of = |p: &PathBuf| manifest.targets.iter().position(|t| &t.path == p).unwrap();
        let (i, j) = (idx_of(&pair.first), idx_of(&pair.second));
        let (first, second) = (stem(&pair.first), stem(&pair.second));
        let mut report = PairReport {
            first,
            second,
            mean_x100: None,
            evaluated: 0,
            excluded: 0,
            error: None,
        };
        match (&outcomes[i].maps, &outcomes[j].maps) {
            (Some((_, pi_ts_1)), Some((pi_st_2, _))) => {
                let result = (|| -> Result<()> {
                    let composed = compose_maps(pi_ts_1, pi_st_2)?;
                    let gt = read_correspondences(&pair.ground_truth)?;
                    let mesh2 = io::load_mesh(&pair.second)?;
                    let rot = match &manifest.targets[j].rotation {
                        Some(p) => Some(read_rotation(p)?),
                        None => None,
                    };
                    let (points2, _) = align_input(&mesh2.vertices, manifest.align, rot.as_ref())?;
                    let mesh2 = TriMesh::new(points2, mesh2.faces.clone(), mesh2.name.clone())?;
                    let geo = GeodesicMatrix::compute(&mesh2);
                    let r = geodesic_error(&composed, &gt, &geo, mesh2.surface_area())?;
                    report.mean_x100 = Some(100.0 * r.mean);
                    report.evaluated = r.evaluated;
                    report.excluded = r.excluded;
                    Ok(())
                })();
                if let Err(e) = result {
                    report.error = Some(e.to_string());
                }
            }
            _ => report.error = Some("a registration in this pair failed".into()),
        }
        pairs.push(report);
    }

    let means: Vec<f64> = pairs.iter().filter_map(|p| p.mean_x100).collect();
    let aggregate_x100 = if means.is_empty() {
        None
    } else {
        Some(means.iter().sum::<f64>() / means.len() as f64)
    };

    let report = EvalReport {
        align: manifest.align,
        targets: outcomes.into_iter().map(|o| o.report).collect(),
        pairs,
        aggregate_x100,
    };
    let path = manifest.output_dir.join("report.txt");
    std::fs::write(&path, report.render()).map_err(|e| Error::io(&path, e))?;
    Ok(report)
}
