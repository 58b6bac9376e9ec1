//! `dfr`: non-rigid registration and correspondence evaluation pipeline.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dfr_cli::align::{align_input, read_rotation, AlignMode};
use dfr_cli::config::Config;
use dfr_cli::evalmap::{compose_maps, geodesic_error};
use dfr_cli::manifest::RunManifest;
use dfr_core::defgraph::qslim_decimate;
use dfr_core::fmaps::{fmap_losses, nce_loss, soft_map, solve_fmap, FeatureMatrix, FmapWeights};
use dfr_core::geometry::{io, GeodesicMatrix, PointCloud, TriMesh};
use dfr_core::registration::{
    read_correspondences, register, write_correspondences, write_trace_csv,
};
use dfr_core::spectral::{cotan_laplacian, eigenbasis};
use dfr_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dfr",
    about = "Feature-guided non-rigid shape registration and evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// configuration file; flags and --set assignments override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// override a config key, e.g. --set stage1.lambda_arap=5
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<Config> {
        let mut config = match &self.config {
            Some(path) => Config::load(path)?,
            None => Config::default(),
        };
        for s in &self.sets {
            config.set_qualified(s)?;
        }
        config.registration.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Register a source mesh onto a target point cloud, or run a whole
    /// batch manifest
    Register {
        /// batch manifest; replaces the single-pair flags below
        #[arg(long, conflicts_with_all = ["source", "target"])]
        manifest: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        source: Option<PathBuf>,
        #[arg(long, required_unless_present = "manifest")]
        target: Option<PathBuf>,
        #[arg(long, requires = "target_features")]
        source_features: Option<PathBuf>,
        #[arg(long, requires = "source_features")]
        target_features: Option<PathBuf>,
        /// directory for deformed mesh, maps, and trace
        #[arg(long, default_value = ".")]
        output_dir: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Match two targets through a common template and write the
    /// composed map
    Match {
        #[arg(long)]
        template: PathBuf,
        #[arg(long)]
        target1: PathBuf,
        #[arg(long)]
        target2: PathBuf,
        #[arg(long)]
        template_features: Option<PathBuf>,
        #[arg(long)]
        target1_features: Option<PathBuf>,
        #[arg(long)]
        target2_features: Option<PathBuf>,
        /// output path for the composed target1 -> target2 map
        #[arg(long)]
        output: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Mean geodesic error of a predicted map against ground truth
    Eval {
        /// predicted map ("i j" lines)
        #[arg(long)]
        pred: PathBuf,
        /// ground-truth map, dense or sparse landmarks
        #[arg(long)]
        gt: PathBuf,
        /// target mesh the map points into
        #[arg(long)]
        target: PathBuf,
    },
    /// Functional-map diagnostics for a shape pair with feature files
    FmapDiagnose {
        #[arg(long)]
        shape1: PathBuf,
        #[arg(long)]
        shape2: PathBuf,
        #[arg(long)]
        features1: PathBuf,
        #[arg(long)]
        features2: PathBuf,
        /// spectral basis size
        #[arg(short, long, default_value_t = 50)]
        k: usize,
        /// Tikhonov weight in the functional-map solve
        #[arg(long, default_value_t = 1e-3)]
        reg: f64,
        /// soft-map temperature
        #[arg(long, default_value_t = 50.0)]
        alpha: f64,
        /// InfoNCE temperature
        #[arg(long, default_value_t = 0.07)]
        gamma: f64,
    },
    /// Simplify a mesh to a vertex budget with quadric error collapses
    Decimate {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        vertices: usize,
        #[arg(long)]
        output: PathBuf,
    },
    /// Precompute the all-pairs geodesic matrix of a mesh
    Geodesics {
        #[arg(long)]
        input: PathBuf,
        /// cache file to write
        #[arg(long)]
        output: PathBuf,
    },
    /// Center a shape and optionally fix its orientation
    Align {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// none, rotation_file, or pca
        #[arg(long, default_value = "none")]
        mode: String,
        /// 3x3 rotation for rotation_file mode
        #[arg(long)]
        rotation: Option<PathBuf>,
    },
}

fn load_features_checked(path: &PathBuf, n: usize, what: &str) -> Result<FeatureMatrix> {
    let f = FeatureMatrix::load(path)?;
    if f.n() != n {
        return Err(Error::Dimension(format!(
            "{}: {} feature rows for {n} {what} points",
            path.display(),
            f.n()
        )));
    }
    Ok(f)
}

fn run_register_pair(
    source: &PathBuf,
    target: &PathBuf,
    source_features: &Option<PathBuf>,
    target_features: &Option<PathBuf>,
    output_dir: &PathBuf,
    config: &Config,
) -> Result<()> {
    let mesh = io::load_mesh(source)?;
    let cloud = io::load_cloud(target)?;
    let fs = match source_features {
        Some(p) => Some(load_features_checked(p, mesh.vertices.len(), "source")?),
        None => None,
    };
    let ft = match target_features {
        Some(p) => Some(load_features_checked(p, cloud.points.len(), "target")?),
        None => None,
    };
    let features = match (&fs, &ft) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    let result = register(&mesh, &cloud, features, &config.registration)?;
    std::fs::create_dir_all(output_dir).map_err(|e| Error::io(output_dir, e))?;
    io::save_mesh(&output_dir.join("deformed.off"), &result.deformed)?;
    write_correspondences(
        &output_dir.join("map_st.txt"),
        &mesh.name,
        &cloud.name,
        &result.pi_st,
    )?;
    write_correspondences(
        &output_dir.join("map_ts.txt"),
        &cloud.name,
        &mesh.name,
        &result.pi_ts,
    )?;
    write_trace_csv(&output_dir.join("trace.csv"), &result.trace)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(s) = &result.stage_one {
        println!("stage1: {} iterations in {:.2}s", s.iterations, s.seconds);
    }
    println!(
        "stage2: {} iterations in {:.2}s",
        result.stage_two.iterations, result.stage_two.seconds
    );
    println!(
        "final energy: {:e}",
        result.trace.last().map(|r| r.e_total).unwrap_or(f64::NAN)
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Register {
            manifest,
            source,
            target,
            source_features,
            target_features,
            output_dir,
            config,
        } => {
            if let Some(path) = manifest {
                let m = RunManifest::load(&path)?;
                let report = dfr_cli::batch::run_batch(&m)?;
                print!("{}", report.render());
                return Ok(());
            }
            run_register_pair(
                source.as_ref().unwrap(),
                target.as_ref().unwrap(),
                &source_features,
                &target_features,
                &output_dir,
                &config.build()?,
            )
        }
        Command::Match {
            template,
            target1,
            target2,
            template_features,
            target1_features,
            target2_features,
            output,
            config,
        } => {
            let config = config.build()?;
            let mesh = io::load_mesh(&template)?;
            let run_one = |target_path: &PathBuf,
                               feat: &Option<PathBuf>|
             -> Result<(PointCloud, Vec<u32>, Vec<u32>)> {
                let cloud = io::load_cloud(target_path)?;
                let tf = match (&template_features, feat) {
                    (Some(a), Some(b)) => Some((
                        load_features_checked(a, mesh.vertices.len(), "template")?,
                        load_features_checked(b, cloud.points.len(), "target")?,
                    )),
                    _ => None,
                };
                let r = register(
                    &mesh,
                    &cloud,
                    tf.as_ref().map(|(a, b)| (a, b)),
                    &config.registration,
                )?;
                for w in &r.warnings {
                    eprintln!("warning: {w}");
                }
                Ok((cloud, r.pi_st, r.pi_ts))
            };
            let (cloud1, _, pi_ts_1) = run_one(&target1, &target1_features)?;
            let (cloud2, pi_st_2, _) = run_one(&target2, &target2_features)?;
            let composed = compose_maps(&pi_ts_1, &pi_st_2)?;
            write_correspondences(&output, &cloud1.name, &cloud2.name, &composed)?;
            println!("wrote {} pairs to {}", composed.len(), output.display());
            Ok(())
        }
        Command::Eval { pred, gt, target } => {
            let pred_pairs = read_correspondences(&pred)?;
            let n = pred_pairs.iter().map(|&(i, _)| i).max().map_or(0, |m| m + 1);
            let mut map = vec![u32::MAX; n as usize];
            for (i, j) in pred_pairs {
                map[i as usize] = j;
            }
            if map.contains(&u32::MAX) {
                return Err(Error::Argument(format!(
                    "predicted map {} has gaps; a dense map is required",
                    pred.display()
                )));
            }
            let gt_pairs = read_correspondences(&gt)?;
            let mesh = io::load_mesh(&target)?;
            let geo = GeodesicMatrix::compute(&mesh);
            let r = geodesic_error(&map, &gt_pairs, &geo, mesh.surface_area())?;
            println!("mean_geodesic_error_x100 = {}", 100.0 * r.mean);
            println!("evaluated = {}", r.evaluated);
            println!("excluded = {}", r.excluded);
            Ok(())
        }
        Command::FmapDiagnose {
            shape1,
            shape2,
            features1,
            features2,
            k,
            reg,
            alpha,
            gamma,
        } => {
            let m1 = io::load_mesh(&shape1)?;
            let m2 = io::load_mesh(&shape2)?;
            let f1 = load_features_checked(&features1, m1.vertices.len(), "shape1")?;
            let f2 = load_features_checked(&features2, m2.vertices.len(), "shape2")?;
            let l1 = cotan_laplacian(&m1)?;
            let l2 = cotan_laplacian(&m2)?;
            let k = k.min(m1.vertices.len()).min(m2.vertices.len());
            let b1 = eigenbasis(&l1.stiffness, &l1.mass, k)?;
            let b2 = eigenbasis(&l2.stiffness, &l2.mass, k)?;
            let a1 = b1.project(&f1.values)?;
            let a2 = b2.project(&f2.values)?;
            let c12 = solve_fmap(&a1, &a2, reg, &b1.eigenvalues, &b2.eigenvalues)?;
            let c21 = solve_fmap(&a2, &a1, reg, &b2.eigenvalues, &b1.eigenvalues)?;
            let pi12 = soft_map(&f1, &f2, alpha)?;
            let pi21 = soft_map(&f2, &f1, alpha)?;
            let losses = fmap_losses(&c12, &c21, &pi12, &pi21, &b1, &b2, FmapWeights::default())?;
            println!("k = {k}");
            println!("E_bij = {}", losses.e_bij);
            println!("E_orth = {}", losses.e_ortho);
            println!("E_align = {}", losses.e_align);
            println!("E_align_sq = {}", losses.e_align_sq);
            println!("E_dfm = {}", losses.e_dfm);
            if f1.n() == f2.n() {
                println!("E_nce = {}", nce_loss(&f1, &f2, gamma)?);
            }
            Ok(())
        }
        Command::Decimate {
            input,
            vertices,
            output,
        } => {
            let mesh = io::load_mesh(&input)?;
            let result = qslim_decimate(&mesh, vertices)?;
            io::save_mesh(&output, &result.mesh)?;
            println!(
                "decimated {} -> {} vertices (requested {}, quadric error {:e})",
                mesh.vertices.len(),
                result.mesh.vertices.len(),
                vertices,
                result.total_error
            );
            if result.stalled {
                eprintln!("warning: collapse stalled before reaching the target");
            }
            Ok(())
        }
        Command::Geodesics { input, output } => {
            let mesh = io::load_mesh(&input)?;
            let geo = GeodesicMatrix::compute(&mesh);
            geo.save(&output)?;
            println!(
                "wrote {}x{} geodesic matrix to {}",
                mesh.vertices.len(),
                mesh.vertices.len(),
                output.display()
            );
            Ok(())
        }
        Command::Align {
            input,
            output,
            mode,
            rotation,
        } => {
            let mode: AlignMode = mode.parse()?;
            let rot = match &rotation {
                Some(p) => Some(read_rotation(p)?),
                None => None,
            };
            match io::load_mesh(&input) {
                Ok(mesh) => {
                    let (points, r) = align_input(&mesh.vertices, mode, rot.as_ref())?;
                    let aligned = TriMesh::new(points, mesh.faces.clone(), mesh.name.clone())?;
                    io::save_mesh(&output, &aligned)?;
                    println!("applied rotation:\n{r:.6}");
                }
                Err(_) => {
                    let cloud = io::load_cloud(&input)?;
                    let (points, r) = align_input(&cloud.points, mode, rot.as_ref())?;
                    let aligned = PointCloud::new(points, cloud.name.clone())?;
                    io::save_cloud(&output, &aligned)?;
                    println!("applied rotation:\n{r:.6}");
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) | Error::Singular(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
