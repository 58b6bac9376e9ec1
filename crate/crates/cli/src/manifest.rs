//! Batch run manifests: a template mesh, a list of targets, optional
//! per-shape feature and rotation files, and evaluation pairs. Paths are
//! resolved relative to the manifest file.

use std::path::{Path, PathBuf};

use dfr_core::{Error, Result};

use crate::align::AlignMode;
use crate::config::Config;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub path: PathBuf,
    pub features: Option<PathBuf>,
    pub rotation: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub first: PathBuf,
    pub second: PathBuf,
    pub ground_truth: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub template: PathBuf,
    pub template_features: Option<PathBuf>,
    pub template_rotation: Option<PathBuf>,
    pub targets: Vec<TargetSpec>,
    pub eval_pairs: Vec<EvalPair>,
    pub output_dir: PathBuf,
    pub align: AlignMode,
    pub config: Config,
}

fn parse_target(value: &str, base: &Path, origin: &Path, lineno: usize) -> Result<TargetSpec> {
    let mut tokens = value.split_whitespace();
    let path = tokens
        .next()
        .ok_or_else(|| Error::parse(origin, lineno, "target needs a shape path"))?;
    let mut spec = TargetSpec {
        path: base.join(path),
        features: None,
        rotation: None,
    };
    for tok in tokens {
        match tok.split_once('=') {
            Some(("features", p)) => spec.features = Some(base.join(p)),
            Some(("rotation", p)) => spec.rotation = Some(base.join(p)),
            _ => {
                return Err(Error::parse(
                    origin,
                    lineno,
                    format!("unknown target option '{tok}' (expected features=/rotation=)"),
                ))
            }
        }
    }
    Ok(spec)
}

impl RunManifest {
    pub fn parse(text: &str, origin: &Path) -> Result<RunManifest> {
        let base = origin.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
        let mut template = None;
        let mut template_features = None;
        let mut template_rotation = None;
        let mut targets = Vec::new();
        let mut eval_pairs = Vec::new();
        let mut output_dir = None;
        let mut align = AlignMode::None;
        let mut config = Config::default();
        let mut overrides: Vec<(usize, String)> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let lineno = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, lineno, "expected 'key = value'"))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "template" => template = Some(base.join(value)),
                "template_features" => template_features = Some(base.join(value)),
                "template_rotation" => template_rotation = Some(base.join(value)),
                "output_dir" => output_dir = Some(base.join(value)),
                "align" => align = value.parse()?,
                "config" => config = Config::load(&base.join(value))?,
                "set" => overrides.push((lineno, value.to_string())),
                "target" => targets.push(parse_target(value, &base, origin, lineno)?),
                "eval" => {
                    let toks: Vec<&str> = value.split_whitespace().collect();
                    if toks.len() != 3 {
                        return Err(Error::parse(
                            origin,
                            lineno,
                            "eval needs '<target1> <target2> <ground-truth map>'",
                        ));
                    }
                    eval_pairs.push(EvalPair {
                        first: base.join(toks[0]),
                        second: base.join(toks[1]),
                        ground_truth: base.join(toks[2]),
                    });
                }
                _ => {
                    return Err(Error::parse(
                        origin,
                        lineno,
                        format!("unknown manifest key '{key}'"),
                    ))
                }
            }
        }
        // apply inline overrides after any config file so they win
        for (lineno, assignment) in overrides {
            config
                .set_qualified(&assignment)
                .map_err(|e| Error::parse(origin, lineno, e.to_string()))?;
        }
        config.registration.validate()?;

        let manifest = RunManifest {
            template: template
                .ok_or_else(|| Error::Argument("manifest is missing 'template'".into()))?,
            template_features,
            template_rotation,
            targets,
            eval_pairs,
            output_dir: output_dir
                .ok_or_else(|| Error::Argument("manifest is missing 'output_dir'".into()))?,
            align,
            config,
        };
        if manifest.targets.is_empty() {
            return Err(Error::Argument("manifest lists no targets".into()));
        }
        manifest.check_paths()?;
        Ok(manifest)
    }

    pub fn load(path: &Path) -> Result<RunManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunManifest::parse(&text, path)
    }

    fn check_paths(&self) -> Result<()> {
        let mut required: Vec<&PathBuf> = vec![&self.template];
        required.extend(&self.template_features);
        required.extend(&self.template_rotation);
        for t in &self.targets {
            required.push(&t.path);
            required.extend(&t.features);
            required.extend(&t.rotation);
        }
        for p in &self.eval_pairs {
            required.push(&p.ground_truth);
        }
        for path in required {
            if !path.exists() {
                return Err(Error::Argument(format!(
                    "manifest references missing file {}",
                    path.display()
                )));
            }
        }
        for pair in &self.eval_pairs {
            for side in [&pair.first, &pair.second] {
                if !self.targets.iter().any(|t| &t.path == side) {
                    return Err(Error::Argument(format!(
                        "eval pair references {} which is not a listed target",
                        side.display()
                    )));
                }
            }
        }
        Ok(())
    }
}
