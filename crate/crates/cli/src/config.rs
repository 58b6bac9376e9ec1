//! Plain-text configuration: `key = value` lines, `#` comments, and the
//! sections `[stage1]`, `[stage2]`, `[filter]`, `[optimizer]`. Every key
//! has a default; unknown keys are hard errors so a typoed weight name
//! cannot silently fall back.

use std::path::Path;

use dfr_core::registration::RegistrationConfig;
use dfr_core::{Error, Result};

/// Full pipeline configuration: the registration parameters plus batch
/// concerns.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub registration: RegistrationConfig,
    /// worker pool size for batch runs; 0 means all available cores
    pub threads: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            registration: RegistrationConfig::default(),
            threads: 0,
        }
    }
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value
        .parse()
        .map_err(|_| Error::Argument(format!("key '{key}': expected a number, got '{value}'")))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Argument(format!("key '{key}': expected an integer, got '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Argument(format!(
            "key '{key}': expected true/false, got '{value}'"
        ))),
    }
}

impl Config {
    /// Applies one `section.key = value` assignment. `section` is empty
    /// for top-level keys.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let r = &mut self.registration;
        match (section, key) {
            ("", "update_interval") => r.update_interval = parse_usize(key, value)?,
            ("", "patience") => r.patience = parse_usize(key, value)?,
            ("", "max_iterations") => r.max_iterations = parse_usize(key, value)?,
            ("", "graph_nodes") => {
                r.graph_nodes = if value == "auto" {
                    None
                } else {
                    Some(parse_usize(key, value)?)
                }
            }
            ("", "graph_neighbors") => r.graph_neighbors = parse_usize(key, value)?,
            ("", "alpha_smooth") => {
                let a = parse_f64(key, value)?;
                r.stage_one_weights.alpha_smooth = a;
                r.stage_two_weights.alpha_smooth = a;
            }
            ("", "feature_command") => {
                r.feature_command = if value.is_empty() {
                    None
                } else {
                    Some(value.to_string())
                }
            }
            ("", "threads") => self.threads = parse_usize(key, value)?,
            ("stage1", "lambda_cd") => r.stage_one_weights.lambda_cd = parse_f64(key, value)?,
            ("stage1", "lambda_corr") => r.stage_one_weights.lambda_corr = parse_f64(key, value)?,
            ("stage1", "lambda_arap") => r.stage_one_weights.lambda_arap = parse_f64(key, value)?,
            ("stage1", "eps") => r.eps_stage_one = parse_f64(key, value)?,
            ("stage2", "lambda_cd") => r.stage_two_weights.lambda_cd = parse_f64(key, value)?,
            ("stage2", "lambda_corr") => r.stage_two_weights.lambda_corr = parse_f64(key, value)?,
            ("stage2", "lambda_arap") => r.stage_two_weights.lambda_arap = parse_f64(key, value)?,
            ("stage2", "eps") => r.eps_stage_two = parse_f64(key, value)?,
            ("filter", "tau") => r.tau = parse_f64(key, value)?,
            ("optimizer", "learning_rate") => r.optimizer.learning_rate = parse_f64(key, value)?,
            ("optimizer", "beta1") => r.optimizer.beta1 = parse_f64(key, value)?,
            ("optimizer", "beta2") => r.optimizer.beta2 = parse_f64(key, value)?,
            ("optimizer", "epsilon") => r.optimizer.epsilon = parse_f64(key, value)?,
            ("optimizer", "line_search") => r.optimizer.line_search = parse_bool(key, value)?,
            _ => {
                let full = if section.is_empty() {
                    key.to_string()
                } else {
                    format!("{section}.{key}")
                };
                return Err(Error::Argument(format!("unknown config key '{full}'")));
            }
        }
        Ok(())
    }

    /// Applies a `--set` style override: `key=value` or
    /// `section.key=value`.
    pub fn set_qualified(&mut self, assignment: &str) -> Result<()> {
        let (path, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Argument(format!("override '{assignment}' is not key=value")))?;
        let path = path.trim();
        let value = value.trim();
        match path.split_once('.') {
            Some((section, key)) => self.set(section.trim(), key.trim(), value),
            None => self.set("", path, value),
        }
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Config> {
        let mut config = Config::default();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::parse(origin, lineno + 1, "unterminated section header"))?
                    .trim();
                match name {
                    "stage1" | "stage2" | "filter" | "optimizer" => section = name.to_string(),
                    _ => {
                        return Err(Error::parse(
                            origin,
                            lineno + 1,
                            format!("unknown section '[{name}]'"),
                        ))
                    }
                }
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(origin, lineno + 1, "expected 'key = value'"))?;
            config
                .set(&section, key.trim(), value.trim())
                .map_err(|e| Error::parse(origin, lineno + 1, e.to_string()))?;
        }
        config.registration.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Config::parse(&text, path)
    }
}
