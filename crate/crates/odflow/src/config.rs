//! Run configuration: a JSON file, `--set key=value` overrides, defaults.

use std::fs;
use std::path::{Path, PathBuf};

use odflow_core::learners::LearnerConfig;
use odflow_core::simgen::{ScenarioConfig, SimSpec};
use odflow_core::{PipelineConfig, PlaceboConfig, SynthConfig};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("--set {0}: expected key=value")]
    SetSyntax(String),
    #[error("--set {key}: {msg}")]
    SetPath { key: String, msg: String },
    #[error("config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub input_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { input_dir: PathBuf::from("."), output_dir: PathBuf::from(".") }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimgenConfig {
    pub spec: SimSpec,
    pub scenario: ScenarioConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ParamLossConfig {
    pub p_grid: Vec<f64>,
    pub sigma1_grid: Vec<f64>,
    pub sigma2_grid: Vec<f64>,
    pub beta: Vec<f64>,
    pub sigma_x: f64,
    pub n: usize,
    pub trials: usize,
}

impl Default for ParamLossConfig {
    fn default() -> Self {
        Self {
            p_grid: vec![0.2, 0.5, 0.8],
            sigma1_grid: vec![0.5, 1.0, 2.0],
            sigma2_grid: vec![0.5, 1.0, 2.0],
            beta: vec![1.0, 1.0],
            sigma_x: 1.0,
            n: 1000,
            trials: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RiskConfig {
    pub step: f64,
    pub draws: usize,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self { step: 0.01, draws: 1_000_000, sigma1: 0.5, sigma2: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub param_loss: ParamLossConfig,
    pub risk: RiskConfig,
}

/// Module seeds are not configurable on their own: every module takes the
/// global `seed`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub syncontrol: SynthConfig,
    pub placebo: PlaceboConfig,
    pub learners: LearnerConfig,
    pub pipeline: PipelineConfig,
    pub simgen: SimgenConfig,
    pub theory: TheoryConfig,
}

impl RunConfig {
    /// Reads `path` (if any), applies overrides in order and validates.
    pub fn load(path: Option<&Path>, sets: &[String]) -> Result<Self, ConfigError> {
        let mut value = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Read { path: p.to_path_buf(), source })?;
                serde_json::from_str(&text).map_err(|source| ConfigError::Json { path: p.to_path_buf(), source })?
            }
            None => Value::Object(Default::default()),
        };
        for s in sets {
            apply_set(&mut value, s)?;
        }
        let config: RunConfig =
            serde_json::from_value(value).map_err(|source| ConfigError::Json { path: path.map(Path::to_path_buf).unwrap_or_default(), source })?;
        config.validate()?;
        Ok(config.resolved())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.syncontrol.seed != 0 || self.learners.seed != 0 || self.simgen.spec.seed != 0 {
            return Err(ConfigError::Invalid("module seeds follow the global `seed`; set that instead".into()));
        }
        let check = |r: odflow_core::Result<()>| r.map_err(|e| ConfigError::Invalid(e.to_string()));
        check(self.placebo.validate())?;
        check(self.learners.validate())?;
        check(self.pipeline.validate())?;
        check(self.simgen.spec.validate())?;
        check(self.simgen.scenario.profile.validate())?;
        if self.syncontrol.t_pre == 0 {
            return Err(ConfigError::Invalid("syncontrol.t_pre must be at least 1".into()));
        }
        Ok(())
    }

    /// Copies the global seed into every module.
    pub fn resolved(mut self) -> Self {
        self.syncontrol.seed = self.seed;
        self.learners.seed = self.seed;
        self.simgen.spec.seed = self.seed;
        self
    }

    pub fn defaults_json() -> String {
        serde_json::to_string_pretty(&RunConfig::default()).expect("serializable defaults")
    }
}

/// `a.b.c=value`. The value is parsed as JSON, falling back to a string.
pub fn apply_set(root: &mut Value, assignment: &str) -> Result<(), ConfigError> {
    let (key, raw) = assignment.split_once('=').ok_or_else(|| ConfigError::SetSyntax(assignment.to_string()))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::SetSyntax(assignment.to_string()));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let obj = node.as_object_mut().ok_or_else(|| ConfigError::SetPath { key: key.to_string(), msg: format!("`{part}` is under a non-object") })?;
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().ok_or_else(|| ConfigError::SetPath { key: key.to_string(), msg: "parent is not an object".into() })?;
    obj.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_overrides_file_values() {
        let mut v: Value = serde_json::from_str(r#"{"pipeline":{"p1":0.1}}"#).unwrap();
        apply_set(&mut v, "pipeline.p1=0.2").unwrap();
        apply_set(&mut v, "paths.output_dir=out").unwrap();
        let c: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.pipeline.p1, 0.2);
        assert_eq!(c.paths.output_dir, PathBuf::from("out"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let v: Value = serde_json::from_str(r#"{"pipeline":{"p3":0.1}}"#).unwrap();
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
        let v: Value = serde_json::from_str(r#"{"nope":1}"#).unwrap();
        assert!(serde_json::from_value::<RunConfig>(v).is_err());
    }

    #[test]
    fn bad_set_syntax() {
        let mut v = Value::Object(Default::default());
        assert!(matches!(apply_set(&mut v, "seed"), Err(ConfigError::SetSyntax(_))));
        assert!(matches!(apply_set(&mut v, "a..b=1"), Err(ConfigError::SetSyntax(_))));
        apply_set(&mut v, "seed=3").unwrap();
        assert!(matches!(apply_set(&mut v, "seed.x=1"), Err(ConfigError::SetPath { .. })));
    }

    #[test]
    fn global_seed_reaches_modules() {
        let c = RunConfig::load(None, &["seed=9".into()]).unwrap();
        assert_eq!((c.syncontrol.seed, c.learners.seed, c.simgen.spec.seed), (9, 9, 9));
        assert!(RunConfig::load(None, &["learners.seed=1".into()]).is_err());
    }

    #[test]
    fn defaults_round_trip() {
        let c: RunConfig = serde_json::from_str(&RunConfig::defaults_json()).unwrap();
        assert_eq!(c, RunConfig::default());
    }
}
