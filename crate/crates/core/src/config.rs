//! Experiment configuration shared by the command line and the service.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ace::DEFAULT_SAMPLES;
use crate::error::{Error, Result};
use crate::forge::{presets, SceneBlueprint};

/// A blueprint given inline, by preset name, or by file path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BlueprintRef {
    Named(String),
    Inline(Box<SceneBlueprint>),
}

impl BlueprintRef {
    /// Preset names win over paths; relative paths resolve against `base`.
    pub fn resolve(&self, base: Option<&Path>) -> Result<SceneBlueprint> {
        match self {
            BlueprintRef::Inline(bp) => Ok((**bp).clone()),
            BlueprintRef::Named(name) if presets::NAMES.contains(&name.as_str()) => presets::load(name),
            BlueprintRef::Named(path) => {
                let p = match base {
                    Some(b) if Path::new(path).is_relative() => b.join(path),
                    _ => PathBuf::from(path),
                };
                let s = std::fs::read_to_string(&p)
                    .map_err(|e| Error::Blueprint(format!("cannot read blueprint {}: {e}", p.display())))?;
                SceneBlueprint::from_json(&s).map_err(|e| Error::Format { path: p, msg: e.to_string() })
            }
        }
    }

    /// Like [`resolve`](Self::resolve) but refuses file paths.
    pub fn resolve_preset(&self) -> Result<SceneBlueprint> {
        match self {
            BlueprintRef::Named(name) => presets::load(name),
            inline => inline.resolve(None),
        }
    }

    pub fn label(&self) -> String {
        match self {
            BlueprintRef::Named(n) => n.clone(),
            BlueprintRef::Inline(bp) => bp.name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub blueprint: Option<BlueprintRef>,
    /// Weight bundle directory; used instead of forging when set.
    pub bundle: Option<PathBuf>,
    pub seed: u64,
    pub n_samples: usize,
    /// Analysis layer; must match the model's when given.
    pub layer: Option<usize>,
    pub ks: Vec<usize>,
    /// Class targets; empty means every palette class.
    pub classes: Vec<String>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            blueprint: None,
            bundle: None,
            seed: 0,
            n_samples: DEFAULT_SAMPLES,
            layer: None,
            ks: (0..=48).step_by(4).collect(),
            classes: Vec::new(),
            out: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads an experiment config, or a bare blueprint which becomes the
    /// config's inline blueprint.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), msg: e.to_string() })?;
        let fmt = |e: serde_json::Error| Error::Format { path: path.into(), msg: e.to_string() };
        let is_blueprint = value.get("object_classes").is_some() || value.get("surfaces").is_some();
        if is_blueprint {
            let bp: SceneBlueprint = serde_json::from_value(value).map_err(fmt)?;
            return Ok(ExperimentConfig { blueprint: Some(BlueprintRef::Inline(Box::new(bp))), ..Default::default() });
        }
        let mut cfg: ExperimentConfig = serde_json::from_value(value).map_err(fmt)?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty());
        if let (Some(BlueprintRef::Named(n)), Some(base)) = (&cfg.blueprint, base) {
            if !presets::NAMES.contains(&n.as_str()) && Path::new(n).is_relative() {
                cfg.blueprint = Some(BlueprintRef::Named(base.join(n).to_string_lossy().into_owned()));
            }
        }
        if let (Some(b), Some(base)) = (&cfg.bundle, base) {
            if b.is_relative() {
                cfg.bundle = Some(base.join(b));
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Argument("n_samples must be >= 1".into()));
        }
        if self.ks.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Argument("ks must be ascending".into()));
        }
        Ok(())
    }
}
