//! Engine configuration file (TOML).
//!
//! Relative paths are resolved against the directory holding the file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cascade::{Cascade, CascadeConfig, StageSpec};
use crate::evo::{EngineMode, EvolutionConfig, ModeFlags};
use crate::graph::{ms_to_duration, SelectionThresholds};
use crate::mcts::MctsConfig;
use crate::mutate::LlmConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("invalid config {path}: {reason}")]
    Parse { path: String, reason: String },
    #[error("config references missing file {0}")]
    MissingFile(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ThresholdsConfig {
    pub tau_time_ms: f64,
    pub tau_freq: u64,
}

impl Default for ThresholdsConfig {
    fn default() -> Self {
        Self {
            tau_time_ms: 100.0,
            tau_freq: 1000,
        }
    }
}

impl ThresholdsConfig {
    pub fn to_thresholds(self) -> Result<SelectionThresholds, ConfigError> {
        let t = ms_to_duration(self.tau_time_ms).ok_or_else(|| {
            ConfigError::Invalid(format!("tau_time_ms {} must be >= 0", self.tau_time_ms))
        })?;
        Ok(SelectionThresholds::new(t, self.tau_freq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Evolution,
    Mcts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderConfig {
    Scripted { script: PathBuf },
    Llm(LlmConfig),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemplatePaths {
    pub optimization: Option<PathBuf>,
    pub repair: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EngineConfigFile {
    pub call_graph: PathBuf,
    pub profile: PathBuf,
    /// Component to optimize; defaults to the top selected target.
    #[serde(default)]
    pub target: Option<String>,
    /// Source file holding the evolve block.
    #[serde(default)]
    pub source: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub mode: Option<EngineMode>,
    #[serde(default)]
    pub mode_flags: Option<ModeFlags>,
    #[serde(default)]
    pub strategy: Strategy,
    /// File name given to candidates inside the evaluation sandbox.
    #[serde(default)]
    pub candidate_file_name: Option<String>,
    #[serde(default)]
    pub thresholds: ThresholdsConfig,
    #[serde(default)]
    pub evolution: EvolutionConfig,
    #[serde(default)]
    pub mcts: MctsConfig,
    #[serde(default)]
    pub cascade: CascadeConfig,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
    pub provider: ProviderConfig,
    #[serde(default)]
    pub templates: TemplatePaths,
    /// Extra constraints appended to the optimization prompt.
    #[serde(default)]
    pub constraints: String,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl EngineConfigFile {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_string(),
            reason: e.to_string(),
        })
    }

    /// Reads, resolves relative paths, and validates.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            reason: e.to_string(),
        })?;
        let mut config = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve(base);
        config.validate()?;
        Ok(config)
    }

    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.call_graph);
        fix(&mut self.profile);
        fix(&mut self.output_dir);
        if let Some(p) = self.source.as_mut() {
            fix(p);
        }
        if let ProviderConfig::Scripted { script } = &mut self.provider {
            fix(script);
        }
        if let Some(p) = self.templates.optimization.as_mut() {
            fix(p);
        }
        if let Some(p) = self.templates.repair.as_mut() {
            fix(p);
        }
    }

    fn required_files(&self) -> Vec<&Path> {
        let mut files = vec![self.call_graph.as_path(), self.profile.as_path()];
        if let ProviderConfig::Scripted { script } = &self.provider {
            files.push(script);
        }
        files.extend(self.templates.optimization.as_deref());
        files.extend(self.templates.repair.as_deref());
        files
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for f in self.required_files() {
            if !f.is_file() {
                return Err(ConfigError::MissingFile(f.display().to_string()));
            }
        }
        self.thresholds.to_thresholds()?;
        self.engine_mode()?;
        self.evolution
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.mcts
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.cascade
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if !self.stages.is_empty() {
            self.build_cascade()?;
        }
        Ok(())
    }

    /// `mode` and `mode_flags` may both be given only if they agree.
    pub fn engine_mode(&self) -> Result<EngineMode, ConfigError> {
        let from_flags = self
            .mode_flags
            .map(|f| f.mode().map_err(|e| ConfigError::Invalid(e.to_string())))
            .transpose()?;
        match (self.mode, from_flags) {
            (Some(a), Some(b)) if a != b => Err(ConfigError::Invalid(format!(
                "mode {a} conflicts with mode_flags selecting {b}"
            ))),
            (Some(m), _) | (None, Some(m)) => Ok(m),
            (None, None) => Ok(EngineMode::Final),
        }
    }

    pub fn build_cascade(&self) -> Result<Cascade, ConfigError> {
        let mut cascade = Cascade::new(self.stages.clone(), self.cascade.clone())
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(name) = &self.candidate_file_name {
            cascade = cascade.with_file_name(name.clone());
        }
        Ok(cascade)
    }
}
