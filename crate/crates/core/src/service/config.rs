use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::ServiceError;
use crate::exec::Exec;
use crate::interpreter::{InterpreterConfig, LlmBackend, MockLlm, PromptTemplate, RemoteLlm};
use crate::lift::ClusterParams;
use crate::temporal::{AssociationParams, KinematicModel};
use crate::vision::{MockVision, RemoteVision, VisionBackend, DEFAULT_MASK_MARGIN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    KeyframeInterpolate,
    #[default]
    PerFrameFuse,
}

/// Exactly one of `mock` (scenario file) or `url` (remote server).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendSpec {
    pub mock: Option<PathBuf>,
    pub url: Option<String>,
    pub timeout_secs: u64,
}

impl Default for BackendSpec {
    fn default() -> Self {
        Self {
            mock: None,
            url: None,
            timeout_secs: 30,
        }
    }
}

impl BackendSpec {
    pub fn mock(path: impl Into<PathBuf>) -> Self {
        Self {
            mock: Some(path.into()),
            ..Default::default()
        }
    }

    pub fn url(url: impl Into<String>) -> Self {
        Self {
            url: Some(url.into()),
            ..Default::default()
        }
    }

    fn check(&self, what: &str) -> Result<(), ServiceError> {
        match (&self.mock, &self.url) {
            (Some(_), None) | (None, Some(_)) => Ok(()),
            _ => Err(ServiceError::Config(format!("{what}: set exactly one of `mock` or `url`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub llm: BackendSpec,
    pub vision: BackendSpec,
    pub interpreter: InterpreterConfig,
    pub prompt: PromptTemplate,
    pub cluster: ClusterParams,
    pub kinematic: KinematicModel,
    pub association: AssociationParams,
    pub mode: Mode,
    /// Projection row of the labeling camera.
    pub camera_id: String,
    /// Pixels a mask may extend past its prompt box.
    pub mask_margin: f64,
    /// Concurrent backend calls across all sessions.
    pub max_in_flight: usize,
    pub exec: Exec,
    /// Where session snapshots are written; none keeps sessions in memory.
    pub state_dir: Option<PathBuf>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            llm: BackendSpec::default(),
            vision: BackendSpec::default(),
            interpreter: InterpreterConfig::default(),
            prompt: PromptTemplate::default(),
            cluster: ClusterParams::default(),
            kinematic: KinematicModel::default(),
            association: AssociationParams::default(),
            mode: Mode::default(),
            camera_id: "P2".into(),
            mask_margin: DEFAULT_MASK_MARGIN,
            max_in_flight: 4,
            exec: Exec::default(),
            state_dir: None,
        }
    }
}

impl PipelineConfig {
    /// Parses a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = std::fs::read_to_string(path).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.llm.mock, &mut cfg.vision.mock, &mut cfg.state_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ServiceError> {
        toml::from_str(text).map_err(|e| ServiceError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        self.llm.check("llm")?;
        self.vision.check("vision")?;
        self.interpreter.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        self.cluster.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        self.kinematic.validate().map_err(|e| ServiceError::Config(e.to_string()))?;
        if !(self.mask_margin >= 0.0) {
            return Err(ServiceError::Config("mask_margin must be non-negative".into()));
        }
        if self.max_in_flight == 0 {
            return Err(ServiceError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    /// Builds the two backends, loading mock scenarios eagerly so a bad
    /// file fails at startup.
    pub fn build_backends(&self) -> Result<(Arc<dyn LlmBackend>, Arc<dyn VisionBackend>), ServiceError> {
        self.validate()?;
        let llm: Arc<dyn LlmBackend> = match (&self.llm.mock, &self.llm.url) {
            (Some(path), _) => Arc::new(MockLlm::from_path(path).map_err(|e| ServiceError::Config(e.to_string()))?),
            (_, Some(url)) => Arc::new(RemoteLlm::new(url, Duration::from_secs(self.llm.timeout_secs))),
            _ => unreachable!("checked by validate"),
        };
        let vision: Arc<dyn VisionBackend> = match (&self.vision.mock, &self.vision.url) {
            (Some(path), _) => Arc::new(MockVision::from_path(path).map_err(|e| ServiceError::Config(e.to_string()))?),
            (_, Some(url)) => Arc::new(RemoteVision::new(url, Duration::from_secs(self.vision.timeout_secs))),
            _ => unreachable!("checked by validate"),
        };
        Ok((llm, vision))
    }
}
