//! Runtime configuration, loaded from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::critic::CriticConfig;
use crate::fleet::{HEARTBEAT_INTERVAL, HEARTBEAT_TIMEOUT};
use crate::model::Tick;
use crate::scheduler::SchedulingConfig;

/// Environment variable naming a config file.
pub const CONFIG_ENV: &str = "EFLEET_CONFIG";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LivenessConfig {
    pub heartbeat_interval: Tick,
    pub heartbeat_timeout: Tick,
}

impl Default for LivenessConfig {
    fn default() -> Self {
        Self { heartbeat_interval: HEARTBEAT_INTERVAL, heartbeat_timeout: HEARTBEAT_TIMEOUT }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OrchestratorConfig {
    pub clarification_timeout: Tick,
    /// Yaw increment of the search sweep, radians.
    pub sweep_delta_yaw: f64,
    /// Attempts per step before the critic's Refine turns into a replan.
    pub max_step_attempts: u32,
    pub max_replans: u32,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self { clarification_timeout: 200, sweep_delta_yaw: 0.5, max_step_attempts: 3, max_replans: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RuntimeConfig {
    pub scheduling: SchedulingConfig,
    pub critic: CriticConfig,
    pub liveness: LivenessConfig,
    pub orchestrator: OrchestratorConfig,
}

impl RuntimeConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), reason: e.to_string() })?;
        Self::from_toml(&text)
    }

    /// Explicit path first, then `EFLEET_CONFIG`, else defaults.
    pub fn resolve(path: Option<&Path>) -> Result<Self, ConfigError> {
        match path {
            Some(p) => Self::load(p),
            None => match std::env::var_os(CONFIG_ENV) {
                Some(p) if !p.is_empty() => Self::load(Path::new(&p)),
                _ => Ok(Self::default()),
            },
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.scheduling.validate().map_err(ConfigError::Invalid)?;
        self.critic.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let l = &self.liveness;
        if l.heartbeat_interval == 0 || l.heartbeat_timeout <= l.heartbeat_interval {
            return Err(ConfigError::Invalid("heartbeat timeout must exceed a positive interval".into()));
        }
        let o = &self.orchestrator;
        if o.clarification_timeout == 0 || o.max_step_attempts == 0 {
            return Err(ConfigError::Invalid("clarification timeout and step attempts must be positive".into()));
        }
        if !(o.sweep_delta_yaw > 0.0 && o.sweep_delta_yaw <= std::f64::consts::PI) {
            return Err(ConfigError::Invalid("sweep_delta_yaw must lie in (0, pi]".into()));
        }
        Ok(())
    }
}
