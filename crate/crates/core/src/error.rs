use std::path::PathBuf;

use dtppo_autodiff::{AutodiffError, CheckpointError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("invalid scenario spec: {0}")]
    InvalidSpec(String),
    #[error("could not reach density {density} after {attempts} placement attempts")]
    DensityInfeasible { density: f64, attempts: usize },
    #[error("could not place {count} spawn/goal pairs in the arena")]
    SpawnInfeasible { count: usize },
    #[error("scenario file version {found}, expected {expected}")]
    FormatVersionMismatch { found: u32, expected: u32 },
    #[error("corrupt scenario file at byte {offset}: {reason}")]
    CorruptFile { offset: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum WorldError {
    #[error("requested {requested} agents but the map has {available} spawn points")]
    TooManyAgents { requested: usize, available: usize },
    #[error("expected {expected} actions, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("action for agent {agent} is not finite")]
    NonFiniteAction { agent: usize },
    #[error("episode is already over")]
    EpisodeOver,
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("temporal window of {len} exceeds horizon {horizon}")]
    WindowTooLong { len: usize, horizon: usize },
    #[error("conflicting ablation flags: {0}")]
    ConflictingFlags(String),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("no scenarios to train on")]
    NoScenarios,
    #[error("non-finite {what} at update {update}; dump written to {dump}")]
    NonFiniteLoss {
        what: String,
        update: usize,
        dump: String,
    },
    #[error("checkpoint does not match the run: {0}")]
    ConfigMismatch(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl From<AutodiffError> for PpoError {
    fn from(e: AutodiffError) -> Self {
        PpoError::Model(ModelError::Autodiff(e))
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("checkpoint does not match the maps: {0}")]
    ConfigMismatch(String),
    #[error("eval map {0} was also used for training")]
    ZeroShotViolation(String),
    #[error("need {needed} maps, pool has {available}")]
    InsufficientMaps { needed: usize, available: usize },
    #[error("malformed episode log at line {line}: {reason}")]
    BadLog { line: usize, reason: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl From<ScenarioError> for HarnessError {
    fn from(e: ScenarioError) -> Self {
        HarnessError::Ppo(PpoError::Scenario(e))
    }
}

impl From<ModelError> for HarnessError {
    fn from(e: ModelError) -> Self {
        HarnessError::Ppo(PpoError::Model(e))
    }
}

impl From<WorldError> for HarnessError {
    fn from(e: WorldError) -> Self {
        HarnessError::Ppo(PpoError::World(e))
    }
}

impl From<CheckpointError> for HarnessError {
    fn from(e: CheckpointError) -> Self {
        HarnessError::Ppo(PpoError::Checkpoint(e))
    }
}
