//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! mode = "zero_shot"
//!
//! [train]
//! updates = 50
//! maps = [{ scene = "pillar", density = 0.1, seed = 1 }, { scene = "cylinder", density = 0.1, seed = 2 }]
//!
//! [eval]
//! episodes = 5
//! maps = [{ scene = "mixed", density = 0.1, seed = 3 }]
//!
//! [ppo]
//! horizon = 64
//! ```
//!
//! Every section falls back to the defaults of its type.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::error::{ConfigError, PpoError};
use crate::obs::ObsConfig;
use crate::ppo::{PpoConfig, TrainOptions, TrainSetup};
use crate::scenario::{generate_scenario, load_scenario, ScenarioMap, ScenarioSpec, SceneType};
use crate::world::WorldConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Eval maps must not appear in training.
    #[default]
    ZeroShot,
    NonTransfer,
}

/// A generated map or a scenario file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MapRef {
    File {
        file: PathBuf,
    },
    Generated {
        scene: SceneType,
        density: f64,
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        arena_x: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        arena_y: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        altitude_max: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target_count: Option<usize>,
    },
}

impl MapRef {
    pub fn generated(scene: SceneType, density: f64, seed: u64) -> Self {
        MapRef::Generated {
            scene,
            density,
            seed,
            arena_x: None,
            arena_y: None,
            altitude_max: None,
            target_count: None,
        }
    }

    pub fn spec(&self) -> Option<ScenarioSpec> {
        match self {
            MapRef::File { .. } => None,
            MapRef::Generated {
                scene,
                density,
                seed,
                arena_x,
                arena_y,
                altitude_max,
                target_count,
            } => {
                let mut s = ScenarioSpec::new(*scene, *density, *seed);
                s.arena_x = arena_x.unwrap_or(s.arena_x);
                s.arena_y = arena_y.unwrap_or(s.arena_y);
                s.altitude_max = altitude_max.unwrap_or(s.altitude_max);
                s.target_count = target_count.unwrap_or(s.target_count);
                Some(s)
            }
        }
    }

    /// Relative file paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<ScenarioMap, PpoError> {
        match (self, self.spec()) {
            (MapRef::File { file }, _) => Ok(load_scenario(&base.join(file))?),
            (_, Some(spec)) => Ok(generate_scenario(&spec)?),
            _ => unreachable!("generated refs always have a spec"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub maps: Vec<MapRef>,
    pub updates: usize,
    /// Stop once this many episodes have been logged.
    pub total_episodes: Option<usize>,
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            maps: Vec::new(),
            updates: 100,
            total_episodes: None,
            checkpoint_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub maps: Vec<MapRef>,
    pub episodes: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            maps: Vec::new(),
            episodes: 5,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub deterministic: bool,
    pub mode: EvalMode,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub model: ModelConfig,
    pub obs: ObsConfig,
    pub world: WorldConfig,
    pub ppo: PpoConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.into(),
            source,
        })?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configs always serialize")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.ppo.validate().map_err(ConfigError::Invalid)?;
        self.model_config().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for m in self.train.maps.iter().chain(&self.eval.maps) {
            if let Some(spec) = m.spec() {
                spec.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        Ok(())
    }

    /// Model config with the observation-derived widths filled in.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.obs_dim = self.obs.obs_dim();
        m.encoder.neighbors = self.obs.neighbors;
        m
    }

    pub fn setup(&self, maps: &[Arc<ScenarioMap>]) -> TrainSetup {
        TrainSetup {
            model: self.model_config(),
            obs: self.obs.clone(),
            world: self.world.clone(),
            ppo: self.ppo.clone(),
            seed: self.seed,
            scenario_ids: maps.iter().map(|m| m.scenario_id.clone()).collect(),
        }
    }

    pub fn train_options(&self, out_dir: &Path) -> TrainOptions {
        TrainOptions {
            updates: self.train.updates,
            total_episodes: self.train.total_episodes,
            checkpoint_every: self.train.checkpoint_every,
            deterministic: self.deterministic,
            out_dir: out_dir.to_path_buf(),
        }
    }
}

pub fn load_maps(refs: &[MapRef], base: &Path) -> Result<Vec<Arc<ScenarioMap>>, PpoError> {
    refs.iter().map(|r| r.load(base).map(Arc::new)).collect()
}
