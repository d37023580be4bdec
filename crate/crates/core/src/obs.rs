//! Local observations and the per-drone MDP token triples.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::geom::{dist, Vec3};
use crate::scenario::ScenarioMap;
use crate::world::{UavState, WorldState, ACTION_DIM, STATE_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObsConfig {
    /// Action history length.
    pub history: usize,
    /// Neighbor slots per agent.
    pub neighbors: usize,
    pub sensing_range: f64,
    /// Append `ray_count` horizontal range readings to the observation.
    pub ray_sensor: bool,
    pub ray_count: usize,
    pub ray_range: f64,
}

impl Default for ObsConfig {
    fn default() -> Self {
        Self {
            history: 15,
            neighbors: 4,
            sensing_range: 10.0,
            ray_sensor: false,
            ray_count: 8,
            ray_range: 10.0,
        }
    }
}

impl ObsConfig {
    pub fn obs_dim(&self) -> usize {
        STATE_DIM + ACTION_DIM * self.history + if self.ray_sensor { self.ray_count } else { 0 }
    }

    pub fn slots(&self) -> usize {
        self.neighbors + 1
    }
}

/// Bounded log of the most recent actions, oldest first.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ActionHistory {
    capacity: usize,
    buf: VecDeque<[f64; ACTION_DIM]>,
}

impl ActionHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            buf: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, action: [f64; ACTION_DIM]) {
        if self.capacity == 0 {
            return;
        }
        if self.buf.len() == self.capacity {
            self.buf.pop_front();
        }
        self.buf.push_back(action);
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64; ACTION_DIM]> {
        self.buf.iter()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub state: [f64; STATE_DIM],
    /// `history` rows, most recent last, zero rows before the episode start.
    pub action_history: Vec<[f64; ACTION_DIM]>,
    pub rays: Vec<f64>,
}

impl Observation {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(STATE_DIM + ACTION_DIM * self.action_history.len() + self.rays.len());
        v.extend_from_slice(&self.state);
        for a in &self.action_history {
            v.extend_from_slice(a);
        }
        v.extend_from_slice(&self.rays);
        v
    }
}

pub fn build_observation(state: &UavState, history: &ActionHistory, cfg: &ObsConfig) -> Observation {
    let missing = cfg.history.saturating_sub(history.len());
    let mut action_history = vec![[0.0; ACTION_DIM]; missing];
    let skip = history.len().saturating_sub(cfg.history);
    action_history.extend(history.iter().skip(skip).copied());
    Observation {
        state: state.to_array(),
        action_history,
        rays: Vec::new(),
    }
}

/// Observation with the optional range sensor filled in from the map.
pub fn observe(state: &UavState, history: &ActionHistory, map: &ScenarioMap, cfg: &ObsConfig) -> Observation {
    let mut o = build_observation(state, history, cfg);
    if cfg.ray_sensor {
        o.rays = ray_ranges(state.position, map, cfg.ray_count, cfg.ray_range);
    }
    o
}

/// Normalized free distance along `count` evenly spaced horizontal rays.
pub fn ray_ranges(origin: Vec3, map: &ScenarioMap, count: usize, range: f64) -> Vec<f64> {
    (0..count)
        .map(|k| {
            let a = std::f64::consts::TAU * k as f64 / count as f64;
            let dir = [a.cos(), a.sin(), 0.0];
            let mut t = 0.0;
            for _ in 0..128 {
                let p = [origin[0] + dir[0] * t, origin[1] + dir[1] * t, origin[2]];
                let d = map.clearance(p);
                if d < 1e-4 || t >= range {
                    break;
                }
                t += d;
            }
            t.min(range) / range
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NeighborSet {
    /// Nearest first, ties by ascending id.
    pub ids: Vec<usize>,
    /// One flag per neighbor slot.
    pub presence: Vec<bool>,
}

/// Up to `cfg.neighbors` closest live agents within the sensing range.
pub fn nearest_neighbors(positions: &[Vec3], live: &[bool], i: usize, cfg: &ObsConfig) -> NeighborSet {
    let mut cands: Vec<(f64, usize)> = positions
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i && live.get(j).copied().unwrap_or(true))
        .map(|(j, p)| (dist(positions[i], *p), j))
        .filter(|&(d, _)| d <= cfg.sensing_range)
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cands.truncate(cfg.neighbors);
    let ids: Vec<usize> = cands.into_iter().map(|(_, j)| j).collect();
    let presence = (0..cfg.neighbors).map(|k| k < ids.len()).collect();
    NeighborSet { ids, presence }
}

/// One drone's (observation, previous action, previous reward) triple.
#[derive(Clone, Debug, PartialEq)]
pub struct MdpFeature {
    /// Observation plus presence flag.
    pub obs_aug: Vec<f64>,
    /// Previous action plus presence flag.
    pub act_aug: [f64; ACTION_DIM + 1],
    pub rew: f64,
}

impl MdpFeature {
    pub fn padded(obs_dim: usize) -> Self {
        Self {
            obs_aug: vec![0.0; obs_dim + 1],
            act_aug: [0.0; ACTION_DIM + 1],
            rew: 0.0,
        }
    }

    pub fn present(&self) -> bool {
        self.act_aug[ACTION_DIM] == 1.0
    }
}

/// Slot 0 is the agent itself, then its neighbors, then padding.
pub fn build_mdp_tokens(
    i: usize,
    world: &WorldState,
    histories: &[ActionHistory],
    prev_actions: &[[f64; ACTION_DIM]],
    prev_rewards: &[f64],
    cfg: &ObsConfig,
) -> Vec<MdpFeature> {
    let positions = world.positions();
    let neighbors = nearest_neighbors(&positions, &world.live(), i, cfg);
    let feature = |j: usize| {
        let mut obs_aug = observe(&world.uav_states[j], &histories[j], &world.map, cfg).to_vec();
        obs_aug.push(1.0);
        let mut act_aug = [1.0; ACTION_DIM + 1];
        act_aug[..ACTION_DIM].copy_from_slice(&prev_actions[j]);
        MdpFeature {
            obs_aug,
            act_aug,
            rew: prev_rewards[j],
        }
    };
    let mut tokens = Vec::with_capacity(cfg.slots());
    tokens.push(feature(i));
    tokens.extend(neighbors.ids.iter().map(|&j| feature(j)));
    tokens.resize(cfg.slots(), MdpFeature::padded(cfg.obs_dim()));
    tokens
}
