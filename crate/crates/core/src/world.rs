//! Kinematic multi-UAV world.
//!
//! Each UAV is a point mass that follows its commanded velocity for one
//! `dt`. Attitude is cosmetic: yaw tracks the horizontal heading and roll
//! and pitch stay zero. A move that would enter an obstacle stops at the
//! contact point, zeroes the velocity and pays the collision penalty; the
//! episode continues.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::WorldError;
use crate::geom::{add, dist, is_finite, lerp, norm, scale, sub, Vec3};
use crate::scenario::ScenarioMap;

pub const STATE_DIM: usize = 12;
pub const ACTION_DIM: usize = 4;

const SUBSTEPS: usize = 16;
const BISECT_ITERS: usize = 60;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    pub position: Vec3,
    pub euler: Vec3,
    pub velocity: Vec3,
    pub angular_velocity: Vec3,
}

impl UavState {
    pub fn at(position: Vec3) -> Self {
        Self {
            position,
            ..Self::default()
        }
    }

    /// `[x, y, z, roll, pitch, yaw, vx, vy, vz, wx, wy, wz]`.
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        let mut out = [0.0; STATE_DIM];
        out[0..3].copy_from_slice(&self.position);
        out[3..6].copy_from_slice(&self.euler);
        out[6..9].copy_from_slice(&self.velocity);
        out[9..12].copy_from_slice(&self.angular_velocity);
        out
    }
}

/// Commanded direction and normalized speed, each channel in `[-1, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ControlAction {
    pub direction: Vec3,
    pub magnitude: f64,
}

impl ControlAction {
    pub fn from_raw(raw: [f64; ACTION_DIM]) -> Self {
        Self {
            direction: [raw[0], raw[1], raw[2]],
            magnitude: raw[3],
        }
    }

    pub fn hover() -> Self {
        Self::default()
    }

    pub fn to_raw(self) -> [f64; ACTION_DIM] {
        [self.direction[0], self.direction[1], self.direction[2], self.magnitude]
    }

    pub fn is_finite(&self) -> bool {
        is_finite(self.direction) && self.magnitude.is_finite()
    }

    pub fn clamped(self) -> Self {
        let c = |v: f64| v.clamp(-1.0, 1.0);
        Self {
            direction: self.direction.map(c),
            magnitude: c(self.magnitude),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub r_col: f64,
    pub r_free: f64,
    pub clearance_free: f64,
    /// Flip the progress term so that approaching the target is negative.
    pub recede_positive_progress: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.45,
            lambda2: 0.30,
            lambda3: 0.25,
            r_col: -1.0,
            r_free: 0.04,
            clearance_free: 0.5,
            recede_positive_progress: false,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_trans: f64,
    pub r_col_applied: f64,
    pub r_free_applied: f64,
    pub r_total: f64,
}

/// Distance progress toward the target plus a bonus near it.
pub fn transfer_reward(x_prev: Vec3, x_now: Vec3, x_target: Vec3) -> f64 {
    let d_prev = dist(x_target, x_prev);
    let d_now = dist(x_target, x_now);
    (d_prev - d_now) + (2.0 - d_now * d_now).max(0.0)
}

impl RewardConfig {
    pub fn transfer(&self, x_prev: Vec3, x_now: Vec3, x_target: Vec3) -> f64 {
        if self.recede_positive_progress {
            let d_prev = dist(x_target, x_prev);
            let d_now = dist(x_target, x_now);
            (d_now - d_prev) + (2.0 - d_now * d_now).max(0.0)
        } else {
            transfer_reward(x_prev, x_now, x_target)
        }
    }

    /// Reward for one live agent step.
    pub fn breakdown(&self, x_prev: Vec3, x_now: Vec3, x_target: Vec3, clearance: f64, collided: bool) -> RewardBreakdown {
        let r_trans = self.transfer(x_prev, x_now, x_target);
        let r_col_applied = if collided { self.r_col } else { 0.0 };
        let r_free_applied = if clearance > self.clearance_free { self.r_free } else { 0.0 };
        RewardBreakdown {
            r_trans,
            r_col_applied,
            r_free_applied,
            r_total: self.lambda1 * r_trans + self.lambda2 * r_col_applied + self.lambda3 * r_free_applied,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub dt: f64,
    pub v_max: f64,
    pub d_success: f64,
    pub max_steps: usize,
    pub uav_collisions: bool,
    pub uav_radius: f64,
    pub reward: RewardConfig,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            v_max: 3.0,
            d_success: 1.0,
            max_steps: 400,
            uav_collisions: false,
            uav_radius: 0.3,
            reward: RewardConfig::default(),
        }
    }
}

/// Distance to the nearest obstacle surface, `f64::INFINITY` on an empty map.
pub fn clearance(position: Vec3, map: &ScenarioMap) -> f64 {
    map.clearance(position)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    /// Zeroed for agents that had already finished.
    pub rewards: Vec<RewardBreakdown>,
    pub dones: Vec<bool>,
    pub collisions: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorldState {
    pub map: Arc<ScenarioMap>,
    pub config: WorldConfig,
    pub uav_states: Vec<UavState>,
    pub goals: Vec<Vec3>,
    pub step_index: usize,
    /// Agent reached its goal and is frozen.
    pub reached: Vec<bool>,
    pub done_flags: Vec<bool>,
}

impl WorldState {
    pub fn reset(map: Arc<ScenarioMap>, m: usize, config: WorldConfig) -> Result<Self, WorldError> {
        if m > map.spawn_points.len() || m > map.goal_points.len() {
            return Err(WorldError::TooManyAgents {
                requested: m,
                available: map.spawn_points.len().min(map.goal_points.len()),
            });
        }
        let uav_states = map.spawn_points[..m].iter().map(|&p| UavState::at(p)).collect();
        let goals = map.goal_points[..m].to_vec();
        Ok(Self {
            map,
            config,
            uav_states,
            goals,
            step_index: 0,
            reached: vec![false; m],
            done_flags: vec![false; m],
        })
    }

    pub fn agent_count(&self) -> usize {
        self.uav_states.len()
    }

    pub fn positions(&self) -> Vec<Vec3> {
        self.uav_states.iter().map(|s| s.position).collect()
    }

    /// Agents still flying (not at their goal).
    pub fn live(&self) -> Vec<bool> {
        self.reached.iter().map(|r| !r).collect()
    }

    pub fn is_over(&self) -> bool {
        self.done_flags.iter().all(|&d| d)
    }

    pub fn distance_to_goal(&self, i: usize) -> f64 {
        dist(self.uav_states[i].position, self.goals[i])
    }

    pub fn step(&mut self, actions: &[ControlAction]) -> Result<StepOutcome, WorldError> {
        let m = self.agent_count();
        if actions.len() != m {
            return Err(WorldError::DimensionMismatch {
                expected: m,
                got: actions.len(),
            });
        }
        if let Some(agent) = actions.iter().position(|a| !a.is_finite()) {
            return Err(WorldError::NonFiniteAction { agent });
        }
        if self.is_over() {
            return Err(WorldError::EpisodeOver);
        }
        let cfg = self.config.clone();
        let prev: Vec<Vec3> = self.positions();
        let mut next = prev.clone();
        let mut collisions = vec![false; m];
        for i in 0..m {
            if self.reached[i] {
                continue;
            }
            let a = actions[i].clamped();
            let n = norm(a.direction);
            let target = if n > 1e-12 {
                let speed = cfg.v_max * (a.magnitude + 1.0) / 2.0;
                self.clamp_to_arena(add(prev[i], scale(a.direction, speed * cfg.dt / n)))
            } else {
                prev[i]
            };
            let (p, hit) = resolve_motion(&self.map, prev[i], target);
            next[i] = p;
            collisions[i] = hit;
        }
        if cfg.uav_collisions {
            let limit = 2.0 * cfg.uav_radius;
            let mut bumped = vec![false; m];
            for i in 0..m {
                for j in i + 1..m {
                    if !self.reached[i] && !self.reached[j] && dist(next[i], next[j]) < limit {
                        bumped[i] = true;
                        bumped[j] = true;
                    }
                }
            }
            for i in 0..m {
                if bumped[i] {
                    next[i] = prev[i];
                    collisions[i] = true;
                }
            }
        }

        self.step_index += 1;
        let mut rewards = vec![RewardBreakdown::default(); m];
        for i in 0..m {
            if self.reached[i] {
                continue;
            }
            let clear = self.map.clearance(next[i]);
            rewards[i] = cfg.reward.breakdown(prev[i], next[i], self.goals[i], clear, collisions[i]);
            let s = &mut self.uav_states[i];
            let velocity = if collisions[i] {
                [0.0; 3]
            } else {
                scale(sub(next[i], prev[i]), 1.0 / cfg.dt)
            };
            let yaw_prev = s.euler[2];
            let horizontal = velocity[0].hypot(velocity[1]);
            let yaw = if horizontal > 1e-9 { velocity[1].atan2(velocity[0]) } else { yaw_prev };
            s.position = next[i];
            s.velocity = velocity;
            s.euler = [0.0, 0.0, yaw];
            s.angular_velocity = [0.0, 0.0, wrap_angle(yaw - yaw_prev) / cfg.dt];
            if dist(next[i], self.goals[i]) < cfg.d_success {
                self.reached[i] = true;
                s.velocity = [0.0; 3];
                s.angular_velocity = [0.0; 3];
            }
        }
        let truncated = self.step_index >= cfg.max_steps;
        for i in 0..m {
            self.done_flags[i] = self.reached[i] || truncated;
        }
        Ok(StepOutcome {
            rewards,
            dones: self.done_flags.clone(),
            collisions,
        })
    }

    fn clamp_to_arena(&self, p: Vec3) -> Vec3 {
        let s = &self.map.spec;
        [
            p[0].clamp(0.0, s.arena_x),
            p[1].clamp(0.0, s.arena_y),
            p[2].clamp(0.0, s.altitude_max),
        ]
    }
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let w = (a + std::f64::consts::PI).rem_euclid(two_pi) - std::f64::consts::PI;
    if w <= -std::f64::consts::PI {
        w + two_pi
    } else {
        w
    }
}

/// Moves from `from` toward `to`, stopping at the first obstacle contact.
///
/// The segment is sampled at `SUBSTEPS` points; the first penetrating
/// sample is bisected against the last free one and the free endpoint is
/// kept, so the result never has negative clearance.
pub fn resolve_motion(map: &ScenarioMap, from: Vec3, to: Vec3) -> (Vec3, bool) {
    let reach = dist(from, to);
    let near: Vec<_> = map.obstacles.iter().filter(|o| o.sdf(from) <= reach + 1e-9).collect();
    if near.is_empty() {
        return (to, false);
    }
    let inside = |p: Vec3| near.iter().any(|o| o.sdf(p) < 0.0);
    let point = |t: f64| if t == 1.0 { to } else { lerp(from, to, t) };
    let mut lo = 0.0;
    for k in 1..=SUBSTEPS {
        let t = k as f64 / SUBSTEPS as f64;
        if inside(point(t)) {
            let mut hi = t;
            for _ in 0..BISECT_ITERS {
                let mid = 0.5 * (lo + hi);
                if inside(point(mid)) {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return (point(lo), true);
        }
        lo = t;
    }
    (to, false)
}
