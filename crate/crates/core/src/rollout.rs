//! Episode driver shared by training, evaluation and the random baseline.
//!
//! Every agent keeps the chronological list of its steps in the current
//! episode; the policy window is the last `L` entries of that list. Step
//! embeddings are computed once when a step is taken and reused for later
//! windows, which gives the same numbers as a full recompute.

use std::sync::Arc;

use dtppo_autodiff::{Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::{spatial_rows, EncoderInput, ModelConfig, StepTokens};
use crate::error::PpoError;
use crate::obs::{build_mdp_tokens, ActionHistory, ObsConfig};
use crate::policy::{actions_tensor, forward_with, log_prob};
use crate::scenario::ScenarioMap;
use crate::world::{ControlAction, WorldConfig, WorldState, ACTION_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    /// Draw from the Gaussian policy.
    Sample,
    /// Use the policy mean.
    Greedy,
    /// Uniform raw actions in `[-1, 1]`, ignoring the network.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    /// World steps; the last episode is cut when the budget runs out.
    Steps(usize),
    /// Complete episodes.
    Episodes(usize),
}

/// Everything the driver needs besides the map and parameters.
#[derive(Clone, Debug)]
pub struct DriverConfig {
    pub model: ModelConfig,
    pub obs: ObsConfig,
    pub world: WorldConfig,
    /// Agents per scenario, capped by the map's spawn count.
    pub agents: usize,
    pub mode: ActionMode,
    pub budget: Budget,
    /// Keep per-step reward logs.
    pub keep_logs: bool,
}

/// One agent-step with everything needed to re-run the policy on it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub scenario: usize,
    pub episode: usize,
    pub agent: usize,
    pub t: usize,
    /// Chronological step indices; the last one is this step.
    pub window: Vec<usize>,
    pub action: [f64; ACTION_DIM],
    pub log_prob: f64,
    pub value: f64,
    pub reward: f64,
    /// The agent reached its goal on this step.
    pub terminal: bool,
    /// Value of the next state when the trajectory is cut here.
    pub bootstrap: Option<f64>,
    pub advantage: f64,
    pub ret: f64,
}

impl Sample {
    pub fn ends_trajectory(&self) -> bool {
        self.terminal || self.bootstrap.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub scenario_id: String,
    pub episode: usize,
    pub agents: usize,
    pub steps: usize,
    /// False when the step budget cut the episode short.
    pub complete: bool,
    pub reached: usize,
    pub avg_transfer_reward: f64,
    pub avg_collision_penalty: f64,
    pub avg_free_space_reward: f64,
}

/// Raw reward terms of one agent-step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub scenario_id: String,
    pub episode: usize,
    pub agent: usize,
    pub t: usize,
    pub r_trans: f64,
    pub r_col: f64,
    pub r_free: f64,
    pub r_total: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ScenarioRollout {
    pub steps: Vec<StepTokens>,
    pub samples: Vec<Sample>,
    pub episodes: Vec<EpisodeRecord>,
    pub logs: Vec<StepLog>,
    pub world_steps: usize,
}

/// Per-agent reward sums, in agent order.
#[derive(Clone, Debug)]
pub struct EpisodeTotals {
    pub transfer: Vec<f64>,
    pub collision: Vec<f64>,
    pub free: Vec<f64>,
}

impl EpisodeTotals {
    pub fn new(agents: usize) -> Self {
        Self {
            transfer: vec![0.0; agents],
            collision: vec![0.0; agents],
            free: vec![0.0; agents],
        }
    }

    /// Collision penalties are accumulated as positive magnitudes.
    pub fn add(&mut self, agent: usize, r_trans: f64, r_col: f64, r_free: f64) {
        self.transfer[agent] += r_trans;
        self.collision[agent] += -r_col;
        self.free[agent] += r_free;
    }

    /// Agent-averaged (transfer, collision, free-space) totals.
    pub fn averages(&self) -> (f64, f64, f64) {
        let m = self.transfer.len() as f64;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / m;
        (mean(&self.transfer), mean(&self.collision), mean(&self.free))
    }
}

struct Decision {
    actions: Vec<[f64; ACTION_DIM]>,
    log_probs: Vec<f64>,
    values: Vec<f64>,
}

/// Runs the policy on `windows` (indices into `steps`) and picks actions.
fn decide(
    store: &ParamStore,
    cfg: &ModelConfig,
    steps: &[&StepTokens],
    spatial: &[&[f64]],
    windows: &[Vec<usize>],
    mode: ActionMode,
    rng: &mut ChaCha8Rng,
) -> Result<Decision, PpoError> {
    let b = windows.len();
    if mode == ActionMode::Uniform {
        let actions = (0..b)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..=1.0)))
            .collect();
        return Ok(Decision {
            actions,
            log_probs: vec![0.0; b],
            values: vec![0.0; b],
        });
    }
    let cached = if cfg.uses_spatial() {
        let d = cfg.encoder.d;
        Some(Tensor::from_vec(spatial.len(), d, spatial.concat())?)
    } else {
        None
    };
    let mut g = Graph::new(store);
    let out = forward_with(&mut g, cfg, EncoderInput { steps, windows }, cached)?;
    let mean = g.value(out.mean).clone();
    let log_std: Vec<f64> = g.value(out.log_std).data().to_vec();
    let actions: Vec<[f64; ACTION_DIM]> = (0..b)
        .map(|r| {
            let m = mean.row_slice(r);
            std::array::from_fn(|k| match mode {
                ActionMode::Greedy => m[k],
                _ => {
                    let z: f64 = rng.sample(StandardNormal);
                    m[k] + log_std[k].exp() * z
                }
            })
        })
        .collect();
    let a = g.constant(actions_tensor(&actions)?);
    let lp = log_prob(&mut g, out.mean, out.log_std, a)?;
    Ok(Decision {
        actions,
        log_probs: g.value(lp).data().to_vec(),
        values: g.value(out.value).data().to_vec(),
    })
}

struct Episode {
    world: WorldState,
    histories: Vec<ActionHistory>,
    prev_actions: Vec<[f64; ACTION_DIM]>,
    prev_rewards: Vec<f64>,
    /// Step indices per agent in this episode.
    traj: Vec<Vec<usize>>,
    /// Index of each agent's latest sample.
    last_sample: Vec<Option<usize>>,
    totals: EpisodeTotals,
}

impl Episode {
    fn new(map: Arc<ScenarioMap>, cfg: &DriverConfig) -> Result<Self, PpoError> {
        let m = cfg.agents.min(map.spawn_points.len());
        let world = WorldState::reset(map, m, cfg.world.clone())?;
        Ok(Self {
            world,
            histories: vec![ActionHistory::new(cfg.obs.history); m],
            prev_actions: vec![[0.0; ACTION_DIM]; m],
            prev_rewards: vec![0.0; m],
            traj: vec![Vec::new(); m],
            last_sample: vec![None; m],
            totals: EpisodeTotals::new(m),
        })
    }

    fn tokens(&self, i: usize, obs: &ObsConfig) -> StepTokens {
        StepTokens::from_features(&build_mdp_tokens(
            i,
            &self.world,
            &self.histories,
            &self.prev_actions,
            &self.prev_rewards,
            obs,
        ))
    }
}

/// Last `horizon` entries of a trajectory.
pub fn window_of(traj: &[usize], horizon: usize) -> Vec<usize> {
    traj[traj.len().saturating_sub(horizon)..].to_vec()
}

/// Rolls episodes on one map until the budget is spent.
pub fn rollout_scenario(
    store: &ParamStore,
    map: Arc<ScenarioMap>,
    scenario: usize,
    cfg: &DriverConfig,
    rng: &mut ChaCha8Rng,
) -> Result<ScenarioRollout, PpoError> {
    let horizon = cfg.model.encoder.horizon;
    let mut out = ScenarioRollout::default();
    let mut spatial: Vec<Vec<f64>> = Vec::new();
    let mut episode_index = 0;
    let embed = |steps: &[&StepTokens]| {
        if cfg.mode == ActionMode::Uniform {
            Ok(Vec::new())
        } else {
            spatial_rows(store, &cfg.model, steps)
        }
    };
    loop {
        match cfg.budget {
            Budget::Steps(n) if out.world_steps >= n => break,
            Budget::Episodes(k) if episode_index >= k => break,
            _ => {}
        }
        let mut ep = Episode::new(map.clone(), cfg)?;
        let m = ep.world.agent_count();
        let mut steps_taken = 0;
        let complete = loop {
            let live: Vec<usize> = (0..m).filter(|&i| !ep.world.done_flags[i]).collect();
            let cut = matches!(cfg.budget, Budget::Steps(n) if out.world_steps >= n);
            if live.is_empty() || cut {
                // trajectories that ended without reaching the goal need V(next)
                let pending: Vec<usize> = (0..m)
                    .filter(|&i| ep.last_sample[i].is_some_and(|s| !out.samples[s].terminal))
                    .collect();
                if !pending.is_empty() {
                    let extra: Vec<StepTokens> = pending.iter().map(|&i| ep.tokens(i, &cfg.obs)).collect();
                    let extra_refs: Vec<&StepTokens> = extra.iter().collect();
                    let extra_rows = embed(&extra_refs)?;
                    let mut local_steps: Vec<&StepTokens> = Vec::new();
                    let mut local_rows: Vec<&[f64]> = Vec::new();
                    let mut windows = Vec::new();
                    for (k, &i) in pending.iter().enumerate() {
                        let w = window_of(&ep.traj[i], horizon - 1);
                        let start = local_steps.len();
                        for &s in &w {
                            local_steps.push(&out.steps[s]);
                            if let Some(r) = spatial.get(s) {
                                local_rows.push(r);
                            }
                        }
                        local_steps.push(&extra[k]);
                        if let Some(r) = extra_rows.get(k) {
                            local_rows.push(r);
                        }
                        windows.push((start..local_steps.len()).collect());
                    }
                    let mode = if cfg.mode == ActionMode::Uniform { ActionMode::Uniform } else { ActionMode::Greedy };
                    let dec = decide(store, &cfg.model, &local_steps, &local_rows, &windows, mode, rng)?;
                    for (k, &i) in pending.iter().enumerate() {
                        let s = ep.last_sample[i].expect("pending agents have samples");
                        out.samples[s].bootstrap = Some(dec.values[k]);
                    }
                }
                break !cut;
            }

            let new: Vec<StepTokens> = live.iter().map(|&i| ep.tokens(i, &cfg.obs)).collect();
            let base = out.steps.len();
            let new_refs: Vec<&StepTokens> = new.iter().collect();
            spatial.extend(embed(&new_refs)?);
            out.steps.extend(new);
            for (k, &i) in live.iter().enumerate() {
                ep.traj[i].push(base + k);
            }
            let global_windows: Vec<Vec<usize>> = live.iter().map(|&i| window_of(&ep.traj[i], horizon)).collect();
            let mut local_steps: Vec<&StepTokens> = Vec::new();
            let mut local_rows: Vec<&[f64]> = Vec::new();
            let mut windows = Vec::with_capacity(live.len());
            for w in &global_windows {
                let start = local_steps.len();
                for &s in w {
                    local_steps.push(&out.steps[s]);
                    if let Some(r) = spatial.get(s) {
                        local_rows.push(r);
                    }
                }
                windows.push((start..local_steps.len()).collect::<Vec<usize>>());
            }
            let dec = decide(store, &cfg.model, &local_steps, &local_rows, &windows, cfg.mode, rng)?;

            let mut actions = vec![ControlAction::hover(); m];
            for (k, &i) in live.iter().enumerate() {
                actions[i] = ControlAction::from_raw(dec.actions[k]);
            }
            let t = ep.world.step_index;
            let outcome = ep.world.step(&actions)?;
            out.world_steps += 1;
            steps_taken += 1;
            for (k, &i) in live.iter().enumerate() {
                let r = &outcome.rewards[i];
                let applied = actions[i].clamped().to_raw();
                ep.histories[i].push(applied);
                ep.prev_actions[i] = applied;
                ep.prev_rewards[i] = r.r_total;
                ep.totals.add(i, r.r_trans, r.r_col_applied, r.r_free_applied);
                if cfg.keep_logs {
                    out.logs.push(StepLog {
                        scenario_id: map.scenario_id.clone(),
                        episode: episode_index,
                        agent: i,
                        t,
                        r_trans: r.r_trans,
                        r_col: r.r_col_applied,
                        r_free: r.r_free_applied,
                        r_total: r.r_total,
                    });
                }
                ep.last_sample[i] = Some(out.samples.len());
                out.samples.push(Sample {
                    scenario,
                    episode: episode_index,
                    agent: i,
                    t,
                    window: global_windows[k].clone(),
                    action: dec.actions[k],
                    log_prob: dec.log_probs[k],
                    value: dec.values[k],
                    reward: r.r_total,
                    terminal: ep.world.reached[i],
                    bootstrap: None,
                    advantage: 0.0,
                    ret: 0.0,
                });
            }
        };
        let (tr, col, free) = ep.totals.averages();
        out.episodes.push(EpisodeRecord {
            scenario_id: map.scenario_id.clone(),
            episode: episode_index,
            agents: m,
            steps: steps_taken,
            complete,
            reached: ep.world.reached.iter().filter(|&&r| r).count(),
            avg_transfer_reward: tr,
            avg_collision_penalty: col,
            avg_free_space_reward: free,
        });
        episode_index += 1;
        if !complete {
            break;
        }
    }
    Ok(out)
}

/// Independent stream per (seed, update, scenario).
pub fn scenario_rng(seed: u64, update: usize, scenario: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((update as u64) << 20) | scenario as u64);
    rng
}
