//! Rollout batches, advantage estimation, the clipped PPO objective and the
//! co-training loop.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use dtppo_autodiff::{adam_step, AdamConfig, Checkpoint, Graph, ParamStore, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{init_params, EncoderInput, ModelConfig, StepTokens};
use crate::error::PpoError;
use crate::obs::ObsConfig;
use crate::policy::{actions_tensor, entropy, forward, log_prob};
use crate::rollout::{rollout_scenario, scenario_rng, ActionMode, Budget, DriverConfig, EpisodeRecord, Sample, StepLog};
use crate::scenario::ScenarioMap;
use crate::world::{WorldConfig, ACTION_DIM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub clip_eps: f64,
    pub entropy_coef: f64,
    pub lr: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub gae_lambda: f64,
    pub epochs: usize,
    pub minibatch_size: usize,
    /// World steps per scenario per update.
    pub horizon: usize,
    /// Agents per scenario.
    pub agents: usize,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            clip_eps: 0.2,
            entropy_coef: 1e-2,
            lr: 5e-4,
            delta1: 1.0,
            delta2: 1.0,
            delta3: 1e-2,
            gae_lambda: 0.95,
            epochs: 10,
            minibatch_size: 256,
            horizon: 512,
            agents: 8,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(format!("clip_eps {} outside (0, 1)", self.clip_eps));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma {} outside (0, 1]", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(format!("gae_lambda {} outside [0, 1]", self.gae_lambda));
        }
        if self.delta3 < 0.0 {
            return Err("delta3 must be non-negative".into());
        }
        if self.minibatch_size == 0 || self.agents == 0 {
            return Err("minibatch_size and agents must be positive".into());
        }
        Ok(())
    }
}

/// Generalized advantage estimates and returns for a sequence of steps.
///
/// `dones[t]` ends an episode after step `t` (no bootstrap across it);
/// `last_value` is the value of the state after the final step.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    last_value: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), PpoError> {
    if rewards.len() != values.len() || rewards.len() != dones.len() {
        return Err(PpoError::LengthMismatch(format!(
            "rewards {}, values {}, dones {}",
            rewards.len(),
            values.len(),
            dones.len()
        )));
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { last_value };
        let keep = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next * keep - values[t];
        acc = delta + gamma * lambda * keep * acc;
        adv[t] = acc;
    }
    let ret = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, ret))
}

/// Shifts advantages to zero mean and unit standard deviation.
pub fn normalize(adv: &mut [f64]) {
    if adv.is_empty() {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-8;
    for a in adv.iter_mut() {
        *a = (*a - mean) / std;
    }
}

#[derive(Clone, Debug, Default)]
pub struct RolloutBatch {
    pub steps: Vec<StepTokens>,
    pub samples: Vec<Sample>,
    pub episodes: Vec<EpisodeRecord>,
    pub logs: Vec<StepLog>,
    /// World steps taken per scenario.
    pub world_steps: Vec<usize>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped into per-agent trajectories, in batch order.
    pub fn trajectories(&self) -> Vec<Vec<usize>> {
        let mut open: BTreeMap<(usize, usize, usize), Vec<usize>> = BTreeMap::new();
        let mut done = Vec::new();
        for (k, s) in self.samples.iter().enumerate() {
            let key = (s.scenario, s.episode, s.agent);
            open.entry(key).or_default().push(k);
            if s.ends_trajectory() {
                done.push(open.remove(&key).expect("just inserted"));
            }
        }
        done.extend(open.into_values());
        done.sort_by_key(|t| t[0]);
        done
    }

    /// Fills advantages and returns, then normalizes advantages.
    pub fn finish(&mut self, gamma: f64, lambda: f64) -> Result<(), PpoError> {
        for traj in self.trajectories() {
            let rewards: Vec<f64> = traj.iter().map(|&k| self.samples[k].reward).collect();
            let values: Vec<f64> = traj.iter().map(|&k| self.samples[k].value).collect();
            let dones: Vec<bool> = traj.iter().map(|&k| self.samples[k].terminal).collect();
            let last = &self.samples[*traj.last().expect("trajectories are non-empty")];
            let boot = if last.terminal { 0.0 } else { last.bootstrap.unwrap_or(0.0) };
            let (adv, ret) = compute_gae(&rewards, &values, &dones, boot, gamma, lambda)?;
            for (j, &k) in traj.iter().enumerate() {
                self.samples[k].advantage = adv[j];
                self.samples[k].ret = ret[j];
            }
        }
        let mut adv: Vec<f64> = self.samples.iter().map(|s| s.advantage).collect();
        normalize(&mut adv);
        for (s, a) in self.samples.iter_mut().zip(adv) {
            s.advantage = a;
        }
        Ok(())
    }
}

/// Rolls every scenario under one parameter snapshot and merges the
/// results in scenario order.
pub fn collect_rollouts(
    maps: &[Arc<ScenarioMap>],
    store: &ParamStore,
    driver: &DriverConfig,
    seed: u64,
    update: usize,
    parallel: bool,
) -> Result<RolloutBatch, PpoError> {
    if maps.is_empty() {
        return Err(PpoError::NoScenarios);
    }
    let run = |(k, map): (usize, &Arc<ScenarioMap>)| {
        let mut rng = scenario_rng(seed, update, k);
        rollout_scenario(store, map.clone(), k, driver, &mut rng)
    };
    let parts: Vec<_> = if parallel {
        maps.par_iter().enumerate().map(run).collect::<Result<_, _>>()?
    } else {
        maps.iter().enumerate().map(run).collect::<Result<_, _>>()?
    };
    let mut batch = RolloutBatch::default();
    for part in parts {
        let offset = batch.steps.len();
        batch.steps.extend(part.steps);
        batch.samples.extend(part.samples.into_iter().map(|mut s| {
            for w in s.window.iter_mut() {
                *w += offset;
            }
            s
        }));
        batch.episodes.extend(part.episodes);
        batch.logs.extend(part.logs);
        batch.world_steps.push(part.world_steps);
    }
    Ok(batch)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_actor: f64,
    pub l_critic: f64,
    pub l_pred: f64,
    pub l_total: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub approx_kl: f64,
    /// Largest `|ratio - 1|` in the minibatch.
    pub max_ratio_dev: f64,
}

impl LossReport {
    /// The weighted sum, in the same order the graph builds it.
    pub fn recompute_total(&self, cfg: &PpoConfig) -> f64 {
        cfg.delta1 * self.l_actor + cfg.delta2 * self.l_critic + cfg.delta3 * self.l_pred
            - cfg.entropy_coef * self.entropy
    }
}

/// Clipped surrogate objective of one sample.
pub fn clipped_surrogate(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

/// `-mean(min(rho A, clip(rho) A))` and the ratio column.
pub fn actor_loss(g: &mut Graph<'_>, log_prob: Var, old_log_prob: Var, adv: Var, eps: f64) -> Result<(Var, Var), PpoError> {
    let diff = g.sub(log_prob, old_log_prob)?;
    let ratio = g.exp(diff);
    let s1 = g.mul(ratio, adv)?;
    let clipped = g.clamp(ratio, 1.0 - eps, 1.0 + eps);
    let s2 = g.mul(clipped, adv)?;
    let m = g.minimum(s1, s2)?;
    let mean = g.mean(m);
    Ok((g.scale(mean, -1.0), ratio))
}

fn column(values: Vec<f64>) -> Result<Tensor, PpoError> {
    Ok(Tensor::from_vec(values.len(), 1, values)?)
}

/// Builds the combined loss on the samples `idx` of `batch`.
pub fn ppo_losses(
    g: &mut Graph<'_>,
    model: &ModelConfig,
    cfg: &PpoConfig,
    batch: &RolloutBatch,
    idx: &[usize],
) -> Result<(Var, LossReport), PpoError> {
    if idx.is_empty() {
        return Err(PpoError::EmptyBatch);
    }
    let mut local: BTreeMap<usize, usize> = BTreeMap::new();
    for &k in idx {
        for &s in &batch.samples[k].window {
            local.entry(s).or_insert(0);
        }
    }
    let order: Vec<usize> = local.keys().copied().collect();
    for (pos, s) in order.iter().enumerate() {
        local.insert(*s, pos);
    }
    let steps: Vec<&StepTokens> = order.iter().map(|&s| &batch.steps[s]).collect();
    let windows: Vec<Vec<usize>> = idx
        .iter()
        .map(|&k| batch.samples[k].window.iter().map(|s| local[s]).collect())
        .collect();
    let out = forward(g, model, EncoderInput { steps: &steps, windows: &windows })?;

    let samples: Vec<&Sample> = idx.iter().map(|&k| &batch.samples[k]).collect();
    let actions: Vec<[f64; ACTION_DIM]> = samples.iter().map(|s| s.action).collect();
    let a = g.constant(actions_tensor(&actions)?);
    let lp = log_prob(g, out.mean, out.log_std, a)?;
    let old = g.constant(column(samples.iter().map(|s| s.log_prob).collect())?);
    let adv = g.constant(column(samples.iter().map(|s| s.advantage).collect())?);
    let ret = g.constant(column(samples.iter().map(|s| s.ret).collect())?);

    let (l_actor, ratio) = actor_loss(g, lp, old, adv, cfg.clip_eps)?;
    let l_critic = g.mse(out.value, ret)?;
    let ent = entropy(g, out.log_std);

    let t1 = g.scale(l_actor, cfg.delta1);
    let t2 = g.scale(l_critic, cfg.delta2);
    let t3 = g.scale(out.pred_loss, cfg.delta3);
    let t4 = g.scale(ent, -cfg.entropy_coef);
    let total = g.add(t1, t2)?;
    let total = g.add(total, t3)?;
    let total = g.add(total, t4)?;

    let ratios = g.value(ratio).data();
    let n = ratios.len() as f64;
    let clip_fraction = ratios.iter().filter(|r| (*r - 1.0).abs() > cfg.clip_eps).count() as f64 / n;
    let approx_kl = ratios.iter().map(|r| (r - 1.0) - r.ln()).sum::<f64>() / n;
    let max_ratio_dev = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    let report = LossReport {
        l_actor: g.value(l_actor).item(),
        l_critic: g.value(l_critic).item(),
        l_pred: g.value(out.pred_loss).item(),
        l_total: g.value(total).item(),
        entropy: g.value(ent).item(),
        clip_fraction,
        approx_kl,
        max_ratio_dev,
    };
    Ok((total, report))
}

/// Everything that fixes a training run's trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub obs: ObsConfig,
    pub world: WorldConfig,
    pub ppo: PpoConfig,
    pub seed: u64,
    pub scenario_ids: Vec<String>,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<(), PpoError> {
        self.model.validate()?;
        self.ppo.validate().map_err(PpoError::ConfigMismatch)?;
        if self.model.obs_dim != self.obs.obs_dim() {
            return Err(PpoError::ConfigMismatch(format!(
                "model obs_dim {} but observations have {}",
                self.model.obs_dim,
                self.obs.obs_dim()
            )));
        }
        if self.model.encoder.neighbors != self.obs.neighbors {
            return Err(PpoError::ConfigMismatch(format!(
                "encoder has {} neighbor slots, observations {}",
                self.model.encoder.neighbors, self.obs.neighbors
            )));
        }
        Ok(())
    }

    pub fn driver(&self, mode: ActionMode, budget: Budget, keep_logs: bool) -> DriverConfig {
        DriverConfig {
            model: self.model.clone(),
            obs: self.obs.clone(),
            world: self.world.clone(),
            agents: self.ppo.agents,
            mode,
            budget,
            keep_logs,
        }
    }

    /// Canonical text stored in checkpoints.
    pub fn to_config_text(&self) -> Result<String, PpoError> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed updates.
    pub update: usize,
    pub episodes: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub updates: usize,
    /// Stop after the update in which this many episodes have been logged.
    pub total_episodes: Option<usize>,
    /// Checkpoint every this many updates (0 means only at exit).
    pub checkpoint_every: usize,
    pub deterministic: bool,
    pub out_dir: PathBuf,
}

/// Where the trainer writes.
pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.bin")
}

pub fn metrics_path(out_dir: &Path) -> PathBuf {
    out_dir.join("metrics.jsonl")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricRecord {
    Episode {
        update: usize,
        #[serde(flatten)]
        record: EpisodeRecord,
    },
    Update {
        update: usize,
        samples: usize,
        episodes: usize,
        #[serde(flatten)]
        report: LossReport,
    },
}

impl MetricRecord {
    pub fn update(&self) -> usize {
        match self {
            MetricRecord::Episode { update, .. } | MetricRecord::Update { update, .. } => *update,
        }
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>, PpoError> {
    let f = File::open(path).map_err(|source| PpoError::Io {
        path: path.into(),
        source,
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|source| PpoError::Io {
            path: path.into(),
            source,
        })?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub store: ParamStore,
    pub updates: usize,
    pub episodes: usize,
    pub last_report: Option<LossReport>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PpoError + '_ {
    move |source| PpoError::Io {
        path: path.into(),
        source,
    }
}

fn save_checkpoint(setup: &TrainSetup, store: &ParamStore, meta: &CheckpointMeta, out_dir: &Path) -> Result<(), PpoError> {
    let ckpt = Checkpoint {
        config: setup.to_config_text()?,
        meta: serde_json::to_string(meta)?,
        store: store.clone(),
    };
    ckpt.save(&checkpoint_path(out_dir))?;
    Ok(())
}

/// Parameters and progress from a checkpoint written by [`train`].
pub fn load_training_state(path: &Path, setup: &TrainSetup) -> Result<(ParamStore, CheckpointMeta), PpoError> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.config != setup.to_config_text()? {
        return Err(PpoError::ConfigMismatch(format!(
            "checkpoint {} was written by a different run configuration",
            path.display()
        )));
    }
    let meta: CheckpointMeta = serde_json::from_str(&ckpt.meta)?;
    Ok((ckpt.store, meta))
}

fn dump_minibatch(out_dir: &Path, update: usize, batch: &RolloutBatch, idx: &[usize], report: &LossReport) -> String {
    #[derive(Serialize)]
    struct Dump<'a> {
        update: usize,
        report: &'a LossReport,
        samples: Vec<serde_json::Value>,
    }
    let samples = idx
        .iter()
        .map(|&k| {
            let s = &batch.samples[k];
            serde_json::json!({
                "scenario": s.scenario, "episode": s.episode, "agent": s.agent, "t": s.t,
                "action": s.action, "log_prob": s.log_prob, "value": s.value,
                "reward": s.reward, "advantage": s.advantage, "ret": s.ret,
            })
        })
        .collect();
    let path = out_dir.join(format!("nonfinite_update{update}.json"));
    let text = serde_json::to_string_pretty(&Dump { update, report, samples }).unwrap_or_default();
    let _ = fs::write(&path, text);
    path.display().to_string()
}

/// The co-training loop. Resumes from `out_dir/checkpoint.bin` when
/// `resume` is set and the file exists.
pub fn train(
    setup: &TrainSetup,
    maps: &[Arc<ScenarioMap>],
    opts: &TrainOptions,
    resume: bool,
) -> Result<TrainSummary, PpoError> {
    setup.validate()?;
    if maps.is_empty() {
        return Err(PpoError::NoScenarios);
    }
    let ids: Vec<String> = maps.iter().map(|m| m.scenario_id.clone()).collect();
    if ids != setup.scenario_ids {
        return Err(PpoError::ConfigMismatch("scenario list differs from the setup".into()));
    }
    fs::create_dir_all(&opts.out_dir).map_err(io_err(&opts.out_dir))?;
    let ckpt_path = checkpoint_path(&opts.out_dir);
    let metrics = metrics_path(&opts.out_dir);

    let (mut store, mut meta) = if resume && ckpt_path.exists() {
        let (store, meta) = load_training_state(&ckpt_path, setup)?;
        // drop records written after the checkpoint
        let kept: Vec<MetricRecord> = if metrics.exists() {
            read_metrics(&metrics)?.into_iter().filter(|r| r.update() < meta.update).collect()
        } else {
            Vec::new()
        };
        let mut text = String::new();
        for r in &kept {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        fs::write(&metrics, text).map_err(io_err(&metrics))?;
        (store, meta)
    } else {
        File::create(&metrics).map_err(io_err(&metrics))?;
        (init_params(&setup.model, setup.seed)?, CheckpointMeta::default())
    };
    let mut log = OpenOptions::new().append(true).open(&metrics).map_err(io_err(&metrics))?;
    let adam = AdamConfig {
        lr: setup.ppo.lr,
        ..AdamConfig::default()
    };
    let driver = setup.driver(ActionMode::Sample, Budget::Steps(setup.ppo.horizon), false);
    let mut last_report = None;

    while meta.update < opts.updates {
        if opts.total_episodes.is_some_and(|e| meta.episodes >= e) {
            break;
        }
        let update = meta.update;
        let mut batch = collect_rollouts(maps, &store, &driver, setup.seed, update, !opts.deterministic)?;
        batch.finish(setup.ppo.gamma, setup.ppo.gae_lambda)?;
        let mut lines = String::new();
        for rec in &batch.episodes {
            let mut record = rec.clone();
            record.episode = meta.episodes;
            meta.episodes += 1;
            lines.push_str(&serde_json::to_string(&MetricRecord::Episode { update, record })?);
            lines.push('\n');
        }

        let mut sum = LossReport::default();
        let mut count = 0usize;
        if !batch.is_empty() {
            let mut rng = ChaCha8Rng::seed_from_u64(setup.seed ^ 0x9e37_79b9_7f4a_7c15);
            rng.set_stream(update as u64);
            let mut order: Vec<usize> = (0..batch.len()).collect();
            for _ in 0..setup.ppo.epochs {
                order.shuffle(&mut rng);
                for idx in order.chunks(setup.ppo.minibatch_size) {
                    let (report, grads) = {
                        let mut g = Graph::new(&store);
                        let (loss, report) = ppo_losses(&mut g, &setup.model, &setup.ppo, &batch, idx)?;
                        if !report.l_total.is_finite() {
                            let dump = dump_minibatch(&opts.out_dir, update, &batch, idx, &report);
                            return Err(PpoError::NonFiniteLoss {
                                what: "loss".into(),
                                update,
                                dump,
                            });
                        }
                        let grads = g.backward(loss)?.for_store(&store);
                        (report, grads)
                    };
                    if grads.iter().any(|t| !t.is_finite()) {
                        let dump = dump_minibatch(&opts.out_dir, update, &batch, idx, &report);
                        return Err(PpoError::NonFiniteLoss {
                            what: "gradient".into(),
                            update,
                            dump,
                        });
                    }
                    adam_step(&mut store, &grads, &adam)?;
                    accumulate(&mut sum, &report);
                    count += 1;
                }
            }
        }
        let report = average(sum, count);
        lines.push_str(&serde_json::to_string(&MetricRecord::Update {
            update,
            samples: batch.len(),
            episodes: meta.episodes,
            report: report.clone(),
        })?);
        lines.push('\n');
        log.write_all(lines.as_bytes()).map_err(io_err(&metrics))?;
        last_report = Some(report);
        meta.update += 1;
        if opts.checkpoint_every > 0 && meta.update % opts.checkpoint_every == 0 {
            save_checkpoint(setup, &store, &meta, &opts.out_dir)?;
        }
    }
    save_checkpoint(setup, &store, &meta, &opts.out_dir)?;
    Ok(TrainSummary {
        store,
        updates: meta.update,
        episodes: meta.episodes,
        last_report,
    })
}

fn accumulate(sum: &mut LossReport, r: &LossReport) {
    sum.l_actor += r.l_actor;
    sum.l_critic += r.l_critic;
    sum.l_pred += r.l_pred;
    sum.l_total += r.l_total;
    sum.entropy += r.entropy;
    sum.clip_fraction += r.clip_fraction;
    sum.approx_kl += r.approx_kl;
    sum.max_ratio_dev = sum.max_ratio_dev.max(r.max_ratio_dev);
}

/// Minibatch means; `max_ratio_dev` stays a maximum.
fn average(sum: LossReport, count: usize) -> LossReport {
    if count == 0 {
        return sum;
    }
    let n = count as f64;
    LossReport {
        l_actor: sum.l_actor / n,
        l_critic: sum.l_critic / n,
        l_pred: sum.l_pred / n,
        l_total: sum.l_total / n,
        entropy: sum.entropy / n,
        clip_fraction: sum.clip_fraction / n,
        approx_kl: sum.approx_kl / n,
        max_ratio_dev: sum.max_ratio_dev,
    }
}
