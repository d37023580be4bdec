//! Evaluation, metric reports, ablations, sweeps and embedding export.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use dtppo_autodiff::{Checkpoint, Graph, ParamStore};
use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{load_maps, RunConfig};
use crate::encoder::{encode, Ablation, EncoderInput, ModelConfig, StepTokens};
use crate::error::{HarnessError, ModelError, PpoError};
use crate::ppo::{collect_rollouts, train, TrainSetup};
use crate::rollout::{rollout_scenario, scenario_rng, ActionMode, Budget, EpisodeRecord, EpisodeTotals, StepLog};
use crate::scenario::ScenarioMap;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Population mean and standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::default();
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    pub scenario_id: String,
    pub episodes: usize,
    pub avg_transfer_reward: Stat,
    pub avg_collision_penalty: Stat,
    pub avg_free_space_reward: Stat,
}

impl MapMetrics {
    fn from_records(scenario_id: String, records: &[&EpisodeRecord]) -> Self {
        let col = |f: fn(&EpisodeRecord) -> f64| Stat::of(&records.iter().map(|r| f(r)).collect::<Vec<_>>());
        Self {
            scenario_id,
            episodes: records.len(),
            avg_transfer_reward: col(|r| r.avg_transfer_reward),
            avg_collision_penalty: col(|r| r.avg_collision_penalty),
            avg_free_space_reward: col(|r| r.avg_free_space_reward),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Set when none of the maps were seen in training.
    pub zero_shot: bool,
    pub maps: Vec<MapMetrics>,
    pub aggregate: MapMetrics,
    pub episodes: Vec<EpisodeRecord>,
}

impl MetricsReport {
    /// Groups episode records by map, keeping first-seen map order.
    pub fn from_episodes(episodes: Vec<EpisodeRecord>, zero_shot: bool) -> Self {
        let mut order: Vec<String> = Vec::new();
        for e in &episodes {
            if !order.contains(&e.scenario_id) {
                order.push(e.scenario_id.clone());
            }
        }
        let maps = order
            .iter()
            .map(|id| {
                let recs: Vec<&EpisodeRecord> = episodes.iter().filter(|e| &e.scenario_id == id).collect();
                MapMetrics::from_records(id.clone(), &recs)
            })
            .collect();
        let all: Vec<&EpisodeRecord> = episodes.iter().collect();
        let aggregate = MapMetrics::from_records("all".into(), &all);
        Self {
            zero_shot,
            maps,
            aggregate,
            episodes,
        }
    }

    /// Comma-separated summary, one row per map plus the aggregate.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from(
            "scenario_id,episodes,transfer_mean,transfer_std,collision_mean,collision_std,free_space_mean,free_space_std\n",
        );
        for m in self.maps.iter().chain(std::iter::once(&self.aggregate)) {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                m.scenario_id,
                m.episodes,
                m.avg_transfer_reward.mean,
                m.avg_transfer_reward.std,
                m.avg_collision_penalty.mean,
                m.avg_collision_penalty.std,
                m.avg_free_space_reward.mean,
                m.avg_free_space_reward.std
            ));
        }
        s
    }
}

/// Training setup stored in a checkpoint written by the trainer.
pub fn checkpoint_setup(ckpt: &Checkpoint) -> Result<TrainSetup, HarnessError> {
    serde_json::from_str(&ckpt.config)
        .map_err(|e| HarnessError::ConfigMismatch(format!("checkpoint config is not a training setup: {e}")))
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub logs: Vec<StepLog>,
}

/// Rolls `episodes` complete episodes per map with `mode`.
fn run_episodes(
    store: &ParamStore,
    setup: &TrainSetup,
    maps: &[Arc<ScenarioMap>],
    episodes: usize,
    seed: u64,
    mode: ActionMode,
    parallel: bool,
) -> Result<(Vec<EpisodeRecord>, Vec<StepLog>), HarnessError> {
    let driver = setup.driver(mode, Budget::Episodes(episodes), true);
    let run = |(k, map): (usize, &Arc<ScenarioMap>)| {
        let mut rng = scenario_rng(seed, 0, k);
        rollout_scenario(store, map.clone(), k, &driver, &mut rng)
    };
    let parts: Vec<_> = if parallel {
        maps.par_iter().enumerate().map(run).collect::<Result<_, PpoError>>()?
    } else {
        maps.iter().enumerate().map(run).collect::<Result<_, PpoError>>()?
    };
    let mut records = Vec::new();
    let mut logs = Vec::new();
    for p in parts {
        records.extend(p.episodes);
        logs.extend(p.logs);
    }
    Ok((records, logs))
}

fn check_maps(setup: &TrainSetup, maps: &[Arc<ScenarioMap>]) -> Result<(), HarnessError> {
    for m in maps {
        if m.spawn_points.len() < setup.ppo.agents {
            return Err(HarnessError::ConfigMismatch(format!(
                "map {} has {} spawn points, the policy was trained with {} agents",
                m.scenario_id,
                m.spawn_points.len(),
                setup.ppo.agents
            )));
        }
    }
    Ok(())
}

/// Greedy evaluation of a trained checkpoint.
///
/// With `zero_shot` set, any eval map that appeared in training is an error.
pub fn evaluate(
    ckpt: &Checkpoint,
    maps: &[Arc<ScenarioMap>],
    episodes: usize,
    seed: u64,
    zero_shot: bool,
    parallel: bool,
) -> Result<Evaluation, HarnessError> {
    let setup = checkpoint_setup(ckpt)?;
    check_maps(&setup, maps)?;
    if zero_shot {
        if let Some(m) = maps.iter().find(|m| setup.scenario_ids.contains(&m.scenario_id)) {
            return Err(HarnessError::ZeroShotViolation(m.scenario_id.clone()));
        }
    }
    let (records, logs) = run_episodes(&ckpt.store, &setup, maps, episodes, seed, ActionMode::Greedy, parallel)?;
    Ok(Evaluation {
        report: MetricsReport::from_episodes(records, zero_shot),
        logs,
    })
}

/// Uniformly random actions in the same episode driver.
pub fn random_baseline(
    setup: &TrainSetup,
    maps: &[Arc<ScenarioMap>],
    episodes: usize,
    seed: u64,
) -> Result<Evaluation, HarnessError> {
    let store = ParamStore::new();
    let (records, logs) = run_episodes(&store, setup, maps, episodes, seed, ActionMode::Uniform, false)?;
    Ok(Evaluation {
        report: MetricsReport::from_episodes(records, false),
        logs,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LogLine {
    Episode(EpisodeRecord),
    Step(StepLog),
}

/// Episode headers followed by their step records, one JSON object per line.
pub fn write_episode_log(path: &Path, eval: &Evaluation) -> Result<(), HarnessError> {
    let mut text = String::new();
    let push = |text: &mut String, line: &LogLine| -> Result<(), HarnessError> {
        text.push_str(&serde_json::to_string(line).map_err(PpoError::from)?);
        text.push('\n');
        Ok(())
    };
    for rec in &eval.report.episodes {
        push(&mut text, &LogLine::Episode(rec.clone()))?;
        for s in eval
            .logs
            .iter()
            .filter(|s| s.scenario_id == rec.scenario_id && s.episode == rec.episode)
        {
            push(&mut text, &LogLine::Step(s.clone()))?;
        }
    }
    fs::write(path, text).map_err(|source| HarnessError::Io {
        path: path.into(),
        source,
    })
}

/// Recomputes the report from an episode log alone.
pub fn replay_metrics(path: &Path, zero_shot: bool) -> Result<MetricsReport, HarnessError> {
    let f = File::open(path).map_err(|source| HarnessError::Io {
        path: path.into(),
        source,
    })?;
    let mut records: Vec<EpisodeRecord> = Vec::new();
    let mut totals: Vec<EpisodeTotals> = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| HarnessError::Io {
            path: path.into(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| HarnessError::BadLog { line: n + 1, reason };
        match serde_json::from_str::<LogLine>(&line).map_err(|e| bad(e.to_string()))? {
            LogLine::Episode(rec) => {
                totals.push(EpisodeTotals::new(rec.agents));
                records.push(rec);
            }
            LogLine::Step(s) => {
                let (Some(rec), Some(tot)) = (records.last(), totals.last_mut()) else {
                    return Err(bad("step before any episode header".into()));
                };
                if rec.scenario_id != s.scenario_id || rec.episode != s.episode || s.agent >= rec.agents {
                    return Err(bad("step does not belong to the current episode".into()));
                }
                tot.add(s.agent, s.r_trans, s.r_col, s.r_free);
            }
        }
    }
    for (rec, tot) in records.iter_mut().zip(&totals) {
        let (tr, col, free) = tot.averages();
        rec.avg_transfer_reward = tr;
        rec.avg_collision_penalty = col;
        rec.avg_free_space_reward = free;
    }
    Ok(MetricsReport::from_episodes(records, zero_shot))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFlag {
    NoSpatial,
    NoTemporalGru,
    NoResidual,
    PlainPpo,
}

impl AblationFlag {
    pub const ALL: [AblationFlag; 4] = [
        AblationFlag::NoSpatial,
        AblationFlag::NoTemporalGru,
        AblationFlag::NoResidual,
        AblationFlag::PlainPpo,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            AblationFlag::NoSpatial => "no_spatial",
            AblationFlag::NoTemporalGru => "no_temporal_gru",
            AblationFlag::NoResidual => "no_residual",
            AblationFlag::PlainPpo => "plain_ppo",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.slug() == s)
    }
}

/// Sets one ablation flag and checks the combination.
pub fn apply_ablation(model: &ModelConfig, flag: AblationFlag) -> Result<ModelConfig, ModelError> {
    let mut m = model.clone();
    let a: &mut Ablation = &mut m.ablation;
    match flag {
        AblationFlag::NoSpatial => a.no_spatial = true,
        AblationFlag::NoTemporalGru => a.no_temporal_gru = true,
        AblationFlag::NoResidual => a.no_residual = true,
        AblationFlag::PlainPpo => a.plain_ppo = true,
    }
    m.validate()?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub scenarios: usize,
    pub train_ids: Vec<String>,
    pub report: MetricsReport,
}

/// Trains one model per scenario count on the first `count` pool maps and
/// evaluates each on the shared eval maps.
pub fn sweep_scenario_count(
    counts: &[usize],
    base: &RunConfig,
    pool: &[Arc<ScenarioMap>],
    eval_maps: &[Arc<ScenarioMap>],
    out_dir: &Path,
) -> Result<Vec<SweepRow>, HarnessError> {
    let needed = counts.iter().copied().max().unwrap_or(0);
    if needed > pool.len() {
        return Err(HarnessError::InsufficientMaps {
            needed,
            available: pool.len(),
        });
    }
    let mut rows = Vec::new();
    for &count in counts {
        let maps = &pool[..count];
        let setup = base.setup(maps);
        let dir = out_dir.join(format!("scenarios_{count}"));
        train(&setup, maps, &base.train_options(&dir), false)?;
        let ckpt = Checkpoint::load(&crate::ppo::checkpoint_path(&dir))?;
        let zero_shot = eval_maps.iter().all(|m| !setup.scenario_ids.contains(&m.scenario_id));
        let eval = evaluate(&ckpt, eval_maps, base.eval.episodes, base.seed, zero_shot, !base.deterministic)?;
        rows.push(SweepRow {
            scenarios: count,
            train_ids: setup.scenario_ids,
            report: eval.report,
        });
    }
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("scenarios,transfer_mean,transfer_std,collision_mean,free_space_mean\n");
    for r in rows {
        let a = &r.report.aggregate;
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.scenarios,
            a.avg_transfer_reward.mean,
            a.avg_transfer_reward.std,
            a.avg_collision_penalty.mean,
            a.avg_free_space_reward.mean
        ));
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    pub labels: Vec<(String, usize, usize)>,
    /// One row per label.
    pub rows: Vec<Vec<f64>>,
    pub pca: Vec<[f64; 3]>,
}

/// Projections onto the top three principal axes of the centered rows.
/// Each axis is signed so its largest-magnitude loading is positive.
pub fn pca3(rows: &[Vec<f64>]) -> Vec<[f64; 3]> {
    let n = rows.len();
    if n == 0 {
        return Vec::new();
    }
    let d = rows[0].len();
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    let mean = x.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    let cov = centered.transpose() * &centered / denom;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let axes: Vec<Vec<f64>> = order
        .iter()
        .take(3)
        .map(|&k| {
            let v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            let big = v.iter().copied().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                v.iter().map(|x| -x).collect()
            } else {
                v
            }
        })
        .collect();
    (0..n)
        .map(|i| {
            std::array::from_fn(|c| match axes.get(c) {
                Some(axis) => (0..d).map(|j| centered[(i, j)] * axis[j]).sum(),
                None => 0.0,
            })
        })
        .collect()
}

/// Greedy rollouts of `steps` world steps per map; one row per agent-step
/// holding the temporal output (the policy input under `plain_ppo`).
pub fn export_embeddings(ckpt: &Checkpoint, maps: &[Arc<ScenarioMap>], steps: usize, seed: u64) -> Result<EmbeddingTable, HarnessError> {
    let setup = checkpoint_setup(ckpt)?;
    check_maps(&setup, maps)?;
    let driver = setup.driver(ActionMode::Greedy, Budget::Steps(steps), false);
    let batch = collect_rollouts(maps, &ckpt.store, &driver, seed, 0, false)?;
    let mut labels = Vec::with_capacity(batch.len());
    let mut rows = Vec::with_capacity(batch.len());
    for chunk in batch.samples.chunks(256) {
        let mut local: BTreeMap<usize, usize> = BTreeMap::new();
        for s in chunk {
            for &w in &s.window {
                let next = local.len();
                local.entry(w).or_insert(next);
            }
        }
        let mut order: Vec<(usize, usize)> = local.iter().map(|(&g, &l)| (l, g)).collect();
        order.sort_unstable();
        let step_refs: Vec<&StepTokens> = order.iter().map(|&(_, g)| &batch.steps[g]).collect();
        let windows: Vec<Vec<usize>> = chunk.iter().map(|s| s.window.iter().map(|w| local[w]).collect()).collect();
        let mut g = Graph::new(&ckpt.store);
        let enc = encode(&mut g, &setup.model, EncoderInput { steps: &step_refs, windows: &windows }).map_err(PpoError::from)?;
        let out = g.value(enc.h_out.unwrap_or(enc.policy_input));
        for (r, s) in chunk.iter().enumerate() {
            labels.push((maps[s.scenario].scenario_id.clone(), s.agent, s.t));
            rows.push(out.row_slice(r).to_vec());
        }
    }
    let pca = pca3(&rows);
    Ok(EmbeddingTable { labels, rows, pca })
}

pub fn write_embeddings(path: &Path, table: &EmbeddingTable) -> Result<(), HarnessError> {
    let io = |source| HarnessError::Io {
        path: path.into(),
        source,
    };
    let mut f = File::create(path).map_err(io)?;
    let width = table.rows.first().map_or(0, Vec::len);
    let mut header = String::from("scenario_id,agent,step");
    for k in 0..width {
        header.push_str(&format!(",h{k}"));
    }
    header.push_str(",pc1,pc2,pc3\n");
    let mut text = header;
    for ((label, row), pc) in table.labels.iter().zip(&table.rows).zip(&table.pca) {
        text.push_str(&format!("{},{},{}", label.0, label.1, label.2));
        for v in row.iter().chain(pc) {
            text.push_str(&format!(",{v}"));
        }
        text.push('\n');
    }
    f.write_all(text.as_bytes()).map_err(io)
}

/// Parameter names, for manifest checks.
pub fn parameter_manifest(store: &ParamStore) -> Vec<(String, usize)> {
    store.iter().map(|(_, n, t)| (n.to_string(), t.len())).collect()
}

/// Loads the eval maps of a run config.
pub fn eval_maps(cfg: &RunConfig, base: &Path) -> Result<Vec<Arc<ScenarioMap>>, HarnessError> {
    Ok(load_maps(&cfg.eval.maps, base)?)
}
