//! Acceptance suite. Runs every criterion in order and prints one PASS or
//! FAIL line each; exits non-zero if any criterion fails.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::Arc;
use std::time::{Duration, Instant};

use dtppo::config::RunConfig;
use dtppo::encoder::{
    init_params, perturb_params, predictor_batch, prediction_pairs, spatial_batch, spatial_forward, temporal_batch,
    temporal_forward, EncoderConfig, ModelConfig, StepTokens,
};
use dtppo::harness::{apply_ablation, evaluate, random_baseline, replay_metrics, write_episode_log, AblationFlag};
use dtppo::obs::MdpFeature;
use dtppo::ppo::{checkpoint_path, collect_rollouts, compute_gae, metrics_path, ppo_losses, read_metrics, train, MetricRecord};
use dtppo::rollout::{ActionMode, Budget};
use dtppo::scenario::{generate_scenario, occupancy_fraction, ScenarioMap, ScenarioSpec, SceneType};
use dtppo::world::{clearance, ControlAction, RewardConfig, WorldConfig, WorldState};
use dtppo_autodiff::{Checkpoint, Graph, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn map(t: SceneType, density: f64, seed: u64, targets: usize) -> Arc<ScenarioMap> {
    let mut spec = ScenarioSpec::new(t, density, seed);
    spec.target_count = targets;
    Arc::new(generate_scenario(&spec).expect("feasible map"))
}

fn micro_config(d: usize, horizon: usize, neighbors: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.obs.neighbors = neighbors;
    cfg.model.encoder = EncoderConfig {
        d,
        d_prime: d,
        spatial_layers: 1,
        spatial_heads: 2,
        temporal_layers: 1,
        temporal_heads: 2,
        horizon,
        neighbors,
    };
    cfg.model.actor_hidden = 32;
    cfg.model.critic_hidden = 32;
    cfg.deterministic = true;
    cfg
}

/// Direct evaluation of the reward terms with the published constants.
fn oracle_reward(x_prev: [f64; 3], x_now: [f64; 3], target: [f64; 3], clearance: f64, collided: bool) -> [f64; 4] {
    let d = |a: [f64; 3]| ((a[0] - target[0]).powi(2) + (a[1] - target[1]).powi(2) + (a[2] - target[2]).powi(2)).sqrt();
    let (dp, dn) = (d(x_prev), d(x_now));
    let r_trans = (dp - dn) + (2.0 - dn * dn).max(0.0);
    let r_col = if collided { -1.0 } else { 0.0 };
    let r_free = if clearance > 0.5 { 0.04 } else { 0.0 };
    [r_trans, r_col, r_free, 0.45 * r_trans + 0.30 * r_col + 0.25 * r_free]
}

fn reward_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = RewardConfig::default();
    let mut worst: f64 = 0.0;
    let v3 = |rng: &mut ChaCha8Rng, s: f64| -> [f64; 3] { std::array::from_fn(|_| rng.random_range(-s..s)) };
    for _ in 0..10_000 {
        let target = v3(&mut rng, 20.0);
        let x_prev = v3(&mut rng, 20.0);
        let x_now = if rng.random_bool(0.3) {
            let o = v3(&mut rng, 1.5);
            [target[0] + o[0], target[1] + o[1], target[2] + o[2]]
        } else {
            v3(&mut rng, 20.0)
        };
        let c = rng.random_range(-1.0..3.0);
        let hit = rng.random_bool(0.2);
        let got = cfg.breakdown(x_prev, x_now, target, c, hit);
        let want = oracle_reward(x_prev, x_now, target, c, hit);
        for (g, w) in [got.r_trans, got.r_col_applied, got.r_free_applied, got.r_total].iter().zip(want) {
            worst = worst.max((g - w).abs());
        }
    }
    // rewards reported by the environment during rollouts
    let mut steps = 0;
    for seed in 0..5 {
        let m = map(SceneType::MixedScene, 0.25, seed, 6);
        let mut world = WorldState::reset(m.clone(), 6, WorldConfig::default()).map_err(|e| e.to_string())?;
        while !world.is_over() && steps < 10_000 {
            let before = world.positions();
            let actions: Vec<ControlAction> = (0..6)
                .map(|_| ControlAction::from_raw(std::array::from_fn(|_| rng.random_range(-1.0..1.0))))
                .collect();
            let live: Vec<bool> = world.done_flags.iter().map(|d| !d).collect();
            let out = world.step(&actions).map_err(|e| e.to_string())?;
            for i in (0..6).filter(|&i| live[i]) {
                let now = world.uav_states[i].position;
                let want = oracle_reward(before[i], now, world.goals[i], clearance(now, &m), out.collisions[i]);
                let r = &out.rewards[i];
                for (g, w) in [r.r_trans, r.r_col_applied, r.r_free_applied, r.r_total].iter().zip(want) {
                    worst = worst.max((g - w).abs());
                }
                steps += 1;
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max abs error {worst:e}"))?;
    Ok(format!("10000 tuples + {steps} environment steps, max abs error {worst:e}"))
}

fn full_gradient_check() -> Outcome {
    let mut cfg = micro_config(16, 4, 2);
    cfg.ppo.agents = 3;
    cfg.world.max_steps = 6;
    cfg.ppo.delta1 = 1.0;
    cfg.ppo.delta2 = 1.0;
    cfg.ppo.delta3 = 1e-2;
    let maps = vec![map(SceneType::PillarScene, 0.1, 21, 3), map(SceneType::CylinderScene, 0.1, 22, 3)];
    let setup = cfg.setup(&maps);
    let mut store = init_params(&setup.model, 3).map_err(|e| e.to_string())?;
    perturb_params(&mut store, 4, 0.1);
    let driver = setup.driver(ActionMode::Sample, Budget::Steps(5), false);
    let mut batch = collect_rollouts(&maps, &store, &driver, 7, 0, false).map_err(|e| e.to_string())?;
    batch.finish(setup.ppo.gamma, setup.ppo.gae_lambda).map_err(|e| e.to_string())?;
    // move off the collection parameters so ratios differ from one
    perturb_params(&mut store, 5, 0.02);
    let idx: Vec<usize> = (0..batch.len()).collect();
    let model = &setup.model;
    let ppo = &setup.ppo;

    let steps_and_windows = || {
        let mut order: Vec<usize> = idx.iter().flat_map(|&k| batch.samples[k].window.iter().copied()).collect();
        order.sort_unstable();
        order.dedup();
        let windows: Vec<Vec<usize>> = idx
            .iter()
            .map(|&k| batch.samples[k].window.iter().map(|s| order.binary_search(s).unwrap()).collect())
            .collect();
        (order, windows)
    };
    let (order, windows) = steps_and_windows();
    let step_refs: Vec<&StepTokens> = order.iter().map(|&s| &batch.steps[s]).collect();

    let temporal_all = |g: &mut Graph<'_>| {
        let sp = spatial_batch(g, model, &step_refs).unwrap();
        temporal_batch(g, model, sp, &windows).unwrap().0
    };
    let pairs = prediction_pairs(model, &step_refs, &windows).unwrap().expect("windows longer than one step");
    let frozen_target = {
        let mut g = Graph::new(&store);
        let all = temporal_all(&mut g);
        let t = g.gather_rows(all, &pairs.target).unwrap();
        g.value(t).clone()
    };
    // the prediction target is detached, so the oracle holds it fixed
    let oracle_loss = |s: &ParamStore| -> f64 {
        let mut g = Graph::new(s);
        let (_, rep) = ppo_losses(&mut g, model, ppo, &batch, &idx).unwrap();
        let mut g = Graph::new(s);
        let all = temporal_all(&mut g);
        let hp = g.gather_rows(all, &pairs.prev).unwrap();
        let jc = g.constant(pairs.joint.clone());
        let pred = predictor_batch(&mut g, hp, jc).unwrap();
        let tgt = g.constant(frozen_target.clone());
        let lp = g.mse(pred, tgt).unwrap();
        rep.l_total - ppo.delta3 * rep.l_pred + ppo.delta3 * g.value(lp).item()
    };
    let (analytic, report) = {
        let mut g = Graph::new(&store);
        let (loss, rep) = ppo_losses(&mut g, model, ppo, &batch, &idx).map_err(|e| e.to_string())?;
        (g.backward(loss).map_err(|e| e.to_string())?.for_store(&store), rep)
    };
    ensure((oracle_loss(&store) - report.l_total).abs() < 1e-12, || "frozen oracle disagrees at the base point".into())?;
    ensure(report.max_ratio_dev > 1e-3, || "ratios stayed at one".into())?;

    let h = 1e-4;
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut checked = 0usize;
    for (pi, name) in store.names().iter().enumerate() {
        let id = store.id(name).unwrap();
        for j in 0..store.value(id).len() {
            let at = |delta: f64| {
                let mut s = store.clone();
                s.value_mut(id).data_mut()[j] += delta;
                oracle_loss(&s)
            };
            let a = analytic[pi].data()[j];
            let rel = |fd: f64| (a - fd).abs() / a.abs().max(fd.abs()).max(1e-6);
            let (plus, minus) = (at(h), at(-h));
            let mut err = rel((plus - minus) / (2.0 * h));
            if err > 1e-5 {
                // refine with the fourth-order stencil
                err = rel((8.0 * (plus - minus) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h));
            }
            if err > worst {
                worst = err;
                worst_name = format!("{name}[{j}]");
            }
            checked += 1;
        }
    }
    ensure(worst < 1e-4, || format!("max relative error {worst:e} at {worst_name}"))?;
    Ok(format!(
        "{checked} parameters over {} samples, clip fraction {:.2}, max relative error {worst:e}",
        batch.len(),
        report.clip_fraction
    ))
}

fn random_features(rng: &mut ChaCha8Rng, obs_dim: usize, slots: usize, present: usize) -> Vec<MdpFeature> {
    (0..slots)
        .map(|k| {
            if k >= present {
                return MdpFeature::padded(obs_dim);
            }
            let mut obs_aug: Vec<f64> = (0..obs_dim).map(|_| rng.random_range(-2.0..2.0)).collect();
            obs_aug.push(1.0);
            let mut act_aug = [1.0; 5];
            for a in act_aug.iter_mut().take(4) {
                *a = rng.random_range(-1.0..1.0);
            }
            MdpFeature {
                obs_aug,
                act_aug,
                rew: rng.random_range(-1.0..1.0),
            }
        })
        .collect()
}

fn brute_gae(r: &[f64], v: &[f64], d: &[bool], last: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    (0..r.len())
        .map(|t| {
            let mut total = 0.0;
            let mut w = 1.0;
            for k in t..r.len() {
                let next = if d[k] { 0.0 } else if k + 1 < r.len() { v[k + 1] } else { last };
                total += w * (r[k] + gamma * next - v[k]);
                if d[k] {
                    break;
                }
                w *= gamma * lambda;
            }
            total
        })
        .collect()
}

fn structural_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // token count at the default widths
    let model = ModelConfig::default();
    let n = model.encoder.neighbors;
    ensure(model.encoder.spatial_tokens() == 1 + 3 * (n + 1), || "token formula".into())?;
    let store = init_params(&model, 1).map_err(|e| e.to_string())?;
    let pos = store.get("spatial.pos_emb").map_err(|e| e.to_string())?;
    ensure(pos.rows() == 16, || format!("{} spatial positions", pos.rows()))?;
    let feats = random_features(&mut rng, model.obs_dim, n + 1, 3);
    let st = StepTokens::from_features(&feats);
    {
        let mut g = Graph::new(&store);
        let out = spatial_batch(&mut g, &model, &[&st]).map_err(|e| e.to_string())?;
        let w = g.constant(Tensor::row(&(0..model.encoder.d).map(|k| (k as f64).sin()).collect::<Vec<_>>()));
        let y = g.mul_row(out, w).map_err(|e| e.to_string())?;
        let loss = g.sum(y);
        let grads = g.backward(loss).map_err(|e| e.to_string())?.for_store(&store);
        let gp = &grads[store.id("spatial.pos_emb").unwrap().0];
        let live = (0..16).filter(|&r| gp.row_slice(r).iter().any(|&v| v != 0.0)).count();
        ensure(live == 1 + 3 * 3, || format!("{live} tokens active with 3 present slots"))?;
    }

    // masked-slot invariance
    let small = micro_config(16, 6, 4).model_config();
    let mut store = init_params(&small, 2).map_err(|e| e.to_string())?;
    perturb_params(&mut store, 3, 0.3);
    for present in 1..=5 {
        let clean = random_features(&mut rng, small.obs_dim, 5, present);
        let base = spatial_forward(&store, &small, &clean).map_err(|e| e.to_string())?;
        let mut noisy = clean.clone();
        for f in noisy.iter_mut().skip(present) {
            for v in f.obs_aug.iter_mut().take(small.obs_dim) {
                *v = rng.random_range(-50.0..50.0);
            }
            f.rew = rng.random_range(-50.0..50.0);
        }
        ensure(spatial_forward(&store, &small, &noisy).map_err(|e| e.to_string())? == base, || {
            format!("padded slots changed the output with {present} present")
        })?;
    }

    // causality by prefix recompute
    let window: Vec<Vec<f64>> = (0..6).map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let full = temporal_forward(&store, &small, &window).map_err(|e| e.to_string())?;
    for len in 1..=6 {
        let prefix = temporal_forward(&store, &small, &window[..len]).map_err(|e| e.to_string())?;
        ensure(prefix[..] == full[..len], || format!("prefix {len} differs"))?;
    }

    // ratio-one right after collection
    let mut cfg = micro_config(16, 4, 2);
    cfg.ppo.agents = 3;
    cfg.world.max_steps = 15;
    let maps = vec![map(SceneType::PillarScene, 0.25, 5, 3), map(SceneType::MixedScene, 0.25, 6, 3)];
    let setup = cfg.setup(&maps);
    let mut store = init_params(&setup.model, 8).map_err(|e| e.to_string())?;
    perturb_params(&mut store, 9, 0.1);
    let driver = setup.driver(ActionMode::Sample, Budget::Steps(40), false);
    let mut batch = collect_rollouts(&maps, &store, &driver, 1, 0, false).map_err(|e| e.to_string())?;
    batch.finish(0.99, 0.95).map_err(|e| e.to_string())?;
    let mut max_dev: f64 = 0.0;
    let idx: Vec<usize> = (0..batch.len()).collect();
    for chunk in idx.chunks(64) {
        let mut g = Graph::new(&store);
        let (_, rep) = ppo_losses(&mut g, &setup.model, &setup.ppo, &batch, chunk).map_err(|e| e.to_string())?;
        max_dev = max_dev.max(rep.max_ratio_dev);
        ensure(rep.l_total == rep.recompute_total(&setup.ppo), || "loss decomposition".into())?;
    }
    ensure(max_dev < 1e-12, || format!("max |rho - 1| = {max_dev:e}"))?;

    // GAE against the brute-force sum for every length up to 32
    let mut gae_worst: f64 = 0.0;
    for len in 0..=32 {
        for _ in 0..20 {
            let r: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
            let v: Vec<f64> = (0..len).map(|_| rng.random_range(-2.0..2.0)).collect();
            let d: Vec<bool> = (0..len).map(|_| rng.random_bool(0.15)).collect();
            let last = rng.random_range(-2.0..2.0);
            let (gamma, lambda) = (rng.random_range(0.5..=1.0), rng.random_range(0.0..=1.0));
            let (adv, _) = compute_gae(&r, &v, &d, last, gamma, lambda).map_err(|e| e.to_string())?;
            for (a, b) in adv.iter().zip(brute_gae(&r, &v, &d, last, gamma, lambda)) {
                gae_worst = gae_worst.max((a - b).abs());
            }
        }
    }
    ensure(gae_worst < 1e-10, || format!("GAE error {gae_worst:e}"))?;
    Ok(format!(
        "16 tokens, masking and causality exact, max |rho-1| {max_dev:e} over {} samples, GAE error {gae_worst:e}",
        batch.len()
    ))
}

fn determinism_config(dir: &Path) -> std::path::PathBuf {
    let text = r#"
seed = 11
deterministic = true

[train]
updates = 20
checkpoint_every = 5
maps = [
  { scene = "pillar", density = 0.1, seed = 1, target_count = 3 },
  { scene = "cylinder", density = 0.1, seed = 2, target_count = 3 },
]

[obs]
neighbors = 2

[model]
actor_hidden = 32
critic_hidden = 32

[model.encoder]
d = 16
d_prime = 16
spatial_layers = 1
spatial_heads = 2
temporal_layers = 1
temporal_heads = 2
horizon = 4

[world]
max_steps = 30

[ppo]
agents = 3
horizon = 24
epochs = 2
minibatch_size = 32
"#;
    let path = dir.join("run.toml");
    std::fs::write(&path, text).expect("temp dir is writable");
    path
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = determinism_config(tmp.path());
    let mut files = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_dtppo"))
            .args(["train", "--deterministic", "--config"])
            .arg(&config)
            .arg("--out-dir")
            .arg(&out)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(status.status.success(), || String::from_utf8_lossy(&status.stderr).into_owned())?;
        let ckpt = std::fs::read(checkpoint_path(&out)).map_err(|e| e.to_string())?;
        let metrics = std::fs::read(metrics_path(&out)).map_err(|e| e.to_string())?;
        files.push((ckpt, metrics));
    }
    ensure(files[0] == files[1], || "runs differ".into())?;
    let updates = read_metrics(&metrics_path(&tmp.path().join("a")))
        .map_err(|e| e.to_string())?
        .iter()
        .filter(|r| matches!(r, MetricRecord::Update { .. }))
        .count();
    ensure(updates == 20, || format!("{updates} updates logged"))?;
    Ok(format!(
        "checkpoint {} bytes and metrics {} bytes identical after {updates} updates",
        files[0].0.len(),
        files[0].1.len()
    ))
}

fn learning_smoke() -> Outcome {
    let mut spec = ScenarioSpec::new(SceneType::PillarScene, 0.0, 3);
    spec.arena_x = 16.0;
    spec.arena_y = 16.0;
    spec.altitude_max = 10.0;
    spec.target_count = 1;
    let maps = vec![Arc::new(generate_scenario(&spec).map_err(|e| e.to_string())?)];
    let mut cfg = micro_config(32, 4, 0);
    cfg.model.actor_hidden = 64;
    cfg.model.critic_hidden = 64;
    cfg.world.max_steps = 40;
    cfg.ppo.agents = 1;
    cfg.ppo.horizon = 200;
    cfg.ppo.epochs = 4;
    cfg.ppo.minibatch_size = 64;
    cfg.train.updates = 1000;
    cfg.train.total_episodes = Some(500);
    cfg.train.checkpoint_every = 0;
    cfg.seed = 1;
    let setup = cfg.setup(&maps);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    train(&setup, &maps, &cfg.train_options(tmp.path()), false).map_err(|e| e.to_string())?;
    let episodes: Vec<f64> = read_metrics(&metrics_path(tmp.path()))
        .map_err(|e| e.to_string())?
        .into_iter()
        .filter_map(|r| match r {
            MetricRecord::Episode { record, .. } => Some(record.avg_transfer_reward),
            _ => None,
        })
        .take(500)
        .collect();
    ensure(episodes.len() == 500, || format!("only {} episodes", episodes.len()))?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let first = mean(&episodes[..10]);
    let last = mean(&episodes[490..]);
    let random = random_baseline(&setup, &maps, 50, 99)
        .map_err(|e| e.to_string())?
        .report
        .aggregate
        .avg_transfer_reward
        .mean;
    let detail = format!("first 10 {first:.3}, last 10 {last:.3}, random {random:.3}");
    ensure(last >= 1.5 * first && last >= 3.0 * random, || detail.clone())?;
    Ok(detail)
}

fn zero_shot() -> Outcome {
    let mut cfg = micro_config(32, 8, 3);
    cfg.ppo.agents = 4;
    cfg.ppo.horizon = 32;
    cfg.ppo.epochs = 2;
    cfg.ppo.minibatch_size = 64;
    cfg.world.max_steps = 80;
    cfg.train.updates = 50;
    cfg.train.checkpoint_every = 10;
    let train_maps = vec![map(SceneType::PillarScene, 0.1, 101, 4), map(SceneType::CylinderScene, 0.1, 102, 4)];
    let eval_maps = vec![map(SceneType::MixedScene, 0.1, 103, 4)];
    let setup = cfg.setup(&train_maps);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let summary = train(&setup, &train_maps, &cfg.train_options(tmp.path()), false).map_err(|e| e.to_string())?;
    ensure(summary.updates == 50, || format!("{} updates", summary.updates))?;
    let ckpt = Checkpoint::load(&checkpoint_path(tmp.path())).map_err(|e| e.to_string())?;
    let eval = evaluate(&ckpt, &eval_maps, 3, 5, true, false).map_err(|e| e.to_string())?;
    let r = &eval.report;
    ensure(r.zero_shot, || "zero-shot flag not set".into())?;
    ensure(r.aggregate.episodes == 3 && r.maps.len() == 1, || "episode accounting".into())?;
    let a = &r.aggregate;
    for (name, s) in [
        ("transfer", a.avg_transfer_reward),
        ("collision", a.avg_collision_penalty),
        ("free space", a.avg_free_space_reward),
    ] {
        ensure(s.mean.is_finite() && s.std.is_finite(), || format!("{name} metric not finite"))?;
    }
    let log = tmp.path().join("episodes.jsonl");
    write_episode_log(&log, &eval).map_err(|e| e.to_string())?;
    let replay = replay_metrics(&log, true).map_err(|e| e.to_string())?;
    ensure(&replay == r, || "replay differs from the harness report".into())?;
    ensure(evaluate(&ckpt, &train_maps[..1], 1, 5, true, false).is_err(), || "seen map accepted".into())?;
    Ok(format!(
        "transfer {:.3}, collision {:.3}, free space {:.3}; replay exact",
        a.avg_transfer_reward.mean, a.avg_collision_penalty.mean, a.avg_free_space_reward.mean
    ))
}

fn ablations() -> Outcome {
    let mut cfg = micro_config(16, 4, 2);
    cfg.ppo.agents = 3;
    cfg.ppo.horizon = 16;
    cfg.ppo.epochs = 2;
    cfg.ppo.minibatch_size = 32;
    cfg.world.max_steps = 30;
    cfg.train.updates = 5;
    cfg.train.checkpoint_every = 0;
    let maps = vec![map(SceneType::PillarScene, 0.25, 31, 3), map(SceneType::CylinderScene, 0.25, 32, 3)];
    let mut notes = Vec::new();
    let has = |s: &ParamStore, prefix: &str| s.names().iter().any(|n| n.starts_with(prefix));
    let full = init_params(&cfg.model_config(), 0).map_err(|e| e.to_string())?.scalar_count();
    for flag in AblationFlag::ALL {
        let mut run = cfg.clone();
        run.model = apply_ablation(&cfg.model, flag).map_err(|e| e.to_string())?;
        let setup = run.setup(&maps);
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let summary = train(&setup, &maps, &run.train_options(tmp.path()), false).map_err(|e| format!("{}: {e}", flag.slug()))?;
        ensure(summary.updates == 5, || format!("{}: {} updates", flag.slug(), summary.updates))?;
        let s = Checkpoint::load(&checkpoint_path(tmp.path())).map_err(|e| e.to_string())?.store;
        let expect: Vec<(&str, bool)> = match flag {
            AblationFlag::NoSpatial => vec![
                ("spatial.pool.", true),
                ("spatial.block", false),
                ("spatial.pos_emb", false),
                ("spatial.decision", false),
                ("temporal.block", true),
                ("residual.P_o", true),
            ],
            AblationFlag::NoTemporalGru => vec![
                ("temporal.gru.", true),
                ("temporal.pos_emb", false),
                ("temporal.block", false),
                ("spatial.block", true),
                ("predictor.", true),
            ],
            AblationFlag::NoResidual => vec![
                ("residual.P_o", false),
                ("spatial.block", true),
                ("temporal.block", true),
                ("predictor.", true),
            ],
            AblationFlag::PlainPpo => vec![
                ("spatial.", false),
                ("temporal.", false),
                ("predictor.", false),
                ("residual.P_o", true),
                ("actor.", true),
                ("critic.", true),
            ],
        };
        for (prefix, want) in expect {
            ensure(has(&s, prefix) == want, || format!("{}: {prefix} present = {}", flag.slug(), !want))?;
        }
        if flag == AblationFlag::NoSpatial {
            ensure(s.scalar_count() < full, || "no_spatial is not smaller than the full model".into())?;
        }
        notes.push(format!("{} {}", flag.slug(), s.scalar_count()));
    }
    Ok(format!("5 updates each; parameter counts: {} (full {full})", notes.join(", ")))
}

fn scenario_fidelity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for scene in SceneType::ALL {
        for density in [0.10, 0.25, 0.50] {
            for seed in 0..20u64 {
                let spec = ScenarioSpec::new(scene, density, 1000 + seed);
                let m = generate_scenario(&spec).map_err(|e| format!("{}: {e}", spec.scenario_id()))?;
                let est = occupancy_fraction(&m, 100_000, 777 + seed);
                let rel = (est.fraction - density).abs() / density;
                worst = worst.max(rel);
                ensure(rel <= 0.10, || format!("{}: occupancy {:.4}", m.scenario_id, est.fraction))?;
                ensure(m.spawn_points.len() == spec.target_count && m.goal_points.len() == spec.target_count, || {
                    format!("{}: point counts", m.scenario_id)
                })?;
                for p in m.spawn_points.iter().chain(&m.goal_points) {
                    ensure(m.clearance(*p) >= 1.0 && m.in_bounds(*p), || format!("{}: point clearance", m.scenario_id))?;
                }
                for (i, a) in m.spawn_points.iter().enumerate() {
                    for b in &m.spawn_points[i + 1..] {
                        let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                        ensure(d >= 1.0, || format!("{}: spawn spacing {d}", m.scenario_id))?;
                    }
                }
                let kinds: std::collections::BTreeSet<&str> = m.obstacles.iter().map(|o| o.kind()).collect();
                let ok = match scene {
                    SceneType::PillarScene => kinds.iter().all(|&k| k == "box"),
                    SceneType::CylinderScene => kinds.iter().all(|&k| k == "cylinder"),
                    SceneType::MixedScene => kinds.len() >= 2,
                };
                ensure(ok, || format!("{}: obstacle kinds {kinds:?}", m.scenario_id))?;
                count += 1;
            }
        }
    }
    Ok(format!("{count} maps, worst relative occupancy error {:.2}%", worst * 100.0))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, u64); 8] = [
        ("reward oracle", reward_oracle, 5),
        ("full-pipeline gradient check", full_gradient_check, 120),
        ("structural invariants", structural_invariants, 60),
        ("determinism", determinism, 300),
        ("learning smoke test", learning_smoke, 600),
        ("multi-scenario zero-shot harness", zero_shot, 900),
        ("ablation wiring", ablations, 600),
        ("scenario generation fidelity", scenario_fidelity, 120),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (k, (name, f, budget)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = f();
        let took = start.elapsed();
        let outcome = match outcome {
            Ok(d) if took > Duration::from_secs(*budget) => Err(format!("{d}; took {took:.1?}, budget {budget} s")),
            other => other,
        };
        match outcome {
            Ok(detail) => println!("PASS [{}] {name}: {detail} ({took:.1?})", k + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL [{}] {name}: {detail} ({took:.1?})", k + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
