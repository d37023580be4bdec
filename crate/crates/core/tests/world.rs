use std::f64::consts::{PI, TAU};
use std::sync::Arc;

use dtppo::error::WorldError;
use dtppo::scenario::{generate_scenario, Obstacle, ScenarioMap, ScenarioSpec, SceneType};
use dtppo::world::{clearance, ControlAction, RewardConfig, WorldConfig, WorldState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn empty_map(spawns: Vec<[f64; 3]>, goals: Vec<[f64; 3]>) -> Arc<ScenarioMap> {
    let mut spec = ScenarioSpec::new(SceneType::PillarScene, 0.0, 0);
    spec.target_count = spawns.len();
    Arc::new(ScenarioMap {
        scenario_id: spec.scenario_id(),
        spec,
        obstacles: vec![],
        spawn_points: spawns,
        goal_points: goals,
    })
}

fn d(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[test]
fn reset_places_agents_at_spawns() {
    let map = empty_map(vec![[5.0, 5.0, 10.0]], vec![[20.0, 5.0, 10.0]]);
    let ws = WorldState::reset(map, 1, WorldConfig::default()).unwrap();
    assert_eq!(ws.uav_states[0].position, [5.0, 5.0, 10.0]);
    assert_eq!(ws.uav_states[0].velocity, [0.0; 3]);
    assert_eq!(ws.done_flags, vec![false]);

    let pillars = Arc::new(generate_scenario(&ScenarioSpec::new(SceneType::PillarScene, 0.25, 3)).unwrap());
    let ws = WorldState::reset(pillars.clone(), 8, WorldConfig::default()).unwrap();
    for s in &ws.uav_states {
        assert!(clearance(s.position, &pillars) > 1.0);
    }
    assert_eq!(
        WorldState::reset(pillars, 9, WorldConfig::default()).unwrap_err(),
        WorldError::TooManyAgents {
            requested: 9,
            available: 8
        }
    );
}

#[test]
fn hover_collects_only_the_bonus_term() {
    let map = empty_map(vec![[5.0, 5.0, 10.0]], vec![[6.0, 5.0, 10.0]]);
    let mut ws = WorldState::reset(map, 1, WorldConfig {
        d_success: 0.5,
        ..WorldConfig::default()
    })
    .unwrap();
    let out = ws.step(&[ControlAction::from_raw([0.0, 0.0, 0.0, 1.0])]).unwrap();
    assert_eq!(ws.uav_states[0].position, [5.0, 5.0, 10.0]);
    assert_eq!(out.rewards[0].r_trans, 1.0);
}

#[test]
fn straight_approach_at_full_speed() {
    let map = empty_map(vec![[10.0, 10.0, 10.0]], vec![[15.0, 10.0, 10.0]]);
    let mut ws = WorldState::reset(map, 1, WorldConfig::default()).unwrap();
    let out = ws.step(&[ControlAction::from_raw([1.0, 0.0, 0.0, 1.0])]).unwrap();
    assert!((ws.distance_to_goal(0) - 4.7).abs() < 1e-12);
    assert!((out.rewards[0].r_trans - 0.3).abs() < 1e-12);
    assert!((ws.uav_states[0].velocity[0] - 3.0).abs() < 1e-9);
}

#[test]
fn pushing_into_a_pillar_stops_at_the_surface() {
    let mut spec = ScenarioSpec::new(SceneType::PillarScene, 0.0, 0);
    spec.target_count = 1;
    let map = Arc::new(ScenarioMap {
        scenario_id: "one-pillar".into(),
        spec,
        obstacles: vec![Obstacle::Box {
            center: [10.0, 10.0, 15.0],
            half_extents: [1.0, 1.0, 15.0],
        }],
        spawn_points: vec![[8.85, 10.0, 10.0]],
        goal_points: vec![[30.0, 10.0, 10.0]],
    });
    let mut ws = WorldState::reset(map.clone(), 1, WorldConfig::default()).unwrap();
    let out = ws.step(&[ControlAction::from_raw([1.0, 0.0, 0.0, 1.0])]).unwrap();
    let p = ws.uav_states[0].position;
    assert!(out.collisions[0]);
    assert_eq!(out.rewards[0].r_col_applied, -1.0);
    let c = clearance(p, &map);
    assert!((0.0..1e-9).contains(&c), "{c}");
    assert_eq!(ws.uav_states[0].velocity, [0.0; 3]);
    // sliding away is unobstructed
    let out = ws.step(&[ControlAction::from_raw([-1.0, 0.0, 0.0, 1.0])]).unwrap();
    assert!(!out.collisions[0]);
}

#[test]
fn action_validation() {
    let map = empty_map(vec![[5.0, 5.0, 10.0], [9.0, 5.0, 10.0]], vec![[20.0, 5.0, 10.0], [20.0, 15.0, 10.0]]);
    let mut ws = WorldState::reset(map, 2, WorldConfig::default()).unwrap();
    assert!(matches!(
        ws.step(&[ControlAction::hover()]),
        Err(WorldError::DimensionMismatch { expected: 2, got: 1 })
    ));
    let bad = ControlAction::from_raw([f64::NAN, 0.0, 0.0, 0.0]);
    assert_eq!(
        ws.step(&[ControlAction::hover(), bad]).unwrap_err(),
        WorldError::NonFiniteAction { agent: 1 }
    );
}

#[test]
fn reaching_the_goal_freezes_the_agent() {
    let map = empty_map(vec![[5.0, 5.0, 10.0]], vec![[6.0, 5.0, 10.0]]);
    let mut ws = WorldState::reset(map, 1, WorldConfig::default()).unwrap();
    let out = ws.step(&[ControlAction::from_raw([1.0, 0.0, 0.0, 1.0])]).unwrap();
    assert!(out.dones[0]);
    assert!(ws.is_over());
    assert_eq!(ws.step(&[ControlAction::hover()]).unwrap_err(), WorldError::EpisodeOver);
}

#[test]
fn episode_truncates_at_max_steps() {
    let map = empty_map(vec![[5.0, 5.0, 10.0]], vec![[30.0, 30.0, 10.0]]);
    let mut ws = WorldState::reset(map, 1, WorldConfig {
        max_steps: 3,
        ..WorldConfig::default()
    })
    .unwrap();
    for k in 0..3 {
        let out = ws.step(&[ControlAction::hover()]).unwrap();
        assert_eq!(out.dones[0], k == 2);
    }
}

#[test]
fn uav_collisions_are_optional() {
    let map = empty_map(vec![[5.0, 5.0, 10.0], [5.5, 5.0, 10.0]], vec![[30.0, 5.0, 10.0], [1.0, 5.0, 10.0]]);
    let push = [ControlAction::from_raw([1.0, 0.0, 0.0, 0.0]), ControlAction::from_raw([-1.0, 0.0, 0.0, 0.0])];
    let mut off = WorldState::reset(map.clone(), 2, WorldConfig::default()).unwrap();
    assert_eq!(off.step(&push).unwrap().collisions, vec![false, false]);
    let mut on = WorldState::reset(map, 2, WorldConfig {
        uav_collisions: true,
        ..WorldConfig::default()
    })
    .unwrap();
    let out = on.step(&push).unwrap();
    assert_eq!(out.collisions, vec![true, true]);
    assert_eq!(on.uav_states[0].position, [5.0, 5.0, 10.0]);
}

/// Random points on the surface plus edges and corners of an obstacle.
fn surface_samples(o: &Obstacle, rng: &mut ChaCha8Rng, n: usize) -> Vec<[f64; 3]> {
    let mut out = Vec::with_capacity(n);
    match *o {
        Obstacle::Box { center: c, half_extents: h } => {
            for sx in [-1.0, 1.0] {
                for sy in [-1.0, 1.0] {
                    for sz in [-1.0, 1.0] {
                        out.push([c[0] + sx * h[0], c[1] + sy * h[1], c[2] + sz * h[2]]);
                    }
                }
            }
            for k in 0..n {
                let axis = k % 3;
                let u: [f64; 3] = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
                let mut q = u;
                if k % 2 == 0 {
                    // face point
                    q[axis] = if rng.random::<bool>() { 1.0 } else { -1.0 };
                } else {
                    // edge point
                    q[axis] = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    q[(axis + 1) % 3] = if rng.random::<bool>() { 1.0 } else { -1.0 };
                }
                out.push([c[0] + q[0] * h[0], c[1] + q[1] * h[1], c[2] + q[2] * h[2]]);
            }
        }
        Obstacle::Cylinder { center: c, radius: r, half_height: hh } => {
            for k in 0..n {
                let a = rng.random_range(0.0..TAU);
                let z = match k % 3 {
                    0 => rng.random_range(-hh..=hh),
                    _ => if rng.random::<bool>() { hh } else { -hh },
                };
                let rr = if k % 3 == 1 { r * rng.random::<f64>().sqrt() } else { r };
                out.push([c[0] + rr * a.cos(), c[1] + rr * a.sin(), c[2] + z]);
            }
        }
        Obstacle::Sphere { center: c, radius: r } => {
            for _ in 0..n {
                let z: f64 = rng.random_range(-1.0..=1.0);
                let a = rng.random_range(0.0..TAU);
                let s = (1.0 - z * z).sqrt();
                out.push([c[0] + r * s * a.cos(), c[1] + r * s * a.sin(), c[2] + r * z]);
            }
        }
    }
    out
}

#[test]
fn clearance_matches_surface_sampling() {
    let mut spec = ScenarioSpec::new(SceneType::MixedScene, 0.0, 0);
    spec.target_count = 1;
    let obstacles = vec![
        Obstacle::Box {
            center: [10.0, 10.0, 5.0],
            half_extents: [0.5, 0.8, 1.0],
        },
        Obstacle::Cylinder {
            center: [20.0, 10.0, 5.0],
            radius: 0.6,
            half_height: 1.0,
        },
        Obstacle::Sphere {
            center: [15.0, 20.0, 5.0],
            radius: 0.7,
        },
    ];
    let empty = ScenarioMap {
        scenario_id: "probe".into(),
        spec: spec.clone(),
        obstacles: vec![],
        spawn_points: vec![[1.0; 3]],
        goal_points: vec![[2.0; 3]],
    };
    assert_eq!(clearance([3.0, 3.0, 3.0], &empty), f64::INFINITY);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for o in obstacles {
        let map = ScenarioMap {
            obstacles: vec![o.clone()],
            ..empty.clone()
        };
        let pts = surface_samples(&o, &mut rng, 100_000);
        let c = match o {
            Obstacle::Box { center, .. } | Obstacle::Cylinder { center, .. } | Obstacle::Sphere { center, .. } => center,
        };
        for _ in 0..20 {
            let r = rng.random_range(2.0..4.0);
            let (th, ph) = (rng.random_range(0.0..PI), rng.random_range(0.0..TAU));
            let p = [c[0] + r * th.sin() * ph.cos(), c[1] + r * th.sin() * ph.sin(), c[2] + r * th.cos()];
            let brute = pts.iter().map(|q| d(p, *q)).fold(f64::INFINITY, f64::min);
            let exact = clearance(p, &map);
            assert!((brute - exact).abs() < 1e-3, "{o:?} {p:?}: {brute} vs {exact}");
        }
    }
    let cyl = ScenarioMap {
        obstacles: vec![Obstacle::Cylinder {
            center: [0.0, 0.0, 15.0],
            radius: 1.0,
            half_height: 15.0,
        }],
        ..empty
    };
    assert_eq!(clearance([3.0, 0.0, 10.0], &cyl), 2.0);
}

#[test]
fn fuzz_rollout_keeps_invariants() {
    let map = Arc::new(generate_scenario(&ScenarioSpec::new(SceneType::MixedScene, 0.5, 21)).unwrap());
    let cfg = WorldConfig {
        max_steps: 1000,
        ..WorldConfig::default()
    };
    let reward = RewardConfig::default();
    let run = |seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ws = WorldState::reset(map.clone(), 8, cfg.clone()).unwrap();
        let mut trace = Vec::new();
        let mut collisions = 0;
        while !ws.is_over() {
            let prev = ws.positions();
            let live = ws.live();
            let actions: Vec<ControlAction> = (0..8)
                .map(|_| ControlAction::from_raw(std::array::from_fn(|_| rng.random_range(-1.3..1.3))))
                .collect();
            let out = ws.step(&actions).unwrap();
            for i in 0..8 {
                let p = ws.uav_states[i].position;
                let r = out.rewards[i];
                if !live[i] {
                    assert_eq!(p, prev[i]);
                    assert_eq!(r.r_total, 0.0);
                    continue;
                }
                assert_eq!(r.r_total, 0.45 * r.r_trans + 0.30 * r.r_col_applied + 0.25 * r.r_free_applied);
                assert!(clearance(p, &map) >= -1e-9);
                assert!((0.0..=30.0).contains(&p[2]));
                assert!(d(p, prev[i]) <= 3.0 * 0.1 + 1e-9);
                let expect = reward.breakdown(prev[i], p, ws.goals[i], clearance(p, &map), out.collisions[i]);
                assert_eq!(r, expect);
                collisions += usize::from(out.collisions[i]);
            }
            trace.push(ws.uav_states.clone());
        }
        (trace, collisions)
    };
    let (a, hits) = run(5);
    assert!(hits > 0, "fuzz rollout never touched an obstacle");
    assert_eq!(a, run(5).0);
}
