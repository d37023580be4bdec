//! Procedural obstacle maps.
//!
//! Density is the fraction of the ground plane covered by obstacle
//! footprints. Pillar and cylinder scenes place full-height, non-overlapping
//! shapes; mixed scenes combine grounded boxes, grounded cylinders and
//! floating spheres of partial height, and may overlap.
//!
//! Spawn and goal points are drawn first, then obstacles are placed by
//! polydisperse rejection sampling that keeps a clearance margin around
//! every reserved point. Everything is a pure function of the spec.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ScenarioError;
use crate::geom::{dist, Vec3};

pub const FORMAT_VERSION: u32 = 1;

/// Minimum distance from any obstacle surface to a spawn or goal point.
pub const POINT_CLEARANCE: f64 = 1.0;
/// Margin the generator actually enforces; strictly above the invariant.
const RESERVE: f64 = 1.25;
const POINT_SPACING: f64 = 2.0;
const WALL_MARGIN: f64 = 1.5;
/// Smallest obstacle half-width, so a single 0.3 m step cannot jump across.
const MIN_HALF: f64 = 0.3;
/// Accepted relative slack around the target coverage.
const FILL_SLACK: f64 = 0.02;
const MAX_ATTEMPTS: u64 = 6;
const TRIES_PER_ATTEMPT: usize = 300_000;
const SHRINK_AFTER: usize = 400;
const RASTER_CELL: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SceneType {
    #[serde(rename = "pillar")]
    PillarScene,
    #[serde(rename = "cylinder")]
    CylinderScene,
    #[serde(rename = "mixed")]
    MixedScene,
}

impl SceneType {
    pub const ALL: [SceneType; 3] = [SceneType::PillarScene, SceneType::CylinderScene, SceneType::MixedScene];

    pub fn slug(self) -> &'static str {
        match self {
            SceneType::PillarScene => "pillar",
            SceneType::CylinderScene => "cylinder",
            SceneType::MixedScene => "mixed",
        }
    }

    pub fn from_slug(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.slug() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub scene_type: SceneType,
    pub density: f64,
    pub arena_x: f64,
    pub arena_y: f64,
    pub altitude_max: f64,
    pub seed: u64,
    pub target_count: usize,
}

impl ScenarioSpec {
    /// Spec with the default 40 m x 40 m x 30 m arena and 8 targets.
    pub fn new(scene_type: SceneType, density: f64, seed: u64) -> Self {
        Self {
            scene_type,
            density,
            arena_x: 40.0,
            arena_y: 40.0,
            altitude_max: 30.0,
            seed,
            target_count: 8,
        }
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::InvalidSpec(m.to_string()));
        if !(0.0..=0.8).contains(&self.density) {
            return bad("density must lie in [0, 0.8]");
        }
        if !(self.arena_x.is_finite() && self.arena_y.is_finite() && self.arena_x > 0.0 && self.arena_y > 0.0) {
            return bad("arena dimensions must be positive");
        }
        if !(self.altitude_max.is_finite() && self.altitude_max > 0.0) {
            return bad("altitude_max must be positive");
        }
        if self.target_count == 0 {
            return bad("target_count must be positive");
        }
        Ok(())
    }

    pub fn scenario_id(&self) -> String {
        format!(
            "{}-{}-s{}",
            self.scene_type.slug(),
            (self.density * 100.0).round() as i64,
            self.seed
        )
    }

    fn arena_area(&self) -> f64 {
        self.arena_x * self.arena_y
    }
}

/// Axis-aligned box, vertical cylinder or sphere.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Obstacle {
    Box { center: Vec3, half_extents: Vec3 },
    Cylinder { center: Vec3, radius: f64, half_height: f64 },
    Sphere { center: Vec3, radius: f64 },
}

impl Obstacle {
    pub fn kind(&self) -> &'static str {
        match self {
            Obstacle::Box { .. } => "box",
            Obstacle::Cylinder { .. } => "cylinder",
            Obstacle::Sphere { .. } => "sphere",
        }
    }

    /// Exact signed distance to the surface, negative inside.
    pub fn sdf(&self, p: Vec3) -> f64 {
        match *self {
            Obstacle::Box { center, half_extents } => {
                let q = [
                    (p[0] - center[0]).abs() - half_extents[0],
                    (p[1] - center[1]).abs() - half_extents[1],
                    (p[2] - center[2]).abs() - half_extents[2],
                ];
                let outside = q.iter().map(|v| v.max(0.0).powi(2)).sum::<f64>().sqrt();
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
            Obstacle::Cylinder { center, radius, half_height } => {
                let radial = (p[0] - center[0]).hypot(p[1] - center[1]) - radius;
                let axial = (p[2] - center[2]).abs() - half_height;
                let outside = radial.max(0.0).hypot(axial.max(0.0));
                outside + radial.max(axial).min(0.0)
            }
            Obstacle::Sphere { center, radius } => dist(p, center) - radius,
        }
    }

    pub fn footprint_contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Obstacle::Box { center, half_extents } => {
                (x - center[0]).abs() <= half_extents[0] && (y - center[1]).abs() <= half_extents[1]
            }
            Obstacle::Cylinder { center, radius, .. } | Obstacle::Sphere { center, radius } => {
                (x - center[0]).powi(2) + (y - center[1]).powi(2) <= radius * radius
            }
        }
    }

    pub fn footprint_area(&self) -> f64 {
        match *self {
            Obstacle::Box { half_extents, .. } => 4.0 * half_extents[0] * half_extents[1],
            Obstacle::Cylinder { radius, .. } | Obstacle::Sphere { radius, .. } => {
                std::f64::consts::PI * radius * radius
            }
        }
    }

    /// `[min_x, min_y, max_x, max_y]` of the footprint.
    pub fn footprint_bounds(&self) -> [f64; 4] {
        let (c, hx, hy) = match *self {
            Obstacle::Box { center, half_extents } => (center, half_extents[0], half_extents[1]),
            Obstacle::Cylinder { center, radius, .. } | Obstacle::Sphere { center, radius } => (center, radius, radius),
        };
        [c[0] - hx, c[1] - hy, c[0] + hx, c[1] + hy]
    }

    /// `[z_min, z_max]` of the shape.
    pub fn z_range(&self) -> [f64; 2] {
        match *self {
            Obstacle::Box { center, half_extents } => [center[2] - half_extents[2], center[2] + half_extents[2]],
            Obstacle::Cylinder { center, half_height, .. } => [center[2] - half_height, center[2] + half_height],
            Obstacle::Sphere { center, radius } => [center[2] - radius, center[2] + radius],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMap {
    pub spec: ScenarioSpec,
    pub obstacles: Vec<Obstacle>,
    pub spawn_points: Vec<Vec3>,
    pub goal_points: Vec<Vec3>,
    pub scenario_id: String,
}

impl ScenarioMap {
    /// Distance to the nearest obstacle surface; `f64::INFINITY` on an empty map.
    pub fn clearance(&self, p: Vec3) -> f64 {
        self.obstacles.iter().map(|o| o.sdf(p)).fold(f64::INFINITY, f64::min)
    }

    pub fn in_bounds(&self, p: Vec3) -> bool {
        (0.0..=self.spec.arena_x).contains(&p[0])
            && (0.0..=self.spec.arena_y).contains(&p[1])
            && (0.0..=self.spec.altitude_max).contains(&p[2])
    }
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<ScenarioMap, ScenarioError> {
    spec.validate()?;
    let mut base = ChaCha8Rng::seed_from_u64(spec.seed);
    let (spawn_points, goal_points) = place_points(spec, &mut base)?;
    let reserved: Vec<Vec3> = spawn_points.iter().chain(&goal_points).copied().collect();
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(attempt + 1);
        let placed = match spec.scene_type {
            SceneType::PillarScene | SceneType::CylinderScene => place_disjoint(spec, &reserved, &mut rng),
            SceneType::MixedScene => place_mixed(spec, &reserved, &mut rng),
        };
        if let Some(obstacles) = placed {
            return Ok(ScenarioMap {
                spec: spec.clone(),
                obstacles,
                spawn_points,
                goal_points,
                scenario_id: spec.scenario_id(),
            });
        }
    }
    Err(ScenarioError::DensityInfeasible {
        density: spec.density,
        attempts: MAX_ATTEMPTS as usize,
    })
}

fn place_points(spec: &ScenarioSpec, rng: &mut ChaCha8Rng) -> Result<(Vec<Vec3>, Vec<Vec3>), ScenarioError> {
    let mx = WALL_MARGIN.min(spec.arena_x / 4.0);
    let my = WALL_MARGIN.min(spec.arena_y / 4.0);
    let z = (0.25 * spec.altitude_max, 0.75 * spec.altitude_max);
    let min_travel = spec.arena_x.min(spec.arena_y) / 3.0;
    let draw = |rng: &mut ChaCha8Rng| -> Vec3 {
        [
            rng.random_range(mx..=spec.arena_x - mx),
            rng.random_range(my..=spec.arena_y - my),
            rng.random_range(z.0..=z.1),
        ]
    };
    let mut spawns: Vec<Vec3> = Vec::new();
    let mut goals: Vec<Vec3> = Vec::new();
    let far_enough = |p: Vec3, spawns: &[Vec3], goals: &[Vec3]| {
        spawns.iter().chain(goals).all(|q| dist(p, *q) >= POINT_SPACING)
    };
    for _ in 0..spec.target_count {
        let mut found = false;
        for _ in 0..20_000 {
            let s = draw(rng);
            let g = draw(rng);
            if dist(s, g) >= min_travel
                && dist(s, g) >= POINT_SPACING
                && far_enough(s, &spawns, &goals)
                && far_enough(g, &spawns, &goals)
            {
                spawns.push(s);
                goals.push(g);
                found = true;
                break;
            }
        }
        if !found {
            return Err(ScenarioError::SpawnInfeasible {
                count: spec.target_count,
            });
        }
    }
    Ok((spawns, goals))
}

fn respects_reserve(o: &Obstacle, reserved: &[Vec3]) -> bool {
    reserved.iter().all(|p| o.sdf(*p) > RESERVE)
}

fn overlaps(a: &Obstacle, b: &Obstacle) -> bool {
    match (a, b) {
        (Obstacle::Box { center: c1, half_extents: h1 }, Obstacle::Box { center: c2, half_extents: h2 }) => {
            (c1[0] - c2[0]).abs() < h1[0] + h2[0] && (c1[1] - c2[1]).abs() < h1[1] + h2[1]
        }
        (
            Obstacle::Cylinder { center: c1, radius: r1, .. },
            Obstacle::Cylinder { center: c2, radius: r2, .. },
        ) => (c1[0] - c2[0]).hypot(c1[1] - c2[1]) < r1 + r2,
        _ => unreachable!("disjoint scenes hold a single shape kind"),
    }
}

/// Full-height boxes or cylinders with no footprint overlap.
fn place_disjoint(spec: &ScenarioSpec, reserved: &[Vec3], rng: &mut ChaCha8Rng) -> Option<Vec<Obstacle>> {
    let pillar = spec.scene_type == SceneType::PillarScene;
    // half-width range: boxes of side 1..4 m, cylinders of radius 0.5..2 m
    let (lo, hi): (f64, f64) = (0.5, 2.0);
    let target = spec.density * spec.arena_area();
    let ceiling = target * (1.0 + FILL_SLACK);
    let half_z = spec.altitude_max / 2.0;
    let area_of = |h: f64| if pillar { 4.0 * h * h } else { std::f64::consts::PI * h * h };
    let mut obstacles: Vec<Obstacle> = Vec::new();
    let mut covered = 0.0;
    let mut max_half = hi;
    let mut fails = 0;
    for _ in 0..TRIES_PER_ATTEMPT {
        if covered >= target * (1.0 - FILL_SLACK) {
            return Some(obstacles);
        }
        let room = ceiling - covered;
        let cap = if pillar { (room / 4.0).sqrt() } else { (room / std::f64::consts::PI).sqrt() };
        let h_hi = max_half.min(cap);
        if h_hi < MIN_HALF {
            // nothing fits under the ceiling; accept if inside tolerance
            return (covered >= target * (1.0 - 2.0 * FILL_SLACK)).then_some(obstacles);
        }
        let h_lo = lo.min(h_hi);
        let h = if h_lo < h_hi { rng.random_range(h_lo..h_hi) } else { h_hi };
        let half_x = spec.arena_x / 2.0;
        let half_y = spec.arena_y / 2.0;
        if h > half_x || h > half_y {
            max_half = (max_half * 0.9).max(MIN_HALF);
            continue;
        }
        let cx = rng.random_range(h..=spec.arena_x - h);
        let cy = rng.random_range(h..=spec.arena_y - h);
        let candidate = if pillar {
            Obstacle::Box {
                center: [cx, cy, half_z],
                half_extents: [h, h, half_z],
            }
        } else {
            Obstacle::Cylinder {
                center: [cx, cy, half_z],
                radius: h,
                half_height: half_z,
            }
        };
        if respects_reserve(&candidate, reserved) && !obstacles.iter().any(|o| overlaps(o, &candidate)) {
            covered += area_of(h);
            obstacles.push(candidate);
            fails = 0;
        } else {
            fails += 1;
            if fails >= SHRINK_AFTER {
                max_half = (max_half * 0.9).max(MIN_HALF);
                fails = 0;
            }
        }
    }
    None
}

/// Boolean coverage raster used to measure overlapping footprints.
struct Raster {
    nx: usize,
    ny: usize,
    cell: f64,
    bits: Vec<bool>,
    filled: usize,
}

impl Raster {
    fn new(spec: &ScenarioSpec) -> Self {
        let nx = ((spec.arena_x / RASTER_CELL).ceil() as usize).max(1);
        let ny = ((spec.arena_y / RASTER_CELL).ceil() as usize).max(1);
        Self {
            nx,
            ny,
            cell: RASTER_CELL,
            bits: vec![false; nx * ny],
            filled: 0,
        }
    }

    fn cell_range(&self, lo: f64, hi: f64, n: usize) -> std::ops::Range<usize> {
        let a = ((lo / self.cell - 0.5).ceil().max(0.0)) as usize;
        let b = (((hi / self.cell - 0.5).floor() + 1.0).max(0.0) as usize).min(n);
        a..b.max(a)
    }

    fn cells_of(&self, o: &Obstacle) -> Vec<usize> {
        let [x0, y0, x1, y1] = o.footprint_bounds();
        let mut out = Vec::new();
        for j in self.cell_range(y0, y1, self.ny) {
            let y = (j as f64 + 0.5) * self.cell;
            for i in self.cell_range(x0, x1, self.nx) {
                let x = (i as f64 + 0.5) * self.cell;
                if o.footprint_contains(x, y) {
                    out.push(j * self.nx + i);
                }
            }
        }
        out
    }

    fn fresh(&self, cells: &[usize]) -> usize {
        cells.iter().filter(|&&c| !self.bits[c]).count()
    }

    fn mark(&mut self, cells: &[usize]) {
        for &c in cells {
            if !self.bits[c] {
                self.bits[c] = true;
                self.filled += 1;
            }
        }
    }

    fn fraction(&self) -> f64 {
        self.filled as f64 / self.bits.len() as f64
    }
}

/// Grounded boxes and cylinders of partial height plus floating spheres.
fn place_mixed(spec: &ScenarioSpec, reserved: &[Vec3], rng: &mut ChaCha8Rng) -> Option<Vec<Obstacle>> {
    let mut raster = Raster::new(spec);
    let total = raster.bits.len() as f64;
    let target = spec.density;
    let mut obstacles: Vec<Obstacle> = Vec::new();
    let mut size_scale: f64 = 1.0;
    let mut fails = 0;
    for _ in 0..TRIES_PER_ATTEMPT {
        if raster.fraction() >= target * (1.0 - FILL_SLACK) {
            return Some(obstacles);
        }
        let kind = match obstacles.len() {
            0 => rng.random_range(0..3),
            1 => {
                let first = kind_index(&obstacles[0]);
                (first + rng.random_range(1..3)) % 3
            }
            _ => rng.random_range(0..3),
        };
        let cap = ((target * (1.0 + FILL_SLACK) - raster.fraction()) * total * RASTER_CELL * RASTER_CELL).max(0.0);
        let candidate = draw_mixed(kind, spec, size_scale, cap, rng);
        let Some(candidate) = candidate else {
            // remaining room is below the smallest shape
            return (raster.fraction() >= target * (1.0 - 2.0 * FILL_SLACK) && obstacles.len() >= 2)
                .then_some(obstacles);
        };
        let mut accepted = false;
        if respects_reserve(&candidate, reserved) {
            let cells = raster.cells_of(&candidate);
            let fresh = raster.fresh(&cells);
            let after = (raster.filled + fresh) as f64 / total;
            if fresh > 0 && after <= target * (1.0 + FILL_SLACK) {
                raster.mark(&cells);
                obstacles.push(candidate);
                accepted = true;
            }
        }
        if accepted {
            fails = 0;
        } else {
            fails += 1;
            if fails >= SHRINK_AFTER {
                size_scale = (size_scale * 0.9).max(0.0);
                fails = 0;
            }
        }
    }
    None
}

fn kind_index(o: &Obstacle) -> usize {
    match o {
        Obstacle::Box { .. } => 0,
        Obstacle::Cylinder { .. } => 1,
        Obstacle::Sphere { .. } => 2,
    }
}

/// Draws one mixed-scene shape whose footprint area is at most `cap`.
fn draw_mixed(kind: usize, spec: &ScenarioSpec, scale: f64, cap: f64, rng: &mut ChaCha8Rng) -> Option<Obstacle> {
    let alt = spec.altitude_max;
    let fit = |lo: f64, hi: f64, area_per_sq: f64| -> Option<(f64, f64)> {
        let hi = (hi * scale)
            .min((cap / area_per_sq).sqrt())
            .min(spec.arena_x / 2.0)
            .min(spec.arena_y / 2.0);
        if hi < MIN_HALF {
            return None;
        }
        Some((lo.min(hi).max(MIN_HALF).min(hi), hi))
    };
    let sample = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| if lo < hi { rng.random_range(lo..hi) } else { hi };
    match kind {
        0 => {
            let range = fit(0.5, 2.0, 4.0)?;
            let hx = sample(rng, range);
            let hy = sample(rng, (range.0.min(hx), hx.max(range.0)));
            let hz = rng.random_range(0.15 * alt..=0.5 * alt);
            let cx = rng.random_range(hx..=spec.arena_x - hx);
            let cy = rng.random_range(hy..=spec.arena_y - hy);
            Some(Obstacle::Box {
                center: [cx, cy, hz],
                half_extents: [hx, hy, hz],
            })
        }
        1 => {
            let r = sample(rng, fit(0.5, 2.0, std::f64::consts::PI)?);
            let hz = rng.random_range(0.15 * alt..=0.5 * alt);
            let cx = rng.random_range(r..=spec.arena_x - r);
            let cy = rng.random_range(r..=spec.arena_y - r);
            Some(Obstacle::Cylinder {
                center: [cx, cy, hz],
                radius: r,
                half_height: hz,
            })
        }
        _ => {
            let (lo, hi) = fit(0.75, 2.5, std::f64::consts::PI)?;
            let hi = hi.min(alt / 2.0);
            if hi < MIN_HALF {
                return None;
            }
            let r = sample(rng, (lo.min(hi), hi));
            let cx = rng.random_range(r..=spec.arena_x - r);
            let cy = rng.random_range(r..=spec.arena_y - r);
            let cz = rng.random_range(r..=alt - r);
            Some(Obstacle::Sphere {
                center: [cx, cy, cz],
                radius: r,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OccupancyEstimate {
    pub fraction: f64,
    pub std_error: f64,
}

/// Monte-Carlo estimate of the ground-plane footprint fraction.
///
/// Panics if `samples < 10_000`.
pub fn occupancy_fraction(map: &ScenarioMap, samples: usize, seed: u64) -> OccupancyEstimate {
    assert!(samples >= 10_000, "occupancy_fraction needs at least 10^4 samples");
    let spec = &map.spec;
    let bucket = 2.0;
    let nx = (spec.arena_x / bucket).ceil().max(1.0) as usize;
    let ny = (spec.arena_y / bucket).ceil().max(1.0) as usize;
    let mut grid: Vec<Vec<usize>> = vec![Vec::new(); nx * ny];
    let clampi = |v: f64, n: usize| (v / bucket).floor().clamp(0.0, (n - 1) as f64) as usize;
    for (k, o) in map.obstacles.iter().enumerate() {
        let [x0, y0, x1, y1] = o.footprint_bounds();
        for j in clampi(y0, ny)..=clampi(y1, ny) {
            for i in clampi(x0, nx)..=clampi(x1, nx) {
                grid[j * nx + i].push(k);
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0usize;
    for _ in 0..samples {
        let x = rng.random::<f64>() * spec.arena_x;
        let y = rng.random::<f64>() * spec.arena_y;
        let cell = &grid[clampi(y, ny) * nx + clampi(x, nx)];
        if cell.iter().any(|&k| map.obstacles[k].footprint_contains(x, y)) {
            hits += 1;
        }
    }
    let p = hits as f64 / samples as f64;
    OccupancyEstimate {
        fraction: p,
        std_error: (p * (1.0 - p) / samples as f64).sqrt(),
    }
}

#[derive(Serialize)]
struct FileOut<'a> {
    format_version: u32,
    scenario_id: &'a str,
    spec: &'a ScenarioSpec,
    obstacles: &'a [Obstacle],
    spawn_points: &'a [Vec3],
    goal_points: &'a [Vec3],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FileIn {
    #[allow(dead_code)]
    format_version: u32,
    scenario_id: String,
    spec: ScenarioSpec,
    obstacles: Vec<Obstacle>,
    spawn_points: Vec<Vec3>,
    goal_points: Vec<Vec3>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

pub fn scenario_to_string(map: &ScenarioMap) -> String {
    let file = FileOut {
        format_version: FORMAT_VERSION,
        scenario_id: &map.scenario_id,
        spec: &map.spec,
        obstacles: &map.obstacles,
        spawn_points: &map.spawn_points,
        goal_points: &map.goal_points,
    };
    let mut s = serde_json::to_string_pretty(&file).expect("scenario maps always serialize");
    s.push('\n');
    s
}

pub fn scenario_from_str(text: &str) -> Result<ScenarioMap, ScenarioError> {
    let corrupt = |e: serde_json::Error| ScenarioError::CorruptFile {
        offset: byte_offset(text, e.line(), e.column()),
        reason: e.to_string(),
    };
    let probe: VersionProbe = serde_json::from_str(text).map_err(corrupt)?;
    if probe.format_version != FORMAT_VERSION {
        return Err(ScenarioError::FormatVersionMismatch {
            found: probe.format_version,
            expected: FORMAT_VERSION,
        });
    }
    let f: FileIn = serde_json::from_str(text).map_err(corrupt)?;
    Ok(ScenarioMap {
        spec: f.spec,
        obstacles: f.obstacles,
        spawn_points: f.spawn_points,
        goal_points: f.goal_points,
        scenario_id: f.scenario_id,
    })
}

pub fn save_scenario(map: &ScenarioMap, path: &Path) -> Result<(), ScenarioError> {
    fs::write(path, scenario_to_string(map)).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_scenario(path: &Path) -> Result<ScenarioMap, ScenarioError> {
    let bytes = fs::read(path).map_err(|source| ScenarioError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let text = String::from_utf8(bytes).map_err(|e| ScenarioError::CorruptFile {
        offset: e.utf8_error().valid_up_to(),
        reason: "file is not UTF-8".into(),
    })?;
    scenario_from_str(&text)
}

/// Converts serde_json's 1-based line and column into a byte offset.
fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}
