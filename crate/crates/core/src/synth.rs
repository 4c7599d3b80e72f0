//! Synthetic multi-session scenes with known ground truth.
//!
//! A static world (undulating terrain, boxes, poles) is sampled once into a
//! fixed point set. Each keyframe sees the world points within sensor range,
//! expressed in its own frame, with optional per-point noise. Sessions store
//! keyframe poses integrated from noise-perturbed odometry, in a frame whose
//! origin is their first keyframe.

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix6, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{Pose, PointCloud, SpatialIndex};
use crate::graph::{BetweenFactor, Keyframe, NodeId, SessionGraph};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scenario {
    TwoLoop,
    LCorridor,
    GridTown,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::TwoLoop, Scenario::LCorridor, Scenario::GridTown];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::TwoLoop => "two-loop",
            Scenario::LCorridor => "L-corridor",
            Scenario::GridTown => "grid-town",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| {
                Error::param(format!(
                    "unknown scenario '{s}', expected one of two-loop, L-corridor, grid-town"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub scenario: Scenario,
    pub seed: u64,
    /// Per-step odometry noise, m.
    pub odometry_sigma_t: f64,
    /// Per-step odometry noise, degrees.
    pub odometry_sigma_r_deg: f64,
    /// Per-point measurement noise, m.
    pub point_sigma: f64,
    pub sensor_range: f64,
    pub sensor_height: f64,
    /// Surface samples per square meter.
    pub density: f64,
}

impl SynthParams {
    pub fn new(scenario: Scenario, seed: u64) -> Self {
        Self {
            scenario,
            seed,
            odometry_sigma_t: 0.01,
            odometry_sigma_r_deg: 0.1,
            point_sigma: 0.01,
            sensor_range: 9.0,
            sensor_height: 1.5,
            density: 30.0,
        }
    }

    pub fn noiseless(mut self) -> Self {
        self.odometry_sigma_t = 0.0;
        self.odometry_sigma_r_deg = 0.0;
        self.point_sigma = 0.0;
        self
    }

    fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("odometry_sigma_t", self.odometry_sigma_t),
            ("odometry_sigma_r_deg", self.odometry_sigma_r_deg),
            ("point_sigma", self.point_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::param(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.sensor_range > 1.0) || !(self.density > 0.0) || !self.sensor_height.is_finite() {
            return Err(Error::param("sensor range must exceed 1 m and density be positive"));
        }
        Ok(())
    }
}

/// Overlap of two keyframes' visible world-point sets: the smaller of the
/// two shared fractions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlantedOverlap {
    pub a: NodeId,
    pub b: NodeId,
    pub overlap: f64,
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub params: SynthParams,
    /// Session-frame keyframe poses from noisy odometry.
    pub sessions: Vec<SessionGraph>,
    /// Keyframe clouds in sensor coordinates.
    pub clouds: BTreeMap<NodeId, PointCloud>,
    /// World-frame keyframe poses.
    pub ground_truth: BTreeMap<NodeId, Pose>,
    /// Cross-session pairs with a nonzero shared fraction.
    pub overlaps: Vec<PlantedOverlap>,
}

struct World {
    points: Vec<Vector3<f64>>,
    terrain: Terrain,
}

struct Terrain {
    waves: Vec<(f64, f64, f64, f64)>,
}

impl Terrain {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..4)
            .map(|_| {
                let amp = rng.gen_range(0.05..0.15);
                let freq = TAU / rng.gen_range(4.0..12.0);
                let dir = rng.gen_range(0.0..PI);
                let phase = rng.gen_range(0.0..TAU);
                (amp, freq, dir, phase)
            })
            .collect();
        Self { waves }
    }

    fn height(&self, x: f64, y: f64) -> f64 {
        self.waves
            .iter()
            .map(|&(a, f, d, p)| a * (f * (x * d.cos() + y * d.sin()) + p).sin())
            .sum()
    }
}

/// Axis-aligned extent `[x0, x1] x [y0, y1]`.
#[derive(Clone, Copy)]
struct Rect {
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

fn sample_count(area: f64, density: f64, rng: &mut ChaCha8Rng) -> usize {
    let n = area * density;
    n.floor() as usize + usize::from(rng.gen::<f64>() < n.fract())
}

fn add_box(points: &mut Vec<Vector3<f64>>, center: Vector3<f64>, size: Vector3<f64>, yaw: f64, density: f64, rng: &mut ChaCha8Rng) {
    let pose = Pose::from_axis_angle(&Vector3::z(), yaw, center);
    let h = size / 2.0;
    // four walls and the roof, in box coordinates
    let faces: [(usize, f64, usize, usize); 5] = [(0, h.x, 1, 2), (0, -h.x, 1, 2), (1, h.y, 0, 2), (1, -h.y, 0, 2), (2, h.z, 0, 1)];
    for (axis, value, u, v) in faces {
        let n = sample_count(size[u] * size[v], density, rng);
        for _ in 0..n {
            let mut p = Vector3::zeros();
            p[axis] = value;
            p[u] = rng.gen_range(-h[u]..h[u]);
            p[v] = rng.gen_range(-h[v]..h[v]);
            points.push(pose.transform_point(&p));
        }
    }
}

fn add_pole(points: &mut Vec<Vector3<f64>>, base: Vector3<f64>, radius: f64, height: f64, density: f64, rng: &mut ChaCha8Rng) {
    let n = sample_count(TAU * radius * height, density, rng);
    for _ in 0..n {
        let a = rng.gen_range(0.0..TAU);
        points.push(base + Vector3::new(radius * a.cos(), radius * a.sin(), rng.gen_range(0.0..height)));
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

/// Keyframe positions and headings per session in world coordinates.
type Layout = Vec<Vec<(f64, f64, f64)>>;

fn circle(cx: f64, cy: f64, r: f64, start: f64, n: usize, ccw: bool) -> Vec<(f64, f64, f64)> {
    (0..n)
        .map(|k| {
            let s = if ccw { 1.0 } else { -1.0 };
            let a = start + s * TAU * k as f64 / n as f64;
            (cx + r * a.cos(), cy + r * a.sin(), a + s * PI / 2.0)
        })
        .collect()
}

fn line(from: (f64, f64), to: (f64, f64), n: usize) -> Vec<(f64, f64, f64)> {
    let yaw = (to.1 - from.1).atan2(to.0 - from.0);
    (0..n)
        .map(|k| {
            let t = k as f64 / (n - 1) as f64;
            (from.0 + t * (to.0 - from.0), from.1 + t * (to.1 - from.1), yaw)
        })
        .collect()
}

fn layout(scenario: Scenario) -> (Layout, Rect) {
    match scenario {
        Scenario::TwoLoop => (
            vec![circle(0.0, 0.0, 7.0, 0.0, 12, true), circle(5.0, 3.0, 7.0, 2.0, 12, false)],
            Rect { x0: -18.0, y0: -16.0, x1: 23.0, y1: 20.0 },
        ),
        Scenario::LCorridor => (
            vec![line((0.0, 0.0), (30.0, 0.0), 11), line((22.0, 1.0), (22.5, 30.0), 11)],
            Rect { x0: -10.0, y0: -10.0, x1: 40.0, y1: 40.0 },
        ),
        Scenario::GridTown => (
            vec![
                line((0.0, 0.0), (36.0, 0.0), 12),
                line((12.0, -10.0), (12.0, 24.0), 12),
                line((36.0, 12.0), (0.0, 12.0), 12),
            ],
            Rect { x0: -10.0, y0: -20.0, x1: 46.0, y1: 34.0 },
        ),
    }
}

fn build_world(scenario: Scenario, params: &SynthParams, paths: &Layout, extent: Rect, rng: &mut ChaCha8Rng) -> World {
    let terrain = Terrain::random(rng);
    let mut points = Vec::new();
    let area = (extent.x1 - extent.x0) * (extent.y1 - extent.y0);
    // terrain sampled at half density: it dominates the point budget
    for _ in 0..sample_count(area, params.density * 0.5, rng) {
        let x = rng.gen_range(extent.x0..extent.x1);
        let y = rng.gen_range(extent.y0..extent.y1);
        points.push(Vector3::new(x, y, terrain.height(x, y)));
    }
    let segments: Vec<((f64, f64), (f64, f64))> = paths
        .iter()
        .flat_map(|p| p.windows(2).map(|w| ((w[0].0, w[0].1), (w[1].0, w[1].1))))
        .chain(paths.iter().filter(|_| scenario == Scenario::TwoLoop).map(|p| {
            let (a, b) = (p[p.len() - 1], p[0]);
            ((a.0, a.1), (b.0, b.1))
        }))
        .collect();
    let clearance = |x: f64, y: f64| segments.iter().map(|&(a, b)| dist_to_segment((x, y), a, b)).fold(f64::INFINITY, f64::min);
    let (n_boxes, n_poles) = match scenario {
        Scenario::TwoLoop => (26, 30),
        Scenario::LCorridor => (30, 24),
        Scenario::GridTown => (40, 40),
    };
    let mut placed = 0;
    let mut attempts = 0;
    while placed < n_boxes && attempts < 10_000 {
        attempts += 1;
        let x = rng.gen_range(extent.x0..extent.x1);
        let y = rng.gen_range(extent.y0..extent.y1);
        let size: Vector3<f64> = Vector3::new(rng.gen_range(0.8..3.0), rng.gen_range(0.8..3.0), rng.gen_range(0.8..3.5));
        if clearance(x, y) < 0.5 * size.x.hypot(size.y) + 1.5 {
            continue;
        }
        let yaw = rng.gen_range(0.0..PI);
        let base = terrain.height(x, y) - 0.2;
        add_box(&mut points, Vector3::new(x, y, base + size.z / 2.0), size, yaw, params.density, rng);
        placed += 1;
    }
    placed = 0;
    attempts = 0;
    while placed < n_poles && attempts < 10_000 {
        attempts += 1;
        let x = rng.gen_range(extent.x0..extent.x1);
        let y = rng.gen_range(extent.y0..extent.y1);
        if clearance(x, y) < 1.5 {
            continue;
        }
        let radius = rng.gen_range(0.1..0.25);
        let height = rng.gen_range(2.0..4.0);
        add_pole(&mut points, Vector3::new(x, y, terrain.height(x, y) - 0.1), radius, height, params.density, rng);
        placed += 1;
    }
    World { points, terrain }
}

fn round_f32(v: Vector3<f64>) -> Vector3<f64> {
    v.map(|x| x as f32 as f64)
}

/// Builds the scene for `params`. Identical parameters give identical
/// scenes.
pub fn generate(params: &SynthParams) -> Result<SyntheticScene> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let (paths, extent) = layout(params.scenario);
    let world = build_world(params.scenario, params, &paths, extent, &mut rng);
    let index = SpatialIndex::from_points(world.points.clone());

    let mut ground_truth = BTreeMap::new();
    let mut visible: BTreeMap<NodeId, Vec<usize>> = BTreeMap::new();
    let mut clouds = BTreeMap::new();
    let mut sessions = Vec::new();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(params.seed);
    noise_rng.set_stream(1);
    let unit = Normal::new(0.0, 1.0).unwrap();

    for (s, path) in paths.iter().enumerate() {
        let s = s as u32;
        let truth: Vec<Pose> = path
            .iter()
            .map(|&(x, y, yaw)| {
                let tilt = Pose::exp(&Vector6::new(rng.gen_range(-0.02..0.02), rng.gen_range(-0.02..0.02), 0.0, 0.0, 0.0, 0.0));
                let heading = Pose::from_axis_angle(&Vector3::z(), yaw, Vector3::zeros());
                let position = Vector3::new(x, y, world.terrain.height(x, y) + params.sensor_height);
                Pose::from_parts(*(tilt * heading).quaternion(), position)
            })
            .collect();

        let mut graph = SessionGraph::new(s);
        let sigma_r = params.odometry_sigma_r_deg.to_radians();
        let sigma_t = params.odometry_sigma_t;
        let info_r = 1.0 / sigma_r.max(1e-4).powi(2);
        let info_t = 1.0 / sigma_t.max(1e-3).powi(2);
        let information = Matrix6::from_diagonal(&Vector6::new(info_r, info_r, info_r, info_t, info_t, info_t));
        let mut pose = Pose::identity();
        for (k, t) in truth.iter().enumerate() {
            let k = k as u32;
            if k > 0 {
                let step = truth[k as usize - 1].between(t);
                let d = Vector6::from_fn(|r, _| {
                    let sigma = if r < 3 { sigma_r } else { sigma_t };
                    sigma * unit.sample(&mut noise_rng)
                });
                let measured = if d == Vector6::zeros() { step } else { step.retract(&d) };
                pose = pose * measured;
                graph.between_factors.push(BetweenFactor {
                    from: k - 1,
                    to: k,
                    measurement: measured,
                    information,
                });
            }
            graph.keyframes.push(Keyframe { id: k, pose, cloud: None });

            let id = NodeId::new(s, k);
            let ids: Vec<usize> = index
                .within_radius(&t.translation(), params.sensor_range)
                .iter()
                .map(|n| n.index)
                .collect();
            let inv = t.inverse();
            let pts: Vec<Vector3<f64>> = ids
                .iter()
                .map(|&i| {
                    let mut p = inv.transform_point(&world.points[i]);
                    if params.point_sigma > 0.0 {
                        p += Vector3::from_fn(|_, _| params.point_sigma * unit.sample(&mut noise_rng));
                    }
                    round_f32(p)
                })
                .collect();
            if pts.len() < 500 {
                return Err(Error::Data(format!("synthetic keyframe {id} sees only {} points", pts.len())));
            }
            clouds.insert(id, PointCloud::new(pts)?.with_frame_id(k));
            let mut sorted = ids;
            sorted.sort_unstable();
            visible.insert(id, sorted);
            ground_truth.insert(id, *t);
        }
        sessions.push(graph);
    }

    let nodes: Vec<NodeId> = visible.keys().copied().collect();
    let mut overlaps = Vec::new();
    for (i, a) in nodes.iter().enumerate() {
        for b in &nodes[i + 1..] {
            if a.session == b.session {
                continue;
            }
            let (va, vb) = (&visible[a], &visible[b]);
            let shared = count_shared(va, vb);
            if shared > 0 {
                let overlap = (shared as f64 / va.len() as f64).min(shared as f64 / vb.len() as f64);
                overlaps.push(PlantedOverlap { a: *a, b: *b, overlap });
            }
        }
    }

    Ok(SyntheticScene {
        params: params.clone(),
        sessions,
        clouds,
        ground_truth,
        overlaps,
    })
}

fn count_shared(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

impl SyntheticScene {
    pub fn keyframe_count(&self) -> usize {
        self.clouds.len()
    }

    pub fn planted_overlap(&self, a: NodeId, b: NodeId) -> f64 {
        let (a, b) = (a.min(b), a.max(b));
        self.overlaps
            .iter()
            .find(|o| o.a == a && o.b == b)
            .map_or(0.0, |o| o.overlap)
    }
}
