//! Deterministic synthetic terrain, obstacles, trajectories and sensors.
//!
//! The terrain is an analytic heightfield (a plane plus Gaussian hills and
//! valleys) with vertical-prism obstacles on top. LiDAR and depth-camera rays
//! are cast by conservative sphere tracing against the heightfield (the step
//! never exceeds the vertical clearance divided by the worst-case closing
//! rate) and exact intersection against obstacle prisms.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bevproject::CameraModel;
use crate::error::{Error, Result};
use crate::gridmap::{GridMap, Layer, Pose2p5, RangeSpec, CONFIDENCE, ELEVATION, RISK};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hill {
    pub cx: f64,
    pub cy: f64,
    /// Negative amplitudes make valleys.
    pub amplitude: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ObstacleShape {
    /// Vertical cylinder.
    Tree { radius: f64 },
    /// Axis-aligned box.
    Rock { half_x: f64, half_y: f64 },
}

/// A vertical prism standing on the terrain; its top is `height` above the
/// ground at its center.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub cx: f64,
    pub cy: f64,
    pub height: f64,
    pub shape: ObstacleShape,
    /// Absolute top height, fixed at generation time.
    pub top_z: f64,
}

impl Obstacle {
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        match self.shape {
            ObstacleShape::Tree { radius } => (x - self.cx).hypot(y - self.cy) <= radius,
            ObstacleShape::Rock { half_x, half_y } => {
                (x - self.cx).abs() <= half_x && (y - self.cy).abs() <= half_y
            }
        }
    }

    /// Footprint radius bound used for placement checks.
    pub fn bounding_radius(&self) -> f64 {
        match self.shape {
            ObstacleShape::Tree { radius } => radius,
            ObstacleShape::Rock { half_x, half_y } => half_x.hypot(half_y),
        }
    }

    /// Entry/exit ray parameters of the infinite vertical prism, if the ray's
    /// xy projection crosses it.
    fn xy_interval(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, f64)> {
        let (ox, oy) = (o[0] - self.cx, o[1] - self.cy);
        match self.shape {
            ObstacleShape::Tree { radius } => {
                let a = d[0] * d[0] + d[1] * d[1];
                if a < 1e-18 {
                    return (ox * ox + oy * oy <= radius * radius).then_some((f64::NEG_INFINITY, f64::INFINITY));
                }
                let b = 2.0 * (ox * d[0] + oy * d[1]);
                let c = ox * ox + oy * oy - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                Some(((-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)))
            }
            ObstacleShape::Rock { half_x, half_y } => {
                let mut lo = f64::NEG_INFINITY;
                let mut hi = f64::INFINITY;
                for (oc, dc, h) in [(ox, d[0], half_x), (oy, d[1], half_y)] {
                    if dc.abs() < 1e-15 {
                        if oc.abs() > h {
                            return None;
                        }
                    } else {
                        let t1 = (-h - oc) / dc;
                        let t2 = (h - oc) / dc;
                        lo = lo.max(t1.min(t2));
                        hi = hi.min(t1.max(t2));
                    }
                }
                (lo <= hi).then_some((lo, hi))
            }
        }
    }

    /// First intersection of a ray (unit `d`) with this obstacle at `t ≥ 0`.
    pub fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<f64> {
        let (t_in, t_out) = self.xy_interval(o, d)?;
        if t_out < 0.0 {
            return None;
        }
        if t_in >= 0.0 && o[2] + d[2] * t_in <= self.top_z {
            return Some(t_in);
        }
        // Top face.
        if d[2] < 0.0 {
            let t_top = (self.top_z - o[2]) / d[2];
            if t_top >= t_in.max(0.0) && t_top <= t_out {
                return Some(t_top);
            }
        }
        None
    }
}

/// Knobs for [`generate_world`]; also the on-disk world config format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub seed: u64,
    /// Worlds span `[-half_size, half_size]²`.
    pub half_size: f64,
    pub slope_x: f64,
    pub slope_y: f64,
    pub hills: usize,
    pub hill_amplitude_min: f64,
    pub hill_amplitude_max: f64,
    pub hill_sigma_min: f64,
    pub hill_sigma_max: f64,
    pub trees: usize,
    pub tree_radius_min: f64,
    pub tree_radius_max: f64,
    pub tree_height_min: f64,
    pub tree_height_max: f64,
    pub rocks: usize,
    pub rock_half_min: f64,
    pub rock_half_max: f64,
    pub rock_height_min: f64,
    pub rock_height_max: f64,
    /// Obstacles are kept out of this radius around the world origin.
    pub clear_radius: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            seed: 0,
            half_size: 400.0,
            slope_x: 0.0,
            slope_y: 0.0,
            hills: 14,
            hill_amplitude_min: -4.0,
            hill_amplitude_max: 7.0,
            hill_sigma_min: 12.0,
            hill_sigma_max: 35.0,
            trees: 120,
            tree_radius_min: 0.3,
            tree_radius_max: 0.8,
            tree_height_min: 4.0,
            tree_height_max: 12.0,
            rocks: 40,
            rock_half_min: 0.4,
            rock_half_max: 1.5,
            rock_height_min: 0.6,
            rock_height_max: 2.0,
            clear_radius: 6.0,
        }
    }
}

impl WorldConfig {
    /// Flat, empty world.
    pub fn flat(half_size: f64) -> Self {
        WorldConfig {
            half_size,
            hills: 0,
            trees: 0,
            rocks: 0,
            ..WorldConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |lo: f64, hi: f64, what: &str| {
            if lo.is_finite() && hi.is_finite() && lo <= hi {
                Ok(())
            } else {
                Err(Error::InvalidConfig(format!("{what}: min {lo} > max {hi}")))
            }
        };
        if !(self.half_size.is_finite() && self.half_size > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "half_size must be positive, got {}",
                self.half_size
            )));
        }
        ordered(self.hill_amplitude_min, self.hill_amplitude_max, "hill amplitude")?;
        ordered(self.hill_sigma_min, self.hill_sigma_max, "hill sigma")?;
        ordered(self.tree_radius_min, self.tree_radius_max, "tree radius")?;
        ordered(self.tree_height_min, self.tree_height_max, "tree height")?;
        ordered(self.rock_half_min, self.rock_half_max, "rock half size")?;
        ordered(self.rock_height_min, self.rock_height_max, "rock height")?;
        if self.hills > 0 && self.hill_sigma_min <= 0.0 {
            return Err(Error::InvalidConfig("hill sigma must be positive".into()));
        }
        if self.tree_radius_min <= 0.0 || self.rock_half_min <= 0.0 {
            return Err(Error::InvalidConfig("obstacle sizes must be positive".into()));
        }
        let margin = self.tree_radius_max.max(self.rock_half_max * 2f64.sqrt());
        if (self.trees > 0 || self.rocks > 0) && self.half_size <= margin + self.clear_radius {
            return Err(Error::InvalidConfig("world too small for obstacles".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: WorldConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("world config serializes")
    }
}

/// Immutable analytic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub half_size: f64,
    pub slope_x: f64,
    pub slope_y: f64,
    pub hills: Vec<Hill>,
    pub obstacles: Vec<Obstacle>,
    /// Upper bound on |∇z| over the whole world.
    lipschitz: f64,
}

pub fn generate_world(config: &WorldConfig) -> Result<World> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let hs = config.half_size;
    let mut hills = Vec::with_capacity(config.hills);
    for _ in 0..config.hills {
        hills.push(Hill {
            cx: rng.random_range(-hs..=hs),
            cy: rng.random_range(-hs..=hs),
            amplitude: rng.random_range(config.hill_amplitude_min..=config.hill_amplitude_max),
            sigma: rng.random_range(config.hill_sigma_min..=config.hill_sigma_max),
        });
    }
    let mut world = World::new(hs, config.slope_x, config.slope_y, hills, Vec::new());
    let place = |rng: &mut ChaCha8Rng, margin: f64| loop {
        let x = rng.random_range(-hs + margin..=hs - margin);
        let y = rng.random_range(-hs + margin..=hs - margin);
        if x.hypot(y) > config.clear_radius + margin {
            break (x, y);
        }
    };
    for _ in 0..config.trees {
        let radius = rng.random_range(config.tree_radius_min..=config.tree_radius_max);
        let height = rng.random_range(config.tree_height_min..=config.tree_height_max);
        let (cx, cy) = place(&mut rng, radius);
        world.add_obstacle(cx, cy, height, ObstacleShape::Tree { radius });
    }
    for _ in 0..config.rocks {
        let half_x = rng.random_range(config.rock_half_min..=config.rock_half_max);
        let half_y = rng.random_range(config.rock_half_min..=config.rock_half_max);
        let height = rng.random_range(config.rock_height_min..=config.rock_height_max);
        let (cx, cy) = place(&mut rng, half_x.hypot(half_y));
        world.add_obstacle(cx, cy, height, ObstacleShape::Rock { half_x, half_y });
    }
    Ok(world)
}

const RISK_W_SLOPE: f64 = 0.5;
const RISK_W_OBSTACLE: f64 = 1.0;
const RISK_W_ROUGH: f64 = 0.3;
const ROUGH_MAX_M: f64 = 0.3;
/// Stencil half-width for the roughness measure.
pub const ROUGHNESS_STENCIL_M: f64 = 0.4;

/// `tan(30°)`, the slope that saturates the slope term.
pub fn risk_slope_max() -> f64 {
    30f64.to_radians().tan()
}

/// Risk heuristic shared by the oracle and the voxel-map estimator.
pub fn risk_formula(slope: f64, obstacle_occupancy: f64, roughness: f64) -> f64 {
    (RISK_W_SLOPE * slope / risk_slope_max()
        + RISK_W_OBSTACLE * obstacle_occupancy
        + RISK_W_ROUGH * roughness / ROUGH_MAX_M)
        .clamp(0.0, 1.0)
}

impl World {
    pub fn new(half_size: f64, slope_x: f64, slope_y: f64, hills: Vec<Hill>, obstacles: Vec<Obstacle>) -> Self {
        let lipschitz = slope_x.hypot(slope_y)
            + hills
                .iter()
                .map(|h| h.amplitude.abs() / h.sigma * (-0.5f64).exp())
                .sum::<f64>();
        World {
            half_size,
            slope_x,
            slope_y,
            hills,
            obstacles,
            lipschitz,
        }
    }

    /// Adds an obstacle whose top sits `height` above the ground at its center.
    pub fn add_obstacle(&mut self, cx: f64, cy: f64, height: f64, shape: ObstacleShape) {
        let top_z = self.height(cx, cy) + height;
        self.obstacles.push(Obstacle {
            cx,
            cy,
            height,
            shape,
            top_z,
        });
    }

    pub fn in_bounds(&self, x: f64, y: f64) -> bool {
        x.abs() <= self.half_size && y.abs() <= self.half_size
    }

    /// Terrain height (obstacles excluded).
    pub fn height(&self, x: f64, y: f64) -> f64 {
        let mut z = self.slope_x * x + self.slope_y * y;
        for h in &self.hills {
            let dx = x - h.cx;
            let dy = y - h.cy;
            let r2 = dx * dx + dy * dy;
            let s2 = h.sigma * h.sigma;
            if r2 < 80.0 * s2 {
                z += h.amplitude * (-0.5 * r2 / s2).exp();
            }
        }
        z
    }

    pub fn gradient(&self, x: f64, y: f64) -> (f64, f64) {
        let mut gx = self.slope_x;
        let mut gy = self.slope_y;
        for h in &self.hills {
            let dx = x - h.cx;
            let dy = y - h.cy;
            let s2 = h.sigma * h.sigma;
            let r2 = dx * dx + dy * dy;
            if r2 < 80.0 * s2 {
                let e = h.amplitude * (-0.5 * r2 / s2).exp() / s2;
                gx -= e * dx;
                gy -= e * dy;
            }
        }
        (gx, gy)
    }

    /// Top of the surface including obstacles.
    pub fn surface_height(&self, x: f64, y: f64) -> f64 {
        self.obstacle_at(x, y)
            .map_or_else(|| self.height(x, y), |o| o.top_z.max(self.height(x, y)))
    }

    pub fn obstacle_at(&self, x: f64, y: f64) -> Option<&Obstacle> {
        self.obstacles.iter().find(|o| o.contains_xy(x, y))
    }

    /// Largest deviation of `z` from the mean of its two stencil neighbours.
    pub fn roughness(&self, x: f64, y: f64) -> f64 {
        let h = ROUGHNESS_STENCIL_M;
        let z = self.height(x, y);
        let rx = 0.5 * (self.height(x + h, y) + self.height(x - h, y)) - z;
        let ry = 0.5 * (self.height(x, y + h) + self.height(x, y - h)) - z;
        rx.abs().max(ry.abs())
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    /// Distance along a unit ray to the terrain, refined by bisection to
    /// below 1e-4 m.
    fn march_terrain(&self, o: [f64; 3], d: [f64; 3], max_t: f64, min_step: f64) -> Option<f64> {
        let closing_rate = self.lipschitz * d[0].hypot(d[1]) - d[2];
        let clearance = |t: f64| o[2] + d[2] * t - self.height(o[0] + d[0] * t, o[1] + d[1] * t);
        let mut t = 0.0;
        let mut h = clearance(t);
        if h < 0.0 {
            return None;
        }
        if closing_rate <= 0.0 {
            return None;
        }
        while t < max_t {
            let step = (h / closing_rate).max(min_step);
            let t_next = (t + step).min(max_t);
            let h_next = clearance(t_next);
            if h_next <= 0.0 {
                let (mut lo, mut hi) = (t, t_next);
                while hi - lo > 1e-4 {
                    let mid = 0.5 * (lo + hi);
                    if clearance(mid) > 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                return Some(hi);
            }
            if t_next >= max_t {
                break;
            }
            t = t_next;
            h = h_next;
        }
        None
    }

    /// First surface hit of a unit-direction ray within `max_t`.
    pub fn cast_ray(&self, o: [f64; 3], d: [f64; 3], max_t: f64, min_step: f64) -> Option<RayHit> {
        let mut best = self
            .march_terrain(o, d, max_t, min_step)
            .map(|t| RayHit { t, obstacle: None });
        for (k, ob) in self.obstacles.iter().enumerate() {
            if let Some(t) = ob.intersect(o, d) {
                if t <= max_t && best.map_or(true, |b| t < b.t) {
                    best = Some(RayHit { t, obstacle: Some(k) });
                }
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub obstacle: Option<usize>,
}

/// Analytic risk at a world position.
pub fn true_risk(world: &World, x: f64, y: f64) -> Result<f64> {
    if !world.in_bounds(x, y) {
        return Err(Error::OutOfBounds(format!("({x}, {y})")));
    }
    if world.obstacle_at(x, y).is_some() {
        return Ok(1.0);
    }
    let (gx, gy) = world.gradient(x, y);
    Ok(risk_formula(gx.hypot(gy), 0.0, world.roughness(x, y)))
}

/// Oracle map: terrain height relative to the pose at every cell center,
/// analytic risk, and unit confidence.
pub fn true_elevation_map(world: &World, pose: &Pose2p5, spec: &RangeSpec) -> GridMap {
    let n = spec.cells;
    let rows: Vec<(Vec<f32>, Vec<f32>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut ele = Vec::with_capacity(n);
            let mut risk = Vec::with_capacity(n);
            for j in 0..n {
                let (lx, ly) = spec.cell_center(i, j);
                let (wx, wy) = pose.to_world(lx, ly);
                ele.push((world.height(wx, wy) - pose.z) as f32);
                let r = if world.in_bounds(wx, wy) {
                    true_risk(world, wx, wy).unwrap_or(1.0)
                } else {
                    1.0
                };
                risk.push(r as f32);
            }
            (ele, risk)
        })
        .collect();
    let mut ele = Vec::with_capacity(n * n);
    let mut risk = Vec::with_capacity(n * n);
    for (e, r) in rows {
        ele.extend(e);
        risk.extend(r);
    }
    let mut map = GridMap::new(*spec, *pose, 0.0);
    let all = vec![true; n * n];
    map.insert(ELEVATION, Layer::from_parts(n, ele, all.clone()).expect("sized"))
        .expect("elevation layer");
    map.insert(RISK, Layer::from_parts(n, risk, all).expect("sized"))
        .expect("risk layer");
    map.insert(CONFIDENCE, Layer::filled(n, 1.0)).expect("confidence layer");
    map
}

/// Timestamped poses at a fixed step.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub samples: Vec<(f64, Pose2p5)>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose2p5> {
        self.samples.iter().map(|(_, p)| p)
    }

    /// Cumulative xy travel distance at each sample.
    pub fn travel(&self) -> Vec<f64> {
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.samples.len());
        for (k, (_, p)) in self.samples.iter().enumerate() {
            if k > 0 {
                acc += p.xy_distance(&self.samples[k - 1].1);
            }
            out.push(acc);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectoryConfig {
    pub start_x: f64,
    pub start_y: f64,
    pub heading: f64,
    pub speed: f64,
    pub duration: f64,
    pub dt: f64,
    /// Amplitude (rad) of a sinusoidal heading weave.
    pub weave_amplitude: f64,
    pub weave_period: f64,
}

impl Default for TrajectoryConfig {
    fn default() -> Self {
        TrajectoryConfig {
            start_x: 0.0,
            start_y: 0.0,
            heading: 0.0,
            speed: 5.0,
            duration: 40.0,
            dt: 0.5,
            weave_amplitude: 0.3,
            weave_period: 30.0,
        }
    }
}

/// Drives a weaving path that steers around obstacles by small heading nudges
/// and stops at the world boundary.
pub fn generate_trajectory(world: &World, cfg: &TrajectoryConfig) -> Result<Trajectory> {
    if !(cfg.dt > 0.0 && cfg.speed >= 0.0 && cfg.duration >= 0.0) {
        return Err(Error::InvalidConfig("trajectory dt, speed and duration must be positive".into()));
    }
    if !world.in_bounds(cfg.start_x, cfg.start_y) {
        return Err(Error::OutOfBounds("trajectory start".into()));
    }
    let steps = (cfg.duration / cfg.dt).round() as usize;
    let mut samples = Vec::with_capacity(steps + 1);
    let (mut x, mut y) = (cfg.start_x, cfg.start_y);
    for k in 0..=steps {
        let t = k as f64 * cfg.dt;
        let mut yaw = cfg.heading
            + cfg.weave_amplitude * (2.0 * std::f64::consts::PI * t / cfg.weave_period.max(1e-9)).sin();
        // Nudge away from obstacles within a few metres ahead.
        for ob in &world.obstacles {
            let (dx, dy) = (ob.cx - x, ob.cy - y);
            let dist = dx.hypot(dy);
            let ahead = dx * yaw.cos() + dy * yaw.sin();
            if dist < ob.bounding_radius() + 4.0 && ahead > 0.0 {
                let side = -dx * yaw.sin() + dy * yaw.cos();
                yaw -= if side > 0.0 { 0.6 } else { -0.6 };
            }
        }
        let pose = Pose2p5::new(x, y, world.height(x, y), yaw);
        samples.push((t, pose));
        let (nx, ny) = (x + cfg.speed * cfg.dt * yaw.cos(), y + cfg.speed * cfg.dt * yaw.sin());
        if !world.in_bounds(nx, ny) {
            break;
        }
        x = nx;
        y = ny;
    }
    Ok(Trajectory { dt: cfg.dt, samples })
}

/// Spinning multi-ring LiDAR.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarModel {
    pub rings: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub azimuth_steps: usize,
    pub rate_hz: f64,
    pub max_range: f64,
    pub march_step: f64,
    pub mount_height: f64,
}

impl Default for LidarModel {
    fn default() -> Self {
        LidarModel {
            rings: 32,
            elevation_min_deg: -25.0,
            elevation_max_deg: 15.0,
            azimuth_steps: 360,
            rate_hz: 10.0,
            max_range: 120.0,
            march_step: 0.05,
            mount_height: 2.0,
        }
    }
}

impl LidarModel {
    /// Unit ray directions in the (gravity-aligned, yawed) sensor frame.
    pub fn ray_directions(&self) -> Vec<[f64; 3]> {
        let mut dirs = Vec::with_capacity(self.rings * self.azimuth_steps);
        for r in 0..self.rings {
            let el = if self.rings == 1 {
                self.elevation_min_deg
            } else {
                self.elevation_min_deg
                    + (self.elevation_max_deg - self.elevation_min_deg) * r as f64 / (self.rings - 1) as f64
            }
            .to_radians();
            for a in 0..self.azimuth_steps {
                let az = 2.0 * std::f64::consts::PI * a as f64 / self.azimuth_steps as f64;
                dirs.push([el.cos() * az.cos(), el.cos() * az.sin(), el.sin()]);
            }
        }
        dirs
    }

    /// Sensor pose for a vehicle pose.
    pub fn sensor_pose(&self, vehicle: &Pose2p5) -> Pose2p5 {
        Pose2p5 {
            z: vehicle.z + self.mount_height,
            ..*vehicle
        }
    }
}

/// One LiDAR sweep. Points are in the sensor frame (gravity-aligned, rotated by the sensor yaw).
#[derive(Debug, Clone, PartialEq)]
pub struct SimScan {
    pub points: Vec<[f32; 3]>,
    pub ranges: Vec<f32>,
    pub sensor_pose: Pose2p5,
    pub timestamp: f64,
}

impl SimScan {
    /// Points in the world frame.
    pub fn world_points(&self) -> Vec<[f64; 3]> {
        self.points
            .iter()
            .map(|p| {
                let (wx, wy) = self.sensor_pose.to_world(f64::from(p[0]), f64::from(p[1]));
                [wx, wy, self.sensor_pose.z + f64::from(p[2])]
            })
            .collect()
    }
}

/// Casts rays from an explicit sensor pose.
pub fn simulate_scan_from(world: &World, sensor_pose: &Pose2p5, lidar: &LidarModel, timestamp: f64) -> SimScan {
    let (s, c) = sensor_pose.yaw.sin_cos();
    let o = [sensor_pose.x, sensor_pose.y, sensor_pose.z];
    let hits: Vec<Option<([f32; 3], f32)>> = lidar
        .ray_directions()
        .into_par_iter()
        .map(|dl| {
            let d = [c * dl[0] - s * dl[1], s * dl[0] + c * dl[1], dl[2]];
            world
                .cast_ray(o, d, lidar.max_range, lidar.march_step)
                .map(|h| {
                    let t = h.t;
                    ([(dl[0] * t) as f32, (dl[1] * t) as f32, (dl[2] * t) as f32], t as f32)
                })
        })
        .collect();
    let mut points = Vec::with_capacity(hits.len());
    let mut ranges = Vec::with_capacity(hits.len());
    for (p, r) in hits.into_iter().flatten() {
        points.push(p);
        ranges.push(r);
    }
    SimScan {
        points,
        ranges,
        sensor_pose: *sensor_pose,
        timestamp,
    }
}

/// Simulates a sweep from a LiDAR mounted on a vehicle at `pose`.
pub fn simulate_scan(world: &World, pose: &Pose2p5, lidar: &LidarModel, timestamp: f64) -> SimScan {
    simulate_scan_from(world, &lidar.sensor_pose(pose), lidar, timestamp)
}

/// Number of geometric feature channels a [`SimImage`] carries per pixel.
pub const IMAGE_FEATURES: usize = 3;

/// Ideal pinhole render: per-pixel z-depth plus geometric feature channels
/// (surface-normal z, obstacle flag, height above local ground).
#[derive(Debug, Clone, PartialEq)]
pub struct SimImage {
    pub width: usize,
    pub height: usize,
    /// Camera-frame z-depth, `None` where the ray hit nothing.
    pub depth: Vec<Option<f32>>,
    pub features: Vec<[f32; IMAGE_FEATURES]>,
    pub camera: CameraModel,
    pub vehicle_pose: Pose2p5,
    pub timestamp: f64,
}

impl SimImage {
    pub fn depth_at(&self, u: usize, v: usize) -> Option<f32> {
        self.depth[v * self.width + u]
    }

    pub fn feature_at(&self, u: usize, v: usize) -> [f32; IMAGE_FEATURES] {
        self.features[v * self.width + u]
    }
}

/// Renders a depth/feature image from a camera mounted on the vehicle.
pub fn render_image(world: &World, vehicle_pose: &Pose2p5, camera: &CameraModel, max_range: f64, timestamp: f64) -> SimImage {
    let (w, h) = (camera.width, camera.height);
    let cam_to_world = camera.world_from_camera(vehicle_pose);
    let origin = cam_to_world.translation.vector;
    let o = [origin.x, origin.y, origin.z];
    let pixels: Vec<(Option<f32>, [f32; IMAGE_FEATURES])> = (0..w * h)
        .into_par_iter()
        .map(|k| {
            let (u, v) = (k % w, k / w);
            let ray_cam = camera.pixel_ray(u as f64, v as f64);
            let norm = ray_cam.norm();
            let dw = cam_to_world.rotation * (ray_cam / norm);
            let d = [dw.x, dw.y, dw.z];
            match world.cast_ray(o, d, max_range, 0.05) {
                None => (None, [0.0; IMAGE_FEATURES]),
                Some(hit) => {
                    let depth = hit.t / norm;
                    let p = [o[0] + d[0] * hit.t, o[1] + d[1] * hit.t, o[2] + d[2] * hit.t];
                    let ground = world.height(p[0], p[1]);
                    let feat = match hit.obstacle {
                        Some(idx) => {
                            let ob = &world.obstacles[idx];
                            let top = (p[2] - ob.top_z).abs() < 1e-6;
                            [if top { 1.0 } else { 0.0 }, 1.0, (p[2] - ground).max(0.0) as f32]
                        }
                        None => {
                            let (gx, gy) = world.gradient(p[0], p[1]);
                            [(1.0 / (1.0 + gx * gx + gy * gy).sqrt()) as f32, 0.0, 0.0]
                        }
                    };
                    (Some(depth as f32), feat)
                }
            }
        })
        .collect();
    let (depth, features) = pixels.into_iter().unzip();
    SimImage {
        width: w,
        height: h,
        depth,
        features,
        camera: camera.clone(),
        vehicle_pose: *vehicle_pose,
        timestamp,
    }
}
