//! Pseudo ground truth: hindsight fusion of per-frame maps, DEM inpainting
//! with ICP-refined alignment, and evaluation-region partitioning.

use kiddo::{ImmutableKdTree, SquaredEuclidean};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bevproject::{fuse, lift, pillar_features, splat, BevFeatureGrid, CameraModel, DepthBinning, DepthMode, LiftedPoints, PillarEncoder, PixelFeatureSpec, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::gridmap::{
    normalize_angle, world_to_cell, GridMap, Layer, Pose2p5, RangeSpec, RegionLabel, RegionLayer, CONFIDENCE, ELEVATION, RISK,
};
use crate::losses::OBSERVED_CONFIDENCE;
use crate::synthworld::{render_image, simulate_scan, LidarModel, SimScan, Trajectory, World};
use crate::voxelmap::{confidence_from_columns, heuristic_risk, revoxelize_pillars, ColumnGrid, VoxelMap, MAX_PILLARS_TEST, MAX_POINTS_PER_PILLAR};

/// Total span of frames fused around a query time (±30 s).
pub const HINDSIGHT_WINDOW_S: f64 = 60.0;
pub const DEFAULT_FITNESS_THRESHOLD: f64 = 0.6;
/// Minimum number of confidently observed cells needed for registration.
pub const MIN_REGISTRATION_CELLS: usize = 100;

/// Time-ordered per-frame maps with elevation, risk and confidence layers.
#[derive(Debug, Clone, Default)]
pub struct HindsightArchive {
    frames: Vec<GridMap>,
    pub window_s: f64,
}

impl HindsightArchive {
    pub fn new(window_s: f64) -> Self {
        HindsightArchive {
            frames: Vec::new(),
            window_s,
        }
    }

    /// Appends a frame; timestamps must be non-decreasing.
    pub fn push(&mut self, frame: GridMap) -> Result<()> {
        for name in [ELEVATION, RISK, CONFIDENCE] {
            frame.layer(name)?;
        }
        if let Some(last) = self.frames.last() {
            if frame.timestamp < last.timestamp {
                return Err(Error::InvalidConfig(format!(
                    "archive frames must be time-ordered ({} after {})",
                    frame.timestamp, last.timestamp
                )));
            }
        }
        self.frames.push(frame);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames(&self) -> &[GridMap] {
        &self.frames
    }

    /// Frames within `±window/2` of `t`, in time order.
    pub fn window(&self, t: f64) -> impl Iterator<Item = &GridMap> {
        let half = 0.5 * self.window_s;
        self.frames.iter().filter(move |f| (f.timestamp - t).abs() <= half + 1e-9)
    }
}

/// Fuses archive frames around `t` into a map centered on `query`.
///
/// Each target cell center is projected into every frame; elevation is the
/// mean of the valid observations (re-referenced to `query.z`), confidence
/// the maximum, and risk comes from the latest frame whose confidence at that
/// cell exceeds 0.1.
pub fn fuse_hindsight(archive: &HindsightArchive, query: &Pose2p5, t: f64, spec: &RangeSpec) -> Result<GridMap> {
    let frames: Vec<&GridMap> = archive.window(t).collect();
    if frames.is_empty() {
        return Err(Error::EmptyInput("no archive frames inside the hindsight window"));
    }
    let n = spec.cells;
    let layers: Vec<(&GridMap, &Layer, &Layer, &Layer)> = frames
        .iter()
        .map(|f| Ok((*f, f.layer(ELEVATION)?, f.layer(RISK)?, f.layer(CONFIDENCE)?)))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<(Option<f32>, Option<f32>, Option<f32>)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .map(|j| {
                    let (lx, ly) = spec.cell_center(i, j);
                    let w = query.to_world(lx, ly);
                    let (mut sum, mut count) = (0.0f64, 0usize);
                    let mut conf: Option<f32> = None;
                    let mut risk: Option<(f64, f32)> = None;
                    for (f, ele, rk, cf) in &layers {
                        let Some((fi, fj)) = world_to_cell([w.0, w.1], &f.origin, &f.spec) else {
                            continue;
                        };
                        if let Some(e) = ele.get(fi, fj) {
                            sum += f64::from(e) + f.origin.z - query.z;
                            count += 1;
                        }
                        let c = cf.get(fi, fj);
                        if let Some(c) = c {
                            conf = Some(conf.map_or(c, |m| m.max(c)));
                        }
                        if let (Some(c), Some(r)) = (c, rk.get(fi, fj)) {
                            if f64::from(c) > OBSERVED_CONFIDENCE && risk.is_none_or(|(ts, _)| f.timestamp >= ts) {
                                risk = Some((f.timestamp, r));
                            }
                        }
                    }
                    let e = (count > 0).then(|| (sum / count as f64) as f32);
                    (e, risk.map(|r| r.1), conf)
                })
                .collect()
        })
        .collect();
    let mut ele = Layer::missing(n);
    let mut risk = Layer::missing(n);
    let mut conf = Layer::missing(n);
    for (i, row) in rows.into_iter().enumerate() {
        for (j, (e, r, c)) in row.into_iter().enumerate() {
            if let Some(e) = e {
                ele.set(i, j, e);
            }
            if let Some(r) = r {
                risk.set(i, j, r);
            }
            if let Some(c) = c {
                conf.set(i, j, c);
            }
        }
    }
    GridMap::new(*spec, *query, t)
        .with_layer(ELEVATION, ele)?
        .with_layer(RISK, risk)?
        .with_layer(CONFIDENCE, conf)
}

/// Regular elevation raster in the world frame. Sample `(r, c)` sits at
/// `(origin_x + c·pitch, origin_y + r·pitch)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemTile {
    pub origin_x: f64,
    pub origin_y: f64,
    pub pitch: f64,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl DemTile {
    pub fn new(origin_x: f64, origin_y: f64, pitch: f64, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if !(pitch > 0.0) || rows < 2 || cols < 2 {
            return Err(Error::InvalidConfig("DEM needs a positive pitch and at least 2×2 samples".into()));
        }
        if data.len() != rows * cols {
            return Err(Error::dims(rows * cols, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("DEM samples".into()));
        }
        Ok(DemTile {
            origin_x,
            origin_y,
            pitch,
            rows,
            cols,
            data,
        })
    }

    /// Samples the bare terrain of `world` on a square centered at `(cx, cy)`.
    pub fn from_world(world: &World, cx: f64, cy: f64, half_size: f64, pitch: f64) -> Result<Self> {
        let count = (2.0 * half_size / pitch).ceil() as usize + 1;
        let (ox, oy) = (cx - half_size, cy - half_size);
        let mut data = Vec::with_capacity(count * count);
        for r in 0..count {
            for c in 0..count {
                data.push(world.height(ox + c as f64 * pitch, oy + r as f64 * pitch) as f32);
            }
        }
        DemTile::new(ox, oy, pitch, count, count, data)
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        f64::from(self.data[r * self.cols + c])
    }

    /// Bilinear interpolation; `None` outside the raster.
    pub fn sample(&self, x: f64, y: f64) -> Option<f64> {
        let u = (x - self.origin_x) / self.pitch;
        let v = (y - self.origin_y) / self.pitch;
        let (cmax, rmax) = ((self.cols - 1) as f64, (self.rows - 1) as f64);
        if !(u >= 0.0 && v >= 0.0 && u <= cmax && v <= rmax) {
            return None;
        }
        let c0 = (u.floor() as usize).min(self.cols - 2);
        let r0 = (v.floor() as usize).min(self.rows - 2);
        let (fu, fv) = (u - c0 as f64, v - r0 as f64);
        let top = self.at(r0, c0) * (1.0 - fu) + self.at(r0, c0 + 1) * fu;
        let bottom = self.at(r0 + 1, c0) * (1.0 - fu) + self.at(r0 + 1, c0 + 1) * fu;
        Some(top * (1.0 - fv) + bottom * fv)
    }
}

/// Yaw + translation correction applied in a map's local frame:
/// `p' = R(yaw)·p_xy + t_xy`, `z' = z + tz`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidTransform2p5 {
    pub tx: f64,
    pub ty: f64,
    pub tz: f64,
    pub yaw: f64,
    /// Inlier fraction after registration.
    pub fitness: Option<f64>,
    /// Set when the terrain could not constrain xy and yaw.
    pub degenerate: bool,
}

impl RigidTransform2p5 {
    pub fn new(tx: f64, ty: f64, tz: f64, yaw: f64) -> Self {
        RigidTransform2p5 {
            tx,
            ty,
            tz,
            yaw: normalize_angle(yaw),
            fitness: None,
            degenerate: false,
        }
    }

    pub fn identity() -> Self {
        Self::default()
    }

    /// Correction `T` with `believed ∘ T = actual`.
    pub fn relative(believed: &Pose2p5, actual: &Pose2p5) -> Self {
        let (lx, ly) = believed.to_local(actual.x, actual.y);
        RigidTransform2p5::new(lx, ly, actual.z - believed.z, actual.yaw - believed.yaw)
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [c * p[0] - s * p[1] + self.tx, s * p[0] + c * p[1] + self.ty, p[2] + self.tz]
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform2p5) -> Self {
        let t = self.apply([other.tx, other.ty, other.tz]);
        RigidTransform2p5::new(t[0], t[1], t[2], self.yaw + other.yaw)
    }

    pub fn translation_error(&self, other: &RigidTransform2p5) -> f64 {
        ((self.tx - other.tx).powi(2) + (self.ty - other.ty).powi(2) + (self.tz - other.tz).powi(2)).sqrt()
    }

    pub fn yaw_error(&self, other: &RigidTransform2p5) -> f64 {
        normalize_angle(self.yaw - other.yaw).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IcpConfig {
    pub max_iterations: usize,
    /// Stop once an update moves less than this (m and rad).
    pub tolerance: f64,
    /// Inlier radius for fitness.
    pub inlier_radius: f64,
    /// Correspondences farther than this are ignored.
    pub max_correspondence: f64,
    pub target_pitch: f64,
    pub target_margin: f64,
    /// Cap on source points (evenly strided subset).
    pub max_points: usize,
    /// Minimum eigenvalue of the elevation-gradient covariance for xy/yaw to be observable.
    pub degeneracy_eigenvalue: f64,
    /// Half-baseline (cells) of the central differences behind the gradient
    /// statistics; wider baselines keep cell-level noise from looking like relief.
    pub gradient_span: usize,
    /// Matching stretches the vertical axis until the map's RMS slope reaches this,
    /// so nearest neighbours on gentle terrain still carry horizontal information.
    pub target_slope: f64,
    pub max_vertical_scale: f64,
    /// Extrapolation factors tried when successive updates point the same way; empty disables.
    pub accel_gains: Vec<f64>,
    /// Minimum cosine between successive updates for extrapolation.
    pub accel_cos: f64,
    /// Lever arm (m) converting yaw into a length when comparing updates.
    pub accel_radius: f64,
}

impl Default for IcpConfig {
    fn default() -> Self {
        IcpConfig {
            max_iterations: 50,
            tolerance: 1e-4,
            inlier_radius: 1.0,
            max_correspondence: 5.0,
            target_pitch: 0.25,
            target_margin: 8.0,
            max_points: 4000,
            degeneracy_eigenvalue: 1e-4,
            gradient_span: 4,
            target_slope: 4.0,
            max_vertical_scale: 48.0,
            accel_gains: vec![1.0, 3.0, 7.0],
            accel_cos: 0.985,
            accel_radius: 20.0,
        }
    }
}

/// Observed cells as local 3D points.
fn observed_points(map: &GridMap) -> Result<Vec<[f64; 3]>> {
    let ele = map.layer(ELEVATION)?;
    let conf = map.layer(CONFIDENCE)?;
    let n = map.spec.cells;
    let mut pts = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if let (Some(e), Some(c)) = (ele.get(i, j), conf.get(i, j)) {
                if f64::from(c) > OBSERVED_CONFIDENCE {
                    let (x, y) = map.spec.cell_center(i, j);
                    pts.push([x, y, f64::from(e)]);
                }
            }
        }
    }
    Ok(pts)
}

#[derive(Debug, Clone, Copy, Default)]
struct GradientStats {
    rms_slope: f64,
    min_eigenvalue: f64,
}

/// RMS slope and smallest eigenvalue of the covariance of observed-cell elevation gradients.
fn gradient_stats(map: &GridMap, span: usize) -> Result<GradientStats> {
    let ele = map.layer(ELEVATION)?;
    let conf = map.layer(CONFIDENCE)?;
    let n = map.spec.cells;
    let r = map.spec.resolution_m;
    let obs = |i: usize, j: usize| -> Option<f64> {
        let c = conf.get(i, j)?;
        (f64::from(c) > OBSERVED_CONFIDENCE).then_some(())?;
        ele.get(i, j).map(f64::from)
    };
    let s = span.max(1);
    let (mut sxx, mut sxy, mut syy, mut cnt) = (0.0, 0.0, 0.0, 0usize);
    for i in s..n.saturating_sub(s) {
        for j in s..n.saturating_sub(s) {
            if let (Some(a), Some(b), Some(c), Some(d)) = (obs(i + s, j), obs(i - s, j), obs(i, j + s), obs(i, j - s)) {
                let gx = (a - b) / (2.0 * s as f64 * r);
                let gy = (c - d) / (2.0 * s as f64 * r);
                sxx += gx * gx;
                sxy += gx * gy;
                syy += gy * gy;
                cnt += 1;
            }
        }
    }
    if cnt == 0 {
        return Ok(GradientStats::default());
    }
    let (a, b, d) = (sxx / cnt as f64, sxy / cnt as f64, syy / cnt as f64);
    let tr = a + d;
    let disc = ((a - d).powi(2) + 4.0 * b * b).sqrt();
    Ok(GradientStats {
        rms_slope: tr.sqrt(),
        min_eigenvalue: 0.5 * (tr - disc),
    })
}

/// Point-to-point 4-DoF ICP of the map's observed cells against the DEM.
///
/// Correspondences are searched with the vertical axis stretched according to
/// `cfg.target_slope`; fitness is measured in true metric space.
///
/// `map.origin` is the believed pose; the result `T` satisfies
/// `world ≈ origin ∘ T(p_local)`. On flat terrain xy and yaw stay at the
/// initial guess and the result is flagged degenerate.
pub fn register_dem(dem: &DemTile, map: &GridMap, initial: &RigidTransform2p5, cfg: &IcpConfig) -> Result<RigidTransform2p5> {
    let all = observed_points(map)?;
    if all.len() < MIN_REGISTRATION_CELLS {
        return Err(Error::TooFewObserved {
            got: all.len(),
            need: MIN_REGISTRATION_CELLS,
        });
    }
    let stride = all.len().div_ceil(cfg.max_points.max(1));
    let src: Vec<[f64; 3]> = all.into_iter().step_by(stride).collect();
    let grad = gradient_stats(map, cfg.gradient_span)?;
    let degenerate = grad.min_eigenvalue < cfg.degeneracy_eigenvalue;

    // Target: DEM samples around the footprint, in the believed local frame.
    let origin = &map.origin;
    let moved: Vec<[f64; 3]> = src.iter().map(|p| initial.apply(*p)).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &moved {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let m = cfg.target_margin;
    let pitch = cfg.target_pitch;
    let mut target = Vec::new();
    let nx = ((x1 - x0 + 2.0 * m) / pitch).ceil() as usize + 1;
    let ny = ((y1 - y0 + 2.0 * m) / pitch).ceil() as usize + 1;
    for a in 0..nx {
        for b in 0..ny {
            let (lx, ly) = (x0 - m + a as f64 * pitch, y0 - m + b as f64 * pitch);
            let (wx, wy) = origin.to_world(lx, ly);
            if let Some(z) = dem.sample(wx, wy) {
                target.push([lx, ly, z - origin.z]);
            }
        }
    }
    if target.len() < MIN_REGISTRATION_CELLS {
        return Err(Error::OutOfBounds("DEM does not cover the map footprint".into()));
    }
    let k = if grad.rms_slope > 0.0 {
        (cfg.target_slope / grad.rms_slope).clamp(1.0, cfg.max_vertical_scale)
    } else {
        1.0
    };
    let scaled: Vec<[f64; 3]> = target.iter().map(|q| [q[0], q[1], q[2] * k]).collect();
    let tree = |pts: &[[f64; 3]]| ImmutableKdTree::new_from_slice(pts).map_err(|e| Error::InvalidConfig(format!("DEM target tree: {e:?}")));
    let match_tree = tree(&scaled)?;
    let fit_tree = tree(&target)?;

    let max_d2 = (cfg.max_correspondence * k).powi(2);
    let matches = |t: &RigidTransform2p5| -> Vec<([f64; 3], [f64; 3], f64)> {
        src.par_iter()
            .filter_map(|p| {
                let q = t.apply(*p);
                let nn = match_tree.query(&[q[0], q[1], q[2] * k]).nearest_one::<SquaredEuclidean<f64>>().execute();
                (nn.distance <= max_d2).then_some((q, target[nn.item as usize], nn.distance))
            })
            .collect()
    };
    let score = |t: &RigidTransform2p5| -> f64 {
        src.par_iter()
            .map(|p| {
                let q = t.apply(*p);
                let d = match_tree.query(&[q[0], q[1], q[2] * k]).nearest_one::<SquaredEuclidean<f64>>().execute().distance;
                d.min(max_d2)
            })
            .sum::<f64>()
            / src.len() as f64
    };

    // Level the cloud first so the exaggerated z offset does not dominate early matches.
    let mut t = *initial;
    let dz: Vec<f64> = src
        .iter()
        .filter_map(|p| {
            let q = t.apply(*p);
            let (wx, wy) = origin.to_world(q[0], q[1]);
            dem.sample(wx, wy).map(|z| z - origin.z - q[2])
        })
        .collect();
    if !dz.is_empty() {
        t.tz += dz.iter().sum::<f64>() / dz.len() as f64;
    }
    let params = |t: &RigidTransform2p5| [t.tx, t.ty, t.tz, t.yaw * cfg.accel_radius];
    let mut prev_step: Option<[f64; 4]> = None;
    for _ in 0..cfg.max_iterations {
        let pairs = matches(&t);
        if pairs.len() < 3 {
            break;
        }
        let inv = 1.0 / pairs.len() as f64;
        let mut pc = [0.0; 3];
        let mut qc = [0.0; 3];
        for (p, q, _) in &pairs {
            for a in 0..3 {
                pc[a] += p[a] * inv;
                qc[a] += q[a] * inv;
            }
        }
        let delta = if degenerate {
            RigidTransform2p5::new(0.0, 0.0, qc[2] - pc[2], 0.0)
        } else {
            let (mut dot, mut cross) = (0.0, 0.0);
            for (p, q, _) in &pairs {
                let (px, py) = (p[0] - pc[0], p[1] - pc[1]);
                let (qx, qy) = (q[0] - qc[0], q[1] - qc[1]);
                dot += px * qx + py * qy;
                cross += px * qy - py * qx;
            }
            let yaw = cross.atan2(dot);
            let (s, c) = yaw.sin_cos();
            RigidTransform2p5::new(qc[0] - (c * pc[0] - s * pc[1]), qc[1] - (s * pc[0] + c * pc[1]), qc[2] - pc[2], yaw)
        };
        let before = params(&t);
        let mut next = delta.compose(&t);
        let after = params(&next);
        let step: [f64; 4] = std::array::from_fn(|a| after[a] - before[a]);
        // Extrapolate along consistently repeated steps, keeping it only if the match error drops.
        if let Some(prev) = prev_step.filter(|_| !degenerate && cfg.accel_gains.iter().any(|g| *g > 0.0)) {
            let dot: f64 = (0..4).map(|a| step[a] * prev[a]).sum();
            let norm = |v: &[f64; 4]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if dot > cfg.accel_cos * norm(&step) * norm(&prev) {
                let mut best = (score(&next), next);
                for g in &cfg.accel_gains {
                    let cand = RigidTransform2p5::new(
                        after[0] + g * step[0],
                        after[1] + g * step[1],
                        after[2] + g * step[2],
                        (after[3] + g * step[3]) / cfg.accel_radius,
                    );
                    let e = score(&cand);
                    if e < best.0 {
                        best = (e, cand);
                    }
                }
                next = best.1;
            }
        }
        let moved = params(&next);
        let total: [f64; 4] = std::array::from_fn(|a| moved[a] - before[a]);
        prev_step = Some(step);
        t = next;
        if total[..3].iter().map(|x| x * x).sum::<f64>().sqrt() < cfg.tolerance && (total[3] / cfg.accel_radius).abs() < cfg.tolerance {
            break;
        }
    }
    let r2 = cfg.inlier_radius.powi(2);
    let inliers = src
        .par_iter()
        .filter(|p| fit_tree.query(&t.apply(**p)).nearest_one::<SquaredEuclidean<f64>>().execute().distance <= r2)
        .count();
    t.fitness = Some(inliers as f64 / src.len() as f64);
    t.degenerate = degenerate;
    Ok(t)
}

/// Fills missing elevation cells from the aligned DEM. Observed cells are untouched.
pub fn fuse_dem(map: &GridMap, dem: &DemTile, transform: &RigidTransform2p5, fitness_threshold: f64) -> Result<GridMap> {
    let fitness = transform.fitness.unwrap_or(0.0);
    if fitness < fitness_threshold {
        return Err(Error::SampleRejected {
            fitness,
            threshold: fitness_threshold,
        });
    }
    let mut ele = map.layer(ELEVATION)?.clone();
    let n = map.spec.cells;
    for i in 0..n {
        for j in 0..n {
            if ele.get(i, j).is_some() {
                continue;
            }
            let (lx, ly) = map.spec.cell_center(i, j);
            let p = transform.apply([lx, ly, 0.0]);
            let (wx, wy) = map.origin.to_world(p[0], p[1]);
            if let Some(z) = dem.sample(wx, wy) {
                ele.set(i, j, (z - map.origin.z - transform.tz) as f32);
            }
        }
    }
    let mut out = map.clone();
    out.insert(ELEVATION, ele)?;
    Ok(out)
}

/// ObsPC where the current map is confident, ObsF where only the fused map is, Unobs otherwise.
pub fn partition_regions(current_confidence: &Layer, fused_confidence: &Layer) -> Result<RegionLayer> {
    if current_confidence.cells() != fused_confidence.cells() {
        return Err(Error::dims(current_confidence.cells(), fused_confidence.cells()));
    }
    let n = current_confidence.cells();
    let above = |l: &Layer, k: usize| l.get_flat(k).is_some_and(|c| f64::from(c) > OBSERVED_CONFIDENCE);
    let labels = (0..n * n)
        .map(|k| {
            if above(current_confidence, k) {
                RegionLabel::ObsPC
            } else if above(fused_confidence, k) {
                RegionLabel::ObsF
            } else {
                RegionLabel::Unobs
            }
        })
        .collect();
    Ok(RegionLayer { cells: n, labels })
}

/// Constant world-frame offset between true and believed poses, plus an
/// optional linear z drift.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PoseError {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
    pub dyaw: f64,
    pub z_drift_per_s: f64,
}

impl PoseError {
    fn is_zero(&self) -> bool {
        *self == PoseError::default()
    }

    /// Maps a true world point to the believed world frame at time `t`.
    pub fn point(&self, p: [f64; 3], t: f64) -> [f64; 3] {
        let (s, c) = self.dyaw.sin_cos();
        [c * p[0] - s * p[1] + self.dx, s * p[0] + c * p[1] + self.dy, p[2] + self.dz + self.z_drift_per_s * t]
    }

    pub fn pose(&self, p: &Pose2p5, t: f64) -> Pose2p5 {
        let q = self.point([p.x, p.y, p.z], t);
        Pose2p5::new(q[0], q[1], q[2], p.yaw + self.dyaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// LiDAR scans integrated per second.
    pub scan_rate_hz: f64,
    /// Per-frame maps archived per second.
    pub archive_rate_hz: f64,
    pub window_s: f64,
    /// Every `sample_stride`-th archive frame becomes a sample.
    pub sample_stride: usize,
    /// Skip samples earlier than this (lets the voxel map warm up).
    pub warmup_s: f64,
    pub lidar: LidarModel,
    pub image_width: usize,
    pub image_height: usize,
    pub camera_range: f64,
    pub pillar_channels: usize,
    pub pillar_seed: u64,
    pub dem_pitch: f64,
    pub fitness_threshold: f64,
    pub icp: IcpConfig,
    pub pose_error: PoseError,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scan_rate_hz: 2.0,
            archive_rate_hz: 1.0,
            window_s: HINDSIGHT_WINDOW_S,
            sample_stride: 2,
            warmup_s: 2.0,
            lidar: LidarModel {
                rings: 24,
                azimuth_steps: 240,
                ..LidarModel::default()
            },
            image_width: 192,
            image_height: 96,
            camera_range: 110.0,
            pillar_channels: 16,
            pillar_seed: 7,
            dem_pitch: 1.0,
            fitness_threshold: DEFAULT_FITNESS_THRESHOLD,
            icp: IcpConfig::default(),
            pose_error: PoseError::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scan_rate_hz > 0.0 && self.archive_rate_hz > 0.0 && self.window_s > 0.0) {
            return Err(Error::InvalidConfig("rates and window must be positive".into()));
        }
        if self.sample_stride == 0 || self.image_width == 0 || self.image_height == 0 {
            return Err(Error::InvalidConfig("sample stride and image size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.fitness_threshold) {
            return Err(Error::InvalidConfig("fitness threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Current (single-time) maps of both ranges as produced onboard.
#[derive(Debug, Clone, PartialEq)]
pub struct RangeMaps {
    pub micro: GridMap,
    pub short: GridMap,
}

/// One training/evaluation sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub index: usize,
    pub timestamp: f64,
    /// Pose the maps are centered on (believed pose).
    pub pose: Pose2p5,
    pub features: BevFeatureGrid,
    pub ground_truth: RangeMaps,
    pub current: RangeMaps,
    pub regions_micro: RegionLayer,
    pub regions_short: RegionLayer,
    pub registration: RigidTransform2p5,
}

/// Sample skipped during dataset generation.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub timestamp: f64,
    pub pose: Pose2p5,
    pub reason: String,
    pub fitness: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub rejected: Vec<Rejection>,
}

/// Onboard per-frame map: raw elevation, heuristic risk and confidence.
pub fn frame_map(columns: &ColumnGrid, spec: &RangeSpec, origin: &Pose2p5, track: &[Pose2p5], t: f64) -> Result<GridMap> {
    GridMap::new(*spec, *origin, t)
        .with_layer(ELEVATION, columns.raw_elevation())?
        .with_layer(RISK, heuristic_risk(columns, spec))?
        .with_layer(CONFIDENCE, confidence_from_columns(columns, spec, origin, track))
}

/// Camera rig used for dataset features.
pub fn dataset_cameras(cfg: &DatasetConfig) -> Vec<CameraModel> {
    CameraModel::surround_rig(cfg.image_width, cfg.image_height)
}

/// Multi-modal BEV features at `pose` (`true_pose` drives the renderer).
pub fn compute_features(
    world: &World,
    voxels: &VoxelMap,
    true_pose: &Pose2p5,
    pose: &Pose2p5,
    short_elevation: &Layer,
    cfg: &DatasetConfig,
    encoder: &PillarEncoder,
    t: f64,
) -> Result<BevFeatureGrid> {
    let binning = DepthBinning::default();
    let pix = PixelFeatureSpec::default();
    let mut pts = LiftedPoints::default();
    for cam in dataset_cameras(cfg) {
        let img = render_image(world, true_pose, &cam, cfg.camera_range, t);
        pts.extend(lift(&img, &cam, &binning, DepthMode::Oracle, &pix)?);
    }
    let cam = splat(&pts, &RangeSpec::SHORT);
    let pillars = revoxelize_pillars(voxels, pose, MAX_POINTS_PER_PILLAR, MAX_PILLARS_TEST);
    let pil = pillar_features(&pillars, encoder);
    Ok(fuse(&cam, IMAGE_CHANNELS, &pil, encoder.out_channels, short_elevation)?.at(*pose, t))
}

struct PendingSample {
    t: f64,
    pose: Pose2p5,
    features: BevFeatureGrid,
    current: RangeMaps,
}

/// Drives the trajectory, builds onboard maps and features, then fuses
/// hindsight ground truth with DEM inpainting for every sampled frame.
pub fn build_dataset(world: &World, trajectory: &Trajectory, cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    if trajectory.is_empty() {
        return Err(Error::EmptyInput("trajectory"));
    }
    let encoder = PillarEncoder::seeded(cfg.pillar_channels, cfg.pillar_seed);
    let mut voxels = VoxelMap::default();
    let mut archive_micro = HindsightArchive::new(cfg.window_s);
    let mut archive_short = HindsightArchive::new(cfg.window_s);
    let mut pending = Vec::new();
    let mut track: Vec<Pose2p5> = Vec::new();
    let scan_dt = 1.0 / cfg.scan_rate_hz;
    let archive_dt = 1.0 / cfg.archive_rate_hz;
    let mut next_scan = trajectory.samples[0].0;
    let mut next_archive = trajectory.samples[0].0;
    let mut frame_index = 0usize;
    for (t, true_pose) in &trajectory.samples {
        let t = *t;
        let pose = cfg.pose_error.pose(true_pose, t);
        track.push(pose);
        if t + 1e-9 >= next_scan {
            next_scan += scan_dt;
            let scan = simulate_scan(world, true_pose, &cfg.lidar, t);
            let scan = if cfg.pose_error.is_zero() {
                scan
            } else {
                believed_scan(&scan, &cfg.pose_error, t)
            };
            voxels.integrate_scan(&scan, &pose);
        }
        if t + 1e-9 >= next_archive {
            next_archive += archive_dt;
            let cols_m = voxels.columns(&RangeSpec::MICRO, &pose);
            let cols_s = voxels.columns(&RangeSpec::SHORT, &pose);
            let micro = frame_map(&cols_m, &RangeSpec::MICRO, &pose, &track, t)?;
            let short = frame_map(&cols_s, &RangeSpec::SHORT, &pose, &track, t)?;
            if t >= cfg.warmup_s && frame_index % cfg.sample_stride == 0 {
                let features = compute_features(world, &voxels, true_pose, &pose, short.layer(ELEVATION)?, cfg, &encoder, t)?;
                pending.push(PendingSample {
                    t,
                    pose,
                    features,
                    current: RangeMaps {
                        micro: micro.clone(),
                        short: short.clone(),
                    },
                });
            }
            archive_micro.push(micro)?;
            archive_short.push(short)?;
            frame_index += 1;
        }
    }

    let pad = 2.0 * RangeSpec::SHORT.extent_m;
    let mut dataset = Dataset::default();
    for (index, p) in pending.into_iter().enumerate() {
        match ground_truth_for(world, &archive_micro, &archive_short, &p, cfg, pad) {
            Ok((gt, regions_micro, regions_short, registration)) => dataset.samples.push(Sample {
                index,
                timestamp: p.t,
                pose: p.pose,
                features: p.features,
                ground_truth: gt,
                current: p.current,
                regions_micro,
                regions_short,
                registration,
            }),
            Err(e @ (Error::SampleRejected { .. } | Error::TooFewObserved { .. })) => {
                let fitness = match e {
                    Error::SampleRejected { fitness, .. } => Some(fitness),
                    _ => None,
                };
                dataset.rejected.push(Rejection {
                    timestamp: p.t,
                    pose: p.pose,
                    reason: e.to_string(),
                    fitness,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(dataset)
}

fn believed_scan(scan: &SimScan, err: &PoseError, t: f64) -> SimScan {
    let sensor = err.pose(&scan.sensor_pose, t);
    let points = scan
        .world_points()
        .into_iter()
        .map(|w| {
            let b = err.point(w, t);
            let (lx, ly) = sensor.to_local(b[0], b[1]);
            [lx as f32, ly as f32, (b[2] - sensor.z) as f32]
        })
        .collect();
    SimScan {
        points,
        ranges: scan.ranges.clone(),
        sensor_pose: sensor,
        timestamp: scan.timestamp,
    }
}

type GroundTruth = (RangeMaps, RegionLayer, RegionLayer, RigidTransform2p5);

fn ground_truth_for(
    world: &World,
    archive_micro: &HindsightArchive,
    archive_short: &HindsightArchive,
    p: &PendingSample,
    cfg: &DatasetConfig,
    pad: f64,
) -> Result<GroundTruth> {
    let fused_s = fuse_hindsight(archive_short, &p.pose, p.t, &RangeSpec::SHORT)?;
    let fused_m = fuse_hindsight(archive_micro, &p.pose, p.t, &RangeSpec::MICRO)?;
    // The DEM is georeferenced truth around the believed position.
    let dem = DemTile::from_world(world, p.pose.x, p.pose.y, 0.5 * pad, cfg.dem_pitch)?;
    let reg = register_dem(&dem, &fused_s, &RigidTransform2p5::identity(), &cfg.icp)?;
    let gt_s = fuse_dem(&fused_s, &dem, &reg, cfg.fitness_threshold)?;
    let gt_m = fuse_dem(&fused_m, &dem, &reg, cfg.fitness_threshold)?;
    let regions_s = partition_regions(p.current.short.layer(CONFIDENCE)?, gt_s.layer(CONFIDENCE)?)?;
    let regions_m = partition_regions(p.current.micro.layer(CONFIDENCE)?, gt_m.layer(CONFIDENCE)?)?;
    Ok((RangeMaps { micro: gt_m, short: gt_s }, regions_m, regions_s, reg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::RangeId;
    use crate::synthworld::{generate_world, true_elevation_map, WorldConfig};
    use approx::assert_abs_diff_eq;

    fn tiny_spec() -> RangeSpec {
        RangeSpec::new(RangeId::Short, 4.0, 1.0).unwrap()
    }

    fn frame(t: f64, ele: &[Option<f32>], risk: &[Option<f32>], conf: &[Option<f32>]) -> GridMap {
        let spec = tiny_spec();
        GridMap::new(spec, Pose2p5::default(), t)
            .with_layer(ELEVATION, Layer::from_options(4, ele).unwrap())
            .unwrap()
            .with_layer(RISK, Layer::from_options(4, risk).unwrap())
            .unwrap()
            .with_layer(CONFIDENCE, Layer::from_options(4, conf).unwrap())
            .unwrap()
    }

    fn single(v: Option<f32>) -> Vec<Option<f32>> {
        let mut out = vec![None; 16];
        out[5] = v;
        out
    }

    #[test]
    fn fusion_rules() {
        let mut a = HindsightArchive::new(HINDSIGHT_WINDOW_S);
        a.push(frame(1.0, &single(Some(2.0)), &single(Some(0.7)), &single(Some(0.5)))).unwrap();
        a.push(frame(2.0, &single(Some(4.0)), &single(Some(0.4)), &single(Some(0.05)))).unwrap();
        let f = fuse_hindsight(&a, &Pose2p5::default(), 1.5, &tiny_spec()).unwrap();
        assert_eq!(f.layer(ELEVATION).unwrap().get(1, 1), Some(3.0));
        assert_eq!(f.layer(CONFIDENCE).unwrap().get(1, 1), Some(0.5));
        assert_eq!(f.layer(RISK).unwrap().get(1, 1), Some(0.7));
        assert_eq!(f.layer(ELEVATION).unwrap().get(0, 0), None);

        let mut b = HindsightArchive::new(HINDSIGHT_WINDOW_S);
        b.push(frame(1.0, &single(None), &single(None), &single(Some(0.3)))).unwrap();
        b.push(frame(2.0, &single(None), &single(None), &single(Some(0.8)))).unwrap();
        let f = fuse_hindsight(&b, &Pose2p5::default(), 1.5, &tiny_spec()).unwrap();
        assert_eq!(f.layer(CONFIDENCE).unwrap().get(1, 1), Some(0.8));
    }

    #[test]
    fn fusion_errors_and_window() {
        let a = HindsightArchive::new(HINDSIGHT_WINDOW_S);
        assert!(fuse_hindsight(&a, &Pose2p5::default(), 0.0, &tiny_spec()).is_err());
        let mut b = HindsightArchive::new(10.0);
        b.push(frame(0.0, &single(Some(1.0)), &single(None), &single(None))).unwrap();
        b.push(frame(20.0, &single(Some(9.0)), &single(None), &single(None))).unwrap();
        let f = fuse_hindsight(&b, &Pose2p5::default(), 1.0, &tiny_spec()).unwrap();
        assert_eq!(f.layer(ELEVATION).unwrap().get(1, 1), Some(1.0));
        assert!(b.push(frame(5.0, &single(None), &single(None), &single(None))).is_err());
    }

    #[test]
    fn fusion_reprojects_between_frames() {
        // A frame captured 1 m further forward sees the same cell one row lower.
        let spec = tiny_spec();
        let mut ele = vec![None; 16];
        ele[4] = Some(1.5); // row 1, col 0 of a frame at x = 1
        let f = GridMap::new(spec, Pose2p5::new(1.0, 0.0, 0.5, 0.0), 0.0)
            .with_layer(ELEVATION, Layer::from_options(4, &ele).unwrap())
            .unwrap()
            .with_layer(RISK, Layer::missing(4))
            .unwrap()
            .with_layer(CONFIDENCE, Layer::filled(4, 1.0))
            .unwrap();
        let mut a = HindsightArchive::new(HINDSIGHT_WINDOW_S);
        a.push(f).unwrap();
        let fused = fuse_hindsight(&a, &Pose2p5::default(), 0.0, &spec).unwrap();
        // World z = 1.5 + 0.5; query z = 0.
        assert_eq!(fused.layer(ELEVATION).unwrap().get(2, 0), Some(2.0));
    }

    #[test]
    fn dem_bilinear() {
        let dem = DemTile::new(0.0, 0.0, 1.0, 2, 2, vec![0.0, 1.0, 1.0, 2.0]).unwrap();
        assert_eq!(dem.sample(0.5, 0.5), Some(1.0));
        assert_eq!(dem.sample(1.0, 0.0), Some(1.0));
        assert_eq!(dem.sample(1.5, 0.0), None);
        assert!(DemTile::new(0.0, 0.0, 1.0, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn transform_algebra() {
        let a = Pose2p5::new(10.0, -3.0, 1.0, 0.4);
        let b = Pose2p5::new(11.0, -2.5, 1.3, 0.45);
        let t = RigidTransform2p5::relative(&a, &b);
        let p = t.apply([0.0, 0.0, 0.0]);
        let (wx, wy) = a.to_world(p[0], p[1]);
        assert_abs_diff_eq!(wx, b.x, epsilon = 1e-12);
        assert_abs_diff_eq!(wy, b.y, epsilon = 1e-12);
        assert_abs_diff_eq!(t.yaw, 0.05, epsilon = 1e-12);
        let u = RigidTransform2p5::new(1.0, 2.0, 3.0, 0.3);
        let v = RigidTransform2p5::new(-0.5, 0.1, 0.2, -0.1);
        let q = [0.3, -0.7, 0.2];
        let composed = u.compose(&v).apply(q);
        let seq = u.apply(v.apply(q));
        for k in 0..3 {
            assert_abs_diff_eq!(composed[k], seq[k], epsilon = 1e-12);
        }
    }

    fn hilly_world(seed: u64) -> World {
        generate_world(&WorldConfig {
            seed,
            hills: 120,
            hill_amplitude_min: 3.0,
            hill_amplitude_max: 8.0,
            hill_sigma_min: 10.0,
            hill_sigma_max: 25.0,
            trees: 0,
            rocks: 0,
            half_size: 300.0,
            ..WorldConfig::default()
        })
        .unwrap()
    }

    /// Oracle map sensed at `actual` but labelled with `believed`, observed within `radius`.
    pub(crate) fn offset_map(world: &World, actual: &Pose2p5, believed: &Pose2p5, radius: f64) -> GridMap {
        let spec = RangeSpec::SHORT;
        let truth = true_elevation_map(world, actual, &spec);
        let mut map = GridMap::new(spec, *believed, 0.0);
        let ele = truth.layer(ELEVATION).unwrap().clone();
        let mut conf = Layer::filled(spec.cells, 0.0);
        let mut partial = Layer::missing(spec.cells);
        for i in 0..spec.cells {
            for j in 0..spec.cells {
                let (x, y) = spec.cell_center(i, j);
                if x.hypot(y) <= radius {
                    conf.set(i, j, 1.0);
                    partial.set(i, j, ele.get(i, j).unwrap());
                }
            }
        }
        map.insert(ELEVATION, partial).unwrap();
        map.insert(RISK, Layer::filled(spec.cells, 0.0)).unwrap();
        map.insert(CONFIDENCE, conf).unwrap();
        map
    }

    #[test]
    fn icp_identity_on_noiseless_map() {
        let w = hilly_world(1);
        let pose = Pose2p5::new(0.0, 0.0, w.height(0.0, 0.0), 0.0);
        let map = offset_map(&w, &pose, &pose, 40.0);
        let dem = DemTile::from_world(&w, 0.0, 0.0, 150.0, 1.0).unwrap();
        let t = register_dem(&dem, &map, &RigidTransform2p5::identity(), &IcpConfig::default()).unwrap();
        assert!(t.fitness.unwrap() >= 0.99);
        assert!(t.translation_error(&RigidTransform2p5::identity()) < 0.05);
        assert!(t.yaw.abs() < 0.005);
        assert!(!t.degenerate);
    }

    #[test]
    fn icp_recovers_injected_offset() {
        let w = hilly_world(2);
        let actual = Pose2p5::new(5.0, -3.0, w.height(5.0, -3.0), 0.3);
        let believed = Pose2p5::new(actual.x + 1.0, actual.y, actual.z + 0.5, actual.yaw);
        let map = offset_map(&w, &actual, &believed, 40.0);
        let dem = DemTile::from_world(&w, believed.x, believed.y, 150.0, 1.0).unwrap();
        let t = register_dem(&dem, &map, &RigidTransform2p5::identity(), &IcpConfig::default()).unwrap();
        let expected = RigidTransform2p5::relative(&believed, &actual);
        assert!(t.translation_error(&expected) < 0.1, "{t:?} vs {expected:?}");
        assert!(t.yaw_error(&expected) < 0.01);
    }

    #[test]
    fn flat_terrain_is_degenerate_but_recovers_z() {
        let w = generate_world(&WorldConfig::flat(300.0)).unwrap();
        let actual = Pose2p5::new(0.0, 0.0, 0.0, 0.0);
        let believed = Pose2p5::new(1.5, 0.0, -0.7, 0.0);
        let map = offset_map(&w, &actual, &believed, 40.0);
        let dem = DemTile::from_world(&w, 0.0, 0.0, 150.0, 1.0).unwrap();
        let t = register_dem(&dem, &map, &RigidTransform2p5::identity(), &IcpConfig::default()).unwrap();
        assert!(t.degenerate);
        assert_eq!((t.tx, t.ty, t.yaw), (0.0, 0.0, 0.0));
        assert_abs_diff_eq!(t.tz, 0.7, epsilon = 1e-6);
        assert!(t.fitness.unwrap() > 0.99);
    }

    #[test]
    fn too_few_observed_cells() {
        let w = hilly_world(3);
        let pose = Pose2p5::default();
        let map = offset_map(&w, &pose, &pose, 3.0);
        let dem = DemTile::from_world(&w, 0.0, 0.0, 150.0, 1.0).unwrap();
        assert!(matches!(
            register_dem(&dem, &map, &RigidTransform2p5::identity(), &IcpConfig::default()),
            Err(Error::TooFewObserved { .. })
        ));
    }

    #[test]
    fn fuse_dem_inpaints_only_missing_cells() {
        let w = hilly_world(4);
        let pose = Pose2p5::new(0.0, 0.0, w.height(0.0, 0.0), 0.0);
        let map = offset_map(&w, &pose, &pose, 30.0);
        let dem = DemTile::from_world(&w, 0.0, 0.0, 150.0, 1.0).unwrap();
        let t = RigidTransform2p5 {
            fitness: Some(1.0),
            ..Default::default()
        };
        let out = fuse_dem(&map, &dem, &t, 0.6).unwrap();
        let before = map.layer(ELEVATION).unwrap();
        let after = out.layer(ELEVATION).unwrap();
        for k in 0..before.len() {
            if let Some(v) = before.get_flat(k) {
                assert_eq!(after.get_flat(k), Some(v));
            }
        }
        assert_eq!(after.valid_count(), after.len());
        // Inpainted values follow the terrain to DEM interpolation accuracy.
        let truth = true_elevation_map(&w, &pose, &RangeSpec::SHORT);
        let te = truth.layer(ELEVATION).unwrap();
        let worst = (0..after.len())
            .map(|k| (after.get_flat(k).unwrap() - te.get_flat(k).unwrap()).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 0.1, "{worst}");

        let complete = out.clone();
        assert_eq!(fuse_dem(&complete, &dem, &t, 0.6).unwrap(), complete);
        let weak = RigidTransform2p5 {
            fitness: Some(0.3),
            ..Default::default()
        };
        assert!(matches!(fuse_dem(&map, &dem, &weak, 0.6), Err(Error::SampleRejected { .. })));
    }

    #[test]
    fn partition_examples() {
        let cur = Layer::from_options(2, &[Some(0.5), Some(0.05), Some(0.05), None]).unwrap();
        let fused = Layer::from_options(2, &[Some(0.9), Some(0.5), Some(0.05), Some(0.7)]).unwrap();
        let r = partition_regions(&cur, &fused).unwrap();
        assert_eq!(r.get(0, 0), RegionLabel::ObsPC);
        assert_eq!(r.get(0, 1), RegionLabel::ObsF);
        assert_eq!(r.get(1, 0), RegionLabel::Unobs);
        assert_eq!(r.get(1, 1), RegionLabel::ObsF);
        assert_eq!(r.counts().iter().sum::<usize>(), 4);
    }
}
