//! Temporally aggregated LiDAR voxel map and the layers derived from it.
//!
//! Voxel keys are anchored to the world grid (`floor(p / 0.4 m)`), so
//! recentering on the vehicle is a pure eviction step with no resampling.
//! Yaw is applied at read time when a layer is rasterised into a
//! vehicle-centric grid.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::gridmap::{Layer, Pose2p5, RangeSpec};
use crate::synthworld::{risk_formula, SimScan, ROUGHNESS_STENCIL_M};

pub const VOXEL_SIZE_M: f64 = 0.4;
pub const MAP_HALF_EXTENT_M: f64 = 100.0;
pub const PILLAR_SIZE_M: f64 = 0.8;
pub const MAX_POINTS_PER_PILLAR: usize = 16;
pub const MAX_PILLARS_TRAIN: usize = 32_000;
pub const MAX_PILLARS_TEST: usize = 64_000;
/// A column is an obstacle when its top rises this far above the local ground.
pub const OBSTACLE_STEP_M: f64 = 0.6;

pub type VoxelKey = [i32; 3];

/// Running statistics of the points that fell into one voxel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelStats {
    pub point_count: u32,
    sum: [f64; 3],
    pub min_z: f64,
    pub max_z: f64,
}

impl VoxelStats {
    fn from_point(p: [f64; 3]) -> Self {
        VoxelStats {
            point_count: 1,
            sum: p,
            min_z: p[2],
            max_z: p[2],
        }
    }

    fn add(&mut self, p: [f64; 3]) {
        self.point_count += 1;
        for k in 0..3 {
            self.sum[k] += p[k];
        }
        self.min_z = self.min_z.min(p[2]);
        self.max_z = self.max_z.max(p[2]);
    }

    pub fn centroid(&self) -> [f64; 3] {
        let n = f64::from(self.point_count);
        [self.sum[0] / n, self.sum[1] / n, self.sum[2] / n]
    }
}

/// Sparse voxel map covering a window around the vehicle.
#[derive(Debug, Clone)]
pub struct VoxelMap {
    voxels: HashMap<VoxelKey, VoxelStats>,
    pub voxel_size: f64,
    pub half_extent: f64,
    /// Pose the map was last recentered on.
    pub center: Pose2p5,
}

impl Default for VoxelMap {
    fn default() -> Self {
        VoxelMap::new(VOXEL_SIZE_M, MAP_HALF_EXTENT_M)
    }
}

impl VoxelMap {
    pub fn new(voxel_size: f64, half_extent: f64) -> Self {
        VoxelMap {
            voxels: HashMap::new(),
            voxel_size,
            half_extent,
            center: Pose2p5::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn key_of(&self, p: [f64; 3]) -> VoxelKey {
        let s = self.voxel_size;
        [
            (p[0] / s).floor() as i32,
            (p[1] / s).floor() as i32,
            (p[2] / s).floor() as i32,
        ]
    }

    pub fn get(&self, key: &VoxelKey) -> Option<&VoxelStats> {
        self.voxels.get(key)
    }

    /// Voxels in ascending key order.
    pub fn sorted(&self) -> Vec<(VoxelKey, VoxelStats)> {
        let mut v: Vec<_> = self.voxels.iter().map(|(k, s)| (*k, *s)).collect();
        v.sort_unstable_by_key(|(k, _)| *k);
        v
    }

    pub fn iter(&self) -> impl Iterator<Item = (&VoxelKey, &VoxelStats)> {
        self.voxels.iter()
    }

    pub fn total_points(&self) -> u64 {
        self.voxels.values().map(|s| u64::from(s.point_count)).sum()
    }

    /// Adds world-frame points without recentering.
    pub fn insert_points(&mut self, points: &[[f64; 3]]) {
        for &p in points {
            let key = self.key_of(p);
            self.voxels
                .entry(key)
                .and_modify(|s| s.add(p))
                .or_insert_with(|| VoxelStats::from_point(p));
        }
    }

    /// Recenters on `pose`, dropping voxels that can no longer fall inside a
    /// ±half-extent vehicle-centric map of any yaw.
    pub fn recenter(&mut self, pose: &Pose2p5) {
        self.center = *pose;
        let reach = self.half_extent * std::f64::consts::SQRT_2;
        let s = self.voxel_size;
        let (cx, cy) = (pose.x, pose.y);
        self.voxels.retain(|k, _| {
            let x = (f64::from(k[0]) + 0.5) * s;
            let y = (f64::from(k[1]) + 0.5) * s;
            (x - cx).hypot(y - cy) <= reach
        });
    }

    /// Transforms a scan into the map frame, bins it, and recenters on the vehicle.
    pub fn integrate_scan(&mut self, scan: &SimScan, vehicle_pose: &Pose2p5) {
        self.insert_points(&scan.world_points());
        self.recenter(vehicle_pose);
    }

    /// Per-cell column statistics in a vehicle-centric grid.
    pub fn columns(&self, spec: &RangeSpec, origin: &Pose2p5) -> ColumnGrid {
        let n = spec.cells;
        let mut grid = ColumnGrid {
            cells: n,
            min_z: vec![f64::INFINITY; n * n],
            max_z: vec![f64::NEG_INFINITY; n * n],
            count: vec![0; n * n],
        };
        let s = self.voxel_size;
        let half = spec.half_extent();
        let r = spec.resolution_m;
        let reach = half * std::f64::consts::SQRT_2 + s;
        for (k, st) in &self.voxels {
            let x0 = f64::from(k[0]) * s;
            let y0 = f64::from(k[1]) * s;
            if (x0 - origin.x).hypot(y0 - origin.y) > reach {
                continue;
            }
            // Bounding box of the voxel's footprint in the map frame.
            let corners = [
                origin.to_local(x0, y0),
                origin.to_local(x0 + s, y0),
                origin.to_local(x0, y0 + s),
                origin.to_local(x0 + s, y0 + s),
            ];
            let (mut lx0, mut lx1, mut ly0, mut ly1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for (cx, cy) in corners {
                lx0 = lx0.min(cx);
                lx1 = lx1.max(cx);
                ly0 = ly0.min(cy);
                ly1 = ly1.max(cy);
            }
            let span = |lo: f64, hi: f64| -> Option<(usize, usize)> {
                let a = ((lo + half) / r + 1e-9).floor().max(0.0);
                let b = ((hi + half) / r - 1e-9).ceil() - 1.0;
                let b = b.min(n as f64 - 1.0);
                (a <= b).then(|| (a as usize, b as usize))
            };
            let (Some((i0, i1)), Some((j0, j1))) = (span(lx0, lx1), span(ly0, ly1)) else {
                continue;
            };
            let zmin = st.min_z - origin.z;
            let zmax = st.max_z - origin.z;
            for i in i0..=i1 {
                for j in j0..=j1 {
                    let c = i * n + j;
                    grid.min_z[c] = grid.min_z[c].min(zmin);
                    grid.max_z[c] = grid.max_z[c].max(zmax);
                    grid.count[c] += st.point_count;
                }
            }
        }
        grid
    }
}

/// Aggregated voxel columns over a grid; heights relative to the grid origin.
#[derive(Debug, Clone)]
pub struct ColumnGrid {
    pub cells: usize,
    pub min_z: Vec<f64>,
    pub max_z: Vec<f64>,
    pub count: Vec<u32>,
}

impl ColumnGrid {
    pub fn occupied(&self, k: usize) -> bool {
        self.count[k] > 0
    }

    /// Lowest occupied height per cell.
    pub fn raw_elevation(&self) -> Layer {
        let mut layer = Layer::missing(self.cells);
        for k in 0..self.cells * self.cells {
            if self.occupied(k) {
                layer.set_flat(k, self.min_z[k] as f32);
            }
        }
        layer
    }
}

/// Lowest occupied voxel height per cell of a vehicle-centric grid.
pub fn raw_elevation(map: &VoxelMap, spec: &RangeSpec, origin: &Pose2p5) -> Layer {
    map.columns(spec, origin).raw_elevation()
}

/// Confidence from point density and distance to the travelled track:
/// `(1 − e^{−n/5}) · e^{−max(0, d − 30)/40}`.
pub fn confidence_value(points: f64, distance_m: f64) -> f64 {
    ((1.0 - (-points / 5.0).exp()) * (-(distance_m - 30.0).max(0.0) / 40.0).exp()).clamp(0.0, 1.0)
}

pub fn confidence_from_columns(columns: &ColumnGrid, spec: &RangeSpec, origin: &Pose2p5, track: &[Pose2p5]) -> Layer {
    let n = spec.cells;
    let mut layer = Layer::filled(n, 0.0);
    // Track points in the map frame.
    let local: Vec<(f64, f64)> = track.iter().map(|p| origin.to_local(p.x, p.y)).collect();
    for i in 0..n {
        for j in 0..n {
            let k = i * n + j;
            let cnt = columns.count[k];
            if cnt == 0 {
                continue;
            }
            let (x, y) = spec.cell_center(i, j);
            let d = local
                .iter()
                .map(|&(tx, ty)| (x - tx).hypot(y - ty))
                .fold(f64::INFINITY, f64::min);
            let d = if d.is_finite() { d } else { f64::INFINITY };
            layer.set_flat(k, confidence_value(f64::from(cnt), d) as f32);
        }
    }
    layer
}

/// Per-cell confidence in `[0, 1]`.
pub fn confidence_layer(map: &VoxelMap, spec: &RangeSpec, origin: &Pose2p5, track: &[Pose2p5]) -> Layer {
    confidence_from_columns(&map.columns(spec, origin), spec, origin, track)
}

/// Heuristic risk from voxel columns: slope and roughness of the raw
/// elevation plus an obstacle term for columns rising above the local ground.
pub fn heuristic_risk(columns: &ColumnGrid, spec: &RangeSpec) -> Layer {
    let n = spec.cells;
    let r = spec.resolution_m;
    let ele = columns.raw_elevation();
    let ground_reach = ((1.2 / r).round() as usize).max(1);
    let stencil = ((ROUGHNESS_STENCIL_M / r).round() as usize).max(1);
    let mut out = Layer::missing(n);
    let at = |i: isize, j: isize| -> Option<f64> {
        if i < 0 || j < 0 || i >= n as isize || j >= n as isize {
            return None;
        }
        ele.get(i as usize, j as usize).map(f64::from)
    };
    for i in 0..n {
        for j in 0..n {
            let Some(z) = ele.get(i, j).map(f64::from) else {
                continue;
            };
            let (ii, jj) = (i as isize, j as isize);
            // Local ground: lowest raw elevation within the window.
            let mut ground = z;
            let g = ground_reach as isize;
            for di in -g..=g {
                for dj in -g..=g {
                    if let Some(v) = at(ii + di, jj + dj) {
                        ground = ground.min(v);
                    }
                }
            }
            let top = columns.max_z[i * n + j];
            let occupancy = if top - ground > OBSTACLE_STEP_M { 1.0 } else { 0.0 };
            let deriv = |a: Option<f64>, b: Option<f64>, h: f64| match (a, b) {
                (Some(p), Some(m)) => (p - m) / (2.0 * h),
                (Some(p), None) => (p - z) / h,
                (None, Some(m)) => (z - m) / h,
                (None, None) => 0.0,
            };
            let gx = deriv(at(ii + 1, jj), at(ii - 1, jj), r);
            let gy = deriv(at(ii, jj + 1), at(ii, jj - 1), r);
            let s = stencil as isize;
            let rough_axis = |a: Option<f64>, b: Option<f64>| match (a, b) {
                (Some(p), Some(m)) => (0.5 * (p + m) - z).abs(),
                _ => 0.0,
            };
            let rough = rough_axis(at(ii + s, jj), at(ii - s, jj)).max(rough_axis(at(ii, jj + s), at(ii, jj - s)));
            out.set(i, j, risk_formula(gx.hypot(gy), occupancy, rough) as f32);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccumulationMode {
    VoxelMap,
    LastNScans,
}

/// How input geometry is accumulated over time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccumulationPolicy {
    pub mode: AccumulationMode,
    pub n: usize,
    pub min_travel_m: f64,
    pub downsample_voxel_m: f64,
}

impl AccumulationPolicy {
    pub fn voxel_map() -> Self {
        AccumulationPolicy {
            mode: AccumulationMode::VoxelMap,
            n: 1,
            min_travel_m: 2.0,
            downsample_voxel_m: 0.4,
        }
    }

    pub fn last_n(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidConfig("accumulation N must be at least 1".into()));
        }
        Ok(AccumulationPolicy {
            mode: AccumulationMode::LastNScans,
            n,
            min_travel_m: 2.0,
            downsample_voxel_m: 0.4,
        })
    }
}

/// Indices of the scans kept by the last-N policy, most recent first.
///
/// Scans become keyframes when the vehicle has moved at least
/// `min_travel_m` since the previous keyframe; the latest scan is always kept
/// together with up to `n − 1` earlier keyframes at least `min_travel_m`
/// behind it.
pub fn select_scans(travel: &[f64], policy: &AccumulationPolicy) -> Result<Vec<usize>> {
    if travel.is_empty() {
        return Err(Error::EmptyInput("no scans to accumulate"));
    }
    let mut keyframes = vec![0usize];
    for (k, &t) in travel.iter().enumerate().skip(1) {
        if t - travel[*keyframes.last().expect("non-empty")] >= policy.min_travel_m {
            keyframes.push(k);
        }
    }
    let latest = travel.len() - 1;
    let mut kept = vec![latest];
    for &k in keyframes.iter().rev() {
        if kept.len() >= policy.n {
            break;
        }
        if k != latest && travel[latest] - travel[k] >= policy.min_travel_m {
            kept.push(k);
        }
    }
    Ok(kept)
}

/// One centroid per occupied voxel, in key order.
pub fn voxel_filter(points: &[[f64; 3]], voxel_m: f64) -> Vec<[f64; 3]> {
    let mut map = VoxelMap::new(voxel_m, f64::INFINITY);
    map.insert_points(points);
    map.sorted().into_iter().map(|(_, s)| s.centroid()).collect()
}

/// Merges the scans selected by `policy` and voxel-filters the result
/// (world frame).
pub fn accumulate_scans(scans: &[SimScan], policy: &AccumulationPolicy) -> Result<Vec<[f64; 3]>> {
    if scans.is_empty() {
        return Err(Error::EmptyInput("no scans to accumulate"));
    }
    let mut travel = Vec::with_capacity(scans.len());
    let mut acc = 0.0;
    for (k, s) in scans.iter().enumerate() {
        if k > 0 {
            acc += s.sensor_pose.xy_distance(&scans[k - 1].sensor_pose);
        }
        travel.push(acc);
    }
    let indices = match policy.mode {
        AccumulationMode::VoxelMap => (0..scans.len()).rev().collect(),
        AccumulationMode::LastNScans => select_scans(&travel, policy)?,
    };
    let mut merged = Vec::new();
    for k in indices {
        merged.extend(scans[k].world_points());
    }
    Ok(voxel_filter(&merged, policy.downsample_voxel_m))
}

/// Points of one pillar in the grid origin's frame (z relative to the origin).
#[derive(Debug, Clone, PartialEq)]
pub struct Pillar {
    pub cell: (usize, usize),
    pub center: (f64, f64),
    /// Number of centroids that fell in the pillar before truncation.
    pub count: usize,
    pub points: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PillarSet {
    pub spec: RangeSpec,
    pub pillars: Vec<Pillar>,
}

/// Groups voxel centroids into 0.8 m pillars on the short grid, keeping at most
/// `max_points` lowest points per pillar and the `max_pillars` densest pillars.
pub fn revoxelize_pillars(map: &VoxelMap, origin: &Pose2p5, max_points: usize, max_pillars: usize) -> PillarSet {
    let centroids: Vec<[f64; 3]> = map.sorted().into_iter().map(|(_, s)| s.centroid()).collect();
    pillars_from_points(&centroids, origin, max_points, max_pillars)
}

/// Pillarises world-frame points.
pub fn pillars_from_points(points: &[[f64; 3]], origin: &Pose2p5, max_points: usize, max_pillars: usize) -> PillarSet {
    let spec = RangeSpec::SHORT;
    let mut groups: HashMap<(usize, usize), Vec<[f64; 3]>> = HashMap::new();
    for p in points {
        let (lx, ly) = origin.to_local(p[0], p[1]);
        if let (Some(i), Some(j)) = (spec.axis_index(lx), spec.axis_index(ly)) {
            groups.entry((i, j)).or_default().push([lx, ly, p[2] - origin.z]);
        }
    }
    let mut pillars: Vec<Pillar> = groups
        .into_iter()
        .map(|(cell, mut pts)| {
            let count = pts.len();
            pts.sort_by(|a, b| {
                a[2].total_cmp(&b[2])
                    .then(a[0].total_cmp(&b[0]))
                    .then(a[1].total_cmp(&b[1]))
            });
            pts.truncate(max_points);
            Pillar {
                cell,
                center: spec.cell_center(cell.0, cell.1),
                count,
                points: pts,
            }
        })
        .collect();
    pillars.sort_by(|a, b| b.count.cmp(&a.count).then(a.cell.cmp(&b.cell)));
    pillars.truncate(max_pillars);
    pillars.sort_by_key(|p| p.cell);
    PillarSet { spec, pillars }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_world, simulate_scan, LidarModel, WorldConfig};
    use approx::assert_abs_diff_eq;

    #[test]
    fn single_point_voxel() {
        let mut m = VoxelMap::default();
        m.insert_points(&[[1.0, 1.0, 0.5]]);
        assert_eq!(m.len(), 1);
        let (_, s) = m.sorted()[0];
        assert_eq!(s.point_count, 1);
        assert_eq!(s.centroid(), [1.0, 1.0, 0.5]);
    }

    #[test]
    fn two_points_same_voxel() {
        let mut m = VoxelMap::default();
        m.insert_points(&[[0.1, 0.1, 0.1], [0.2, 0.2, 0.3]]);
        assert_eq!(m.len(), 1);
        let (_, s) = m.sorted()[0];
        assert_eq!(s.min_z, 0.1);
        assert_eq!(s.max_z, 0.3);
        assert_abs_diff_eq!(s.centroid()[2], 0.2, epsilon = 1e-12);
        assert!(s.min_z <= s.centroid()[2] && s.centroid()[2] <= s.max_z);
    }

    #[test]
    fn moving_far_evicts_everything() {
        let mut m = VoxelMap::default();
        m.insert_points(&[[1.0, 1.0, 0.0], [-20.0, 30.0, 1.0], [90.0, -90.0, 0.0]]);
        m.recenter(&Pose2p5::default());
        assert_eq!(m.len(), 3);
        m.recenter(&Pose2p5::new(150.0 * 2f64.sqrt() + 100.0, 0.0, 0.0, 0.0));
        assert!(m.is_empty());
        let mut m = VoxelMap::default();
        m.insert_points(&[[1.0, 1.0, 0.0]]);
        m.recenter(&Pose2p5::new(150.0, 0.0, 0.0, 0.0));
        assert!(m.is_empty());
    }

    #[test]
    fn integration_is_order_insensitive() {
        let w = generate_world(&WorldConfig { seed: 2, half_size: 200.0, ..WorldConfig::default() }).unwrap();
        let lidar = LidarModel { rings: 8, azimuth_steps: 120, ..LidarModel::default() };
        let pa = Pose2p5::new(0.0, 0.0, w.height(0.0, 0.0), 0.0);
        let pb = Pose2p5::new(6.0, 1.0, w.height(6.0, 1.0), 0.2);
        let a = simulate_scan(&w, &pa, &lidar, 0.0);
        let b = simulate_scan(&w, &pb, &lidar, 0.1);
        let mut m1 = VoxelMap::default();
        m1.integrate_scan(&a, &pa);
        m1.integrate_scan(&b, &pb);
        let mut m2 = VoxelMap::default();
        m2.integrate_scan(&b, &pb);
        m2.integrate_scan(&a, &pa);
        let (s1, s2) = (m1.sorted(), m2.sorted());
        assert_eq!(s1.len(), s2.len());
        for ((k1, v1), (k2, v2)) in s1.iter().zip(&s2) {
            assert_eq!(k1, k2);
            assert_eq!(v1.point_count, v2.point_count);
            assert_eq!(v1.min_z, v2.min_z);
            assert_eq!(v1.max_z, v2.max_z);
            for (c1, c2) in v1.centroid().iter().zip(v2.centroid()) {
                assert_abs_diff_eq!(*c1, c2, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn scan_selection_respects_spacing() {
        let p2 = AccumulationPolicy::last_n(2).unwrap();
        assert_eq!(select_scans(&[0.0, 1.0, 3.0], &p2).unwrap(), vec![2, 0]);
        let p1 = AccumulationPolicy::last_n(1).unwrap();
        assert_eq!(select_scans(&[0.0, 1.0, 3.0], &p1).unwrap(), vec![2]);
        let p5 = AccumulationPolicy::last_n(5).unwrap();
        assert_eq!(select_scans(&[0.0, 2.0, 4.0, 5.0], &p5).unwrap(), vec![3, 1, 0]);
        assert!(select_scans(&[], &p5).is_err());
        assert!(AccumulationPolicy::last_n(0).is_err());
    }

    #[test]
    fn voxel_filter_merges_points() {
        let out = voxel_filter(&[[0.1, 0.1, 0.1], [0.3, 0.3, 0.3]], 0.4);
        assert_eq!(out.len(), 1);
        for c in out[0] {
            assert_abs_diff_eq!(c, 0.2, epsilon = 1e-12);
        }
    }

    #[test]
    fn raw_elevation_takes_lowest_voxel() {
        let mut m = VoxelMap::default();
        m.insert_points(&[[0.1, 0.1, 1.2], [0.1, 0.1, 3.6]]);
        let e = raw_elevation(&m, &RangeSpec::SHORT, &Pose2p5::default());
        assert_abs_diff_eq!(e.get(125, 125).unwrap() as f64, 1.2, epsilon = 1e-6);
        assert_eq!(e.get(10, 10), None);
        assert_eq!(e.valid_count(), 1);
        // A 0.4 m voxel covers a 2×2 block of micro cells when aligned.
        let em = raw_elevation(&m, &RangeSpec::MICRO, &Pose2p5::default());
        assert_eq!(em.valid_count(), 4);
        assert!(em.get(250, 250).is_some() && em.get(251, 251).is_some());
    }

    #[test]
    fn confidence_formula_values() {
        assert_eq!(confidence_value(0.0, 0.0), 0.0);
        assert_abs_diff_eq!(confidence_value(50.0, 10.0), 1.0 - (-10f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(confidence_value(5.0, 70.0), (1.0 - (-1f64).exp()) * (-1f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(confidence_value(5.0, 70.0), 0.2325, epsilon = 1e-4);
        assert!(confidence_value(1e9, 0.0) <= 1.0);
    }

    #[test]
    fn confidence_layer_uses_track_distance() {
        let mut m = VoxelMap::default();
        m.insert_points(&[[0.1, 0.1, 0.0]; 5]);
        m.insert_points(&[[70.1, 0.1, 0.0]; 5]);
        let c = confidence_layer(&m, &RangeSpec::SHORT, &Pose2p5::default(), &[Pose2p5::default()]);
        let near = c.get(125, 125).unwrap() as f64;
        let far = c.get(212, 125).unwrap() as f64;
        assert_abs_diff_eq!(near, 1.0 - (-1f64).exp(), epsilon = 1e-6);
        assert!(far < near && far > 0.0);
        assert_eq!(c.get(0, 0), Some(0.0));
    }

    #[test]
    fn pillar_truncation_and_cap() {
        let o = Pose2p5::default();
        let one = pillars_from_points(&[[0.1, 0.1, 0.3]], &o, 16, 100);
        assert_eq!(one.pillars.len(), 1);
        assert_eq!(one.pillars[0].points.len(), 1);

        let pts: Vec<[f64; 3]> = (0..20).map(|k| [0.1, 0.1, 19.0 - k as f64]).collect();
        let set = pillars_from_points(&pts, &o, 16, 100);
        let zs: Vec<f64> = set.pillars[0].points.iter().map(|p| p[2]).collect();
        assert_eq!(zs, (0..16).map(|k| k as f64).collect::<Vec<_>>());
        assert_eq!(set.pillars[0].count, 20);

        let mut pts = Vec::new();
        for (x, n) in [(0.1, 5), (5.1, 3), (10.1, 1)] {
            pts.extend((0..n).map(|k| [x, 0.1, k as f64]));
        }
        let set = pillars_from_points(&pts, &o, 16, 2);
        let counts: Vec<usize> = set.pillars.iter().map(|p| p.count).collect();
        assert_eq!(set.pillars.len(), 2);
        assert!(counts.contains(&5) && counts.contains(&3));
    }

    #[test]
    fn flat_drive_raw_elevation_matches_ground() {
        let w = generate_world(&WorldConfig::flat(300.0)).unwrap();
        let lidar = LidarModel { azimuth_steps: 180, ..LidarModel::default() };
        let mut m = VoxelMap::default();
        let mut last = Pose2p5::default();
        for k in 0..5 {
            let pose = Pose2p5::new(2.0 * k as f64, 0.0, 0.0, 0.0);
            let scan = simulate_scan(&w, &pose, &lidar, k as f64 * 0.1);
            m.integrate_scan(&scan, &pose);
            last = pose;
        }
        let e = raw_elevation(&m, &RangeSpec::SHORT, &last);
        assert!(e.valid_count() > 1000);
        for v in e.iter().flatten() {
            assert!((v as f64).abs() <= 0.4, "{v}");
            assert!(v as f64 >= -0.4);
        }
    }

    #[test]
    fn heuristic_flags_tall_columns() {
        let mut m = VoxelMap::default();
        // Ground patch plus one tall column.
        for i in -10..10 {
            for j in -10..10 {
                m.insert_points(&[[i as f64 * 0.4 + 0.2, j as f64 * 0.4 + 0.2, 0.0]]);
            }
        }
        m.insert_points(&[[0.2, 0.2, 1.0], [0.2, 0.2, 2.5]]);
        let cols = m.columns(&RangeSpec::SHORT, &Pose2p5::default());
        let risk = heuristic_risk(&cols, &RangeSpec::SHORT);
        assert_eq!(risk.get(125, 125), Some(1.0));
        assert_eq!(risk.get(122, 122), Some(0.0));
        assert_eq!(risk.get(0, 0), None);
    }
}
