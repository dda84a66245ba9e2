//! Camera lift-splat, pillar encoding and multi-modal BEV feature stacking.
//!
//! All BEV grids here live on the short range (250×250 at 0.8 m) in the
//! vehicle frame. Channel data is stored channel-major: `data[c * cells² + k]`.

use nalgebra::{Isometry3, Translation3, UnitQuaternion, Vector3};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gridmap::{rescale_elevation, Layer, Pose2p5, RangeSpec};
use crate::synthworld::SimImage;
use crate::voxelmap::{PillarSet, MAX_POINTS_PER_PILLAR};

/// Pinhole camera rigidly mounted on the vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Camera → vehicle transform. Camera axes: x right, y down, z forward.
    pub vehicle_from_camera: Isometry3<f64>,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize, vehicle_from_camera: Isometry3<f64>) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(Error::InvalidConfig("focal lengths must be positive".into()));
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(Error::InvalidConfig("principal point outside the image".into()));
        }
        Ok(CameraModel {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            vehicle_from_camera,
        })
    }

    /// Camera at `position` (vehicle frame) looking along heading `yaw`,
    /// tilted down by `pitch_down`, with a horizontal field of view `hfov`.
    pub fn mounted(width: usize, height: usize, hfov: f64, position: [f64; 3], yaw: f64, pitch_down: f64) -> Result<Self> {
        let f = 0.5 * width as f64 / (0.5 * hfov).tan();
        // Columns are the camera axes expressed in the vehicle frame.
        let base = nalgebra::Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let base = UnitQuaternion::from_matrix(&base);
        let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
            * UnitQuaternion::from_axis_angle(&Vector3::y_axis(), pitch_down)
            * base;
        let iso = Isometry3::from_parts(Translation3::new(position[0], position[1], position[2]), rot);
        CameraModel::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height, iso)
    }

    /// Four cameras facing forward, left, backward and right.
    pub fn surround_rig(width: usize, height: usize) -> Vec<CameraModel> {
        use std::f64::consts::FRAC_PI_2;
        (0..4)
            .map(|k| {
                CameraModel::mounted(width, height, 100f64.to_radians(), [0.0, 0.0, 2.2], k as f64 * FRAC_PI_2, 8f64.to_radians())
                    .expect("valid rig")
            })
            .collect()
    }

    /// Unnormalised camera-frame ray through pixel `(u, v)` with unit z.
    pub fn pixel_ray(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    /// Camera-frame point at z-depth `d` through pixel `(u, v)`.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Vector3<f64> {
        self.pixel_ray(u, v) * d
    }

    pub fn world_from_camera(&self, vehicle_pose: &Pose2p5) -> Isometry3<f64> {
        let vehicle = Isometry3::from_parts(
            Translation3::new(vehicle_pose.x, vehicle_pose.y, vehicle_pose.z),
            UnitQuaternion::from_axis_angle(&Vector3::z_axis(), vehicle_pose.yaw),
        );
        vehicle * self.vehicle_from_camera
    }
}

/// Depth bin centers `start + step·k`, `k < count`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthBinning {
    pub start: f64,
    pub step: f64,
    pub count: usize,
}

impl Default for DepthBinning {
    fn default() -> Self {
        DepthBinning {
            start: 1.0,
            step: 0.8,
            count: 137,
        }
    }
}

impl DepthBinning {
    pub fn center(&self, k: usize) -> f64 {
        self.start + self.step * k as f64
    }

    /// Bin whose interval `[center, center + step)` contains `depth`.
    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        let k = ((depth - self.start) / self.step).floor();
        (k >= 0.0 && (k as usize) < self.count).then_some(k as usize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthMode {
    /// One-hot at the bin containing the true depth.
    Oracle,
    /// `1/count` on every bin.
    Uniform,
}

/// Per-pixel features derived from the simulator's geometric channels on a
/// grid of `downsample × downsample` blocks; each block is represented by its
/// nearest hit so thin obstacles survive the downsampling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelFeatureSpec {
    pub downsample: usize,
}

impl Default for PixelFeatureSpec {
    fn default() -> Self {
        PixelFeatureSpec { downsample: 8 }
    }
}

/// Camera BEV channels: density, normal-z, obstacle flag, height above
/// ground, obstacle·height, 1 − normal-z, saturated height, normalised depth.
pub const IMAGE_CHANNELS: usize = 8;

impl PixelFeatureSpec {
    /// Representative pixel of the block with top-left `(u0, v0)`: the
    /// nearest hit, first in raster order on ties.
    fn representative(&self, image: &SimImage, u0: usize, v0: usize) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for v in v0..(v0 + self.downsample).min(image.height) {
            for u in u0..(u0 + self.downsample).min(image.width) {
                if let Some(d) = image.depth_at(u, v) {
                    let d = f64::from(d);
                    if best.is_none_or(|b| d < b.2) {
                        best = Some((u, v, d));
                    }
                }
            }
        }
        best
    }

    fn pixel_features(image: &SimImage, u: usize, v: usize, depth: f64) -> [f32; IMAGE_CHANNELS] {
        let f = image.feature_at(u, v);
        let (nz, obs, hag) = (f64::from(f[0]), f64::from(f[1]), f64::from(f[2]));
        [
            1.0,
            nz as f32,
            obs as f32,
            hag as f32,
            (obs * hag) as f32,
            (1.0 - nz) as f32,
            (hag.min(3.0) / 3.0) as f32,
            (depth / 110.0) as f32,
        ]
    }
}

/// Lifted feature points in the vehicle frame.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LiftedPoints {
    pub xyz: Vec<[f64; 3]>,
    pub features: Vec<[f32; IMAGE_CHANNELS]>,
    pub weights: Vec<f32>,
    /// Source pixel `(u, v)` of each point.
    pub pixels: Vec<(usize, usize)>,
}

impl LiftedPoints {
    pub fn len(&self) -> usize {
        self.xyz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xyz.is_empty()
    }

    pub fn extend(&mut self, other: LiftedPoints) {
        self.xyz.extend(other.xyz);
        self.features.extend(other.features);
        self.weights.extend(other.weights);
        self.pixels.extend(other.pixels);
    }
}

/// Depth weights for one pixel.
pub fn depth_weights(binning: &DepthBinning, mode: DepthMode, true_depth: Option<f64>) -> Vec<(usize, f32)> {
    match mode {
        DepthMode::Oracle => true_depth
            .and_then(|d| binning.bin_of(d))
            .map(|k| vec![(k, 1.0)])
            .unwrap_or_default(),
        DepthMode::Uniform => {
            let w = 1.0 / binning.count as f32;
            (0..binning.count).map(|k| (k, w)).collect()
        }
    }
}

/// Lifts every downsampled pixel along its ray into weighted 3D feature points.
pub fn lift(
    image: &SimImage,
    camera: &CameraModel,
    binning: &DepthBinning,
    mode: DepthMode,
    pixels: &PixelFeatureSpec,
) -> Result<LiftedPoints> {
    if image.width != camera.width || image.height != camera.height {
        return Err(Error::dims(
            format!("{}x{}", camera.width, camera.height),
            format!("{}x{}", image.width, image.height),
        ));
    }
    let ds = pixels.downsample.max(1);
    let mut out = LiftedPoints::default();
    for v0 in (0..image.height).step_by(ds) {
        for u0 in (0..image.width).step_by(ds) {
            let rep = pixels.representative(image, u0, v0);
            let (u, v, depth) = match (rep, mode) {
                (Some(r), _) => (r.0, r.1, Some(r.2)),
                (None, DepthMode::Uniform) => ((u0 + ds / 2).min(image.width - 1), (v0 + ds / 2).min(image.height - 1), None),
                (None, DepthMode::Oracle) => continue,
            };
            let weights = depth_weights(binning, mode, depth);
            let feat = PixelFeatureSpec::pixel_features(image, u, v, depth.unwrap_or(0.0));
            for (k, w) in weights {
                let p_cam = camera.unproject(u as f64, v as f64, binning.center(k));
                let p = camera.vehicle_from_camera * nalgebra::Point3::from(p_cam);
                out.xyz.push([p.x, p.y, p.z]);
                out.features.push(feat);
                out.weights.push(w);
                out.pixels.push((u, v));
            }
        }
    }
    Ok(out)
}

/// Sum-pools weighted point features into camera BEV channels on `spec`.
pub fn splat(points: &LiftedPoints, spec: &RangeSpec) -> Vec<f32> {
    let n = spec.cell_count();
    let mut acc = vec![0.0f64; IMAGE_CHANNELS * n];
    for ((p, f), &w) in points.xyz.iter().zip(&points.features).zip(&points.weights) {
        let (Some(i), Some(j)) = (spec.axis_index(p[0]), spec.axis_index(p[1])) else {
            continue;
        };
        let k = i * spec.cells + j;
        for c in 0..IMAGE_CHANNELS {
            acc[c * n + k] += f64::from(f[c]) * f64::from(w);
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Per-point input width of the pillar encoder.
pub const PILLAR_POINT_FEATURES: usize = 9;

/// Linear map + bias + ReLU applied per point before max-pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct PillarEncoder {
    pub out_channels: usize,
    /// Row-major `out_channels × 9`.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl PillarEncoder {
    pub fn new(out_channels: usize, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        if weights.len() != out_channels * PILLAR_POINT_FEATURES || bias.len() != out_channels {
            return Err(Error::dims(
                format!("{}x{} + {}", out_channels, PILLAR_POINT_FEATURES, out_channels),
                format!("{} + {}", weights.len(), bias.len()),
            ));
        }
        Ok(PillarEncoder {
            out_channels,
            weights,
            bias,
        })
    }

    /// Deterministic encoder. The columns for absolute x and y are zero so the
    /// encoding is translation covariant; the first channels pass the raw
    /// height and the relative offsets straight through.
    pub fn seeded(out_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = vec![0.0f32; out_channels * PILLAR_POINT_FEATURES];
        let mut bias = vec![0.0f32; out_channels];
        for c in 0..out_channels {
            let row = &mut weights[c * PILLAR_POINT_FEATURES..(c + 1) * PILLAR_POINT_FEATURES];
            match c {
                // z and −z, so max-pool yields the highest and lowest point.
                0 => row[2] = 1.0,
                1 => row[2] = -1.0,
                2 => row[5] = 1.0,
                3 => row[5] = -1.0,
                4 => row[8] = 1.0,
                _ => {
                    for (f, w) in row.iter_mut().enumerate().skip(2) {
                        *w = rng.random_range(-1.0f32..1.0) * if f == 8 { 1.0 } else { 0.5 };
                    }
                    bias[c] = rng.random_range(-0.2f32..0.2);
                }
            }
        }
        PillarEncoder {
            out_channels,
            weights,
            bias,
        }
    }

    pub fn identity() -> Self {
        let mut weights = vec![0.0f32; PILLAR_POINT_FEATURES * PILLAR_POINT_FEATURES];
        for k in 0..PILLAR_POINT_FEATURES {
            weights[k * PILLAR_POINT_FEATURES + k] = 1.0;
        }
        PillarEncoder {
            out_channels: PILLAR_POINT_FEATURES,
            weights,
            bias: vec![0.0; PILLAR_POINT_FEATURES],
        }
    }

    fn encode_point(&self, x: &[f64; PILLAR_POINT_FEATURES], out: &mut [f32]) {
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.weights[c * PILLAR_POINT_FEATURES..(c + 1) * PILLAR_POINT_FEATURES];
            let mut acc = f64::from(self.bias[c]);
            for f in 0..PILLAR_POINT_FEATURES {
                acc += f64::from(row[f]) * x[f];
            }
            *o = acc.max(0.0) as f32;
        }
    }
}

/// The 9-vector `(x, y, z, x−x̄, y−ȳ, z−z̄, x−x_p, y−y_p, count_norm)` for each point of a pillar.
pub fn pillar_point_features(points: &[[f64; 3]], center: (f64, f64), count: usize) -> Vec<[f64; PILLAR_POINT_FEATURES]> {
    if points.is_empty() {
        return Vec::new();
    }
    let n = points.len() as f64;
    let mean = points.iter().fold([0.0; 3], |acc, p| [acc[0] + p[0], acc[1] + p[1], acc[2] + p[2]]);
    let mean = [mean[0] / n, mean[1] / n, mean[2] / n];
    let count_norm = count.min(MAX_POINTS_PER_PILLAR) as f64 / MAX_POINTS_PER_PILLAR as f64;
    points
        .iter()
        .map(|p| {
            [
                p[0],
                p[1],
                p[2],
                p[0] - mean[0],
                p[1] - mean[1],
                p[2] - mean[2],
                p[0] - center.0,
                p[1] - center.1,
                count_norm,
            ]
        })
        .collect()
}

/// Encodes each pillar and scatters the max-pooled vector to its cell.
pub fn pillar_features(pillars: &PillarSet, encoder: &PillarEncoder) -> Vec<f32> {
    let spec = pillars.spec;
    let n = spec.cell_count();
    let c_out = encoder.out_channels;
    let mut grid = vec![0.0f32; c_out * n];
    let mut buf = vec![0.0f32; c_out];
    let mut pooled = vec![0.0f32; c_out];
    for pillar in &pillars.pillars {
        let feats = pillar_point_features(&pillar.points, pillar.center, pillar.count);
        if feats.is_empty() {
            continue;
        }
        pooled.iter_mut().for_each(|v| *v = f32::NEG_INFINITY);
        for x in &feats {
            encoder.encode_point(x, &mut buf);
            for (p, &b) in pooled.iter_mut().zip(&buf) {
                *p = p.max(b);
            }
        }
        let k = pillar.cell.0 * spec.cells + pillar.cell.1;
        for c in 0..c_out {
            grid[c * n + k] = pooled[c];
        }
    }
    grid
}

/// Channel layout of a fused grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelManifest {
    pub camera: usize,
    pub pillar: usize,
}

impl ChannelManifest {
    pub fn total(&self) -> usize {
        self.camera + self.pillar + 2
    }

    pub fn raw_elevation_channel(&self) -> usize {
        self.camera + self.pillar
    }

    pub fn validity_channel(&self) -> usize {
        self.camera + self.pillar + 1
    }

    pub fn names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.camera).map(|k| format!("cam{k:02}")).collect();
        v.extend((0..self.pillar).map(|k| format!("pts{k:02}")));
        v.push("raw_elevation".into());
        v.push("raw_elevation_valid".into());
        v
    }

    /// Text manifest written next to feature dumps.
    pub fn to_text(&self) -> String {
        let mut s = format!("camera_channels = {}\npillar_channels = {}\n", self.camera, self.pillar);
        for (k, name) in self.names().iter().enumerate() {
            s.push_str(&format!("channel.{k} = \"{name}\"\n"));
        }
        s
    }

    /// FNV-1a hash of the manifest text.
    pub fn hash(&self) -> u64 {
        self.to_text()
            .bytes()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
    }
}

/// Stacked camera ‖ pillar ‖ raw elevation ‖ validity channels on the short grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BevFeatureGrid {
    pub spec: RangeSpec,
    pub manifest: ChannelManifest,
    pub data: Vec<f32>,
    /// Vehicle pose the grid is centered on.
    pub origin: Pose2p5,
    pub timestamp: f64,
}

impl BevFeatureGrid {
    pub fn channels(&self) -> usize {
        self.manifest.total()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let n = self.spec.cell_count();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn zeros(manifest: ChannelManifest) -> Self {
        Self::zeros_on(RangeSpec::SHORT, manifest)
    }

    /// Zero grid on an arbitrary (even-sized) short-type spec.
    pub fn zeros_on(spec: RangeSpec, manifest: ChannelManifest) -> Self {
        BevFeatureGrid {
            spec,
            manifest,
            data: vec![0.0; manifest.total() * spec.cell_count()],
            origin: Pose2p5::default(),
            timestamp: 0.0,
        }
    }

    pub fn at(mut self, origin: Pose2p5, timestamp: f64) -> Self {
        self.origin = origin;
        self.timestamp = timestamp;
        self
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.spec.cell_count();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Raw elevation (meters) decoded from the rescaled channel, missing where invalid.
    pub fn raw_elevation_m(&self) -> Layer {
        let ele = self.channel(self.manifest.raw_elevation_channel());
        let ok = self.channel(self.manifest.validity_channel());
        let n = self.spec.cells;
        let mut layer = Layer::missing(n);
        for k in 0..n * n {
            if ok[k] > 0.5 {
                layer.set_flat(k, ele[k] * 25.0);
            }
        }
        layer
    }

    /// Zeroes the camera block (LiDAR-only input).
    pub fn without_camera(&self) -> Self {
        let mut out = self.clone();
        let n = self.spec.cell_count();
        out.data[..self.manifest.camera * n].iter_mut().for_each(|v| *v = 0.0);
        out
    }

    /// Zeroes the pillar block and raw elevation (camera-only input).
    pub fn without_lidar(&self) -> Self {
        let mut out = self.clone();
        let n = self.spec.cell_count();
        out.data[self.manifest.camera * n..].iter_mut().for_each(|v| *v = 0.0);
        out
    }
}

/// Channel-wise concatenation of camera, pillar and raw-elevation inputs.
pub fn fuse(camera: &[f32], camera_channels: usize, pillars: &[f32], pillar_channels: usize, raw_elevation: &Layer) -> Result<BevFeatureGrid> {
    let spec = RangeSpec::SHORT;
    let n = spec.cell_count();
    if camera.len() != camera_channels * n {
        return Err(Error::dims(camera_channels * n, camera.len()));
    }
    if pillars.len() != pillar_channels * n {
        return Err(Error::dims(pillar_channels * n, pillars.len()));
    }
    if raw_elevation.cells() != spec.cells {
        return Err(Error::dims(spec.cells, raw_elevation.cells()));
    }
    let manifest = ChannelManifest {
        camera: camera_channels,
        pillar: pillar_channels,
    };
    let mut data = Vec::with_capacity(manifest.total() * n);
    data.extend_from_slice(camera);
    data.extend_from_slice(pillars);
    data.extend(raw_elevation.iter().map(|v| v.map_or(0.0, |e| rescale_elevation(f64::from(e)) as f32)));
    data.extend(raw_elevation.valid().iter().map(|&ok| if ok { 1.0 } else { 0.0 }));
    Ok(BevFeatureGrid {
        spec,
        manifest,
        data,
        origin: Pose2p5::default(),
        timestamp: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthworld::{generate_world, render_image, ObstacleShape, WorldConfig, IMAGE_FEATURES};
    use crate::voxelmap::{pillars_from_points, Pillar};
    use approx::assert_abs_diff_eq;

    fn identity_camera(w: usize, h: usize) -> CameraModel {
        CameraModel::new(1.0, 1.0, 0.0, 0.0, w, h, Isometry3::identity()).unwrap()
    }

    #[test]
    fn pinhole_identity() {
        let cam = identity_camera(4, 4);
        let p = cam.unproject(0.0, 0.0, 5.0);
        assert_eq!((p.x, p.y, p.z), (0.0, 0.0, 5.0));
    }

    #[test]
    fn camera_validation() {
        assert!(CameraModel::new(0.0, 1.0, 0.0, 0.0, 4, 4, Isometry3::identity()).is_err());
        assert!(CameraModel::new(1.0, 1.0, 4.0, 0.0, 4, 4, Isometry3::identity()).is_err());
    }

    #[test]
    fn mounted_forward_camera_looks_forward() {
        let cam = CameraModel::mounted(64, 32, 90f64.to_radians(), [0.0, 0.0, 2.0], 0.0, 0.0).unwrap();
        let p = cam.vehicle_from_camera * nalgebra::Point3::from(cam.unproject(cam.cx, cam.cy, 10.0));
        assert_abs_diff_eq!(p.x, 10.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(p.z, 2.0, epsilon = 1e-9);
        // Pixel to the right of center maps to negative y (vehicle right).
        let q = cam.vehicle_from_camera * nalgebra::Point3::from(cam.unproject(cam.cx + 10.0, cam.cy, 10.0));
        assert!(q.y < 0.0);
        let left = CameraModel::mounted(64, 32, 90f64.to_radians(), [0.0, 0.0, 2.0], std::f64::consts::FRAC_PI_2, 0.0).unwrap();
        let r = left.vehicle_from_camera * nalgebra::Point3::from(left.unproject(left.cx, left.cy, 10.0));
        assert_abs_diff_eq!(r.y, 10.0, epsilon = 1e-9);
    }

    #[test]
    fn depth_bins() {
        let b = DepthBinning::default();
        assert_eq!(b.count, 137);
        assert_abs_diff_eq!(b.center(136), 109.8, epsilon = 1e-9);
        assert!(b.center(136) < 110.0 && 110.0 <= b.center(136) + b.step);
        assert_eq!(b.bin_of(5.0), Some(5));
        assert_eq!(b.bin_of(0.5), None);
        assert_eq!(b.bin_of(111.0), None);
        let oracle = depth_weights(&b, DepthMode::Oracle, Some(5.0));
        assert_eq!(oracle, vec![(5, 1.0)]);
        let uniform = depth_weights(&b, DepthMode::Uniform, None);
        let sum: f64 = uniform.iter().map(|(_, w)| f64::from(*w)).sum();
        assert_abs_diff_eq!(sum, 1.0, epsilon = 1e-5);
    }

    fn synthetic_image(cam: &CameraModel, depth: f32) -> SimImage {
        let n = cam.width * cam.height;
        SimImage {
            width: cam.width,
            height: cam.height,
            depth: vec![Some(depth); n],
            features: vec![[1.0; IMAGE_FEATURES]; n],
            camera: cam.clone(),
            vehicle_pose: Pose2p5::default(),
            timestamp: 0.0,
        }
    }

    #[test]
    fn lift_rejects_resolution_mismatch() {
        let cam = identity_camera(8, 8);
        let img = synthetic_image(&identity_camera(16, 8), 5.0);
        assert!(lift(&img, &cam, &DepthBinning::default(), DepthMode::Oracle, &PixelFeatureSpec::default()).is_err());
    }

    #[test]
    fn lift_oracle_and_uniform_weights() {
        let cam = identity_camera(16, 16);
        let img = synthetic_image(&cam, 5.0);
        let spec = PixelFeatureSpec::default();
        let b = DepthBinning::default();
        let oracle = lift(&img, &cam, &b, DepthMode::Oracle, &spec).unwrap();
        assert_eq!(oracle.len(), 4);
        for p in &oracle.xyz {
            assert_abs_diff_eq!(p[2], 5.0, epsilon = 1e-9);
        }
        let uniform = lift(&img, &cam, &b, DepthMode::Uniform, &spec).unwrap();
        assert_eq!(uniform.len(), 4 * 137);
        for pix in 0..4 {
            let s: f64 = uniform.weights[pix * 137..(pix + 1) * 137].iter().map(|&w| f64::from(w)).sum();
            assert_abs_diff_eq!(s, 1.0, epsilon = 1e-5);
        }
    }

    #[test]
    fn splat_sums_per_cell() {
        let mut pts = LiftedPoints::default();
        let mut f1 = [0.0f32; IMAGE_CHANNELS];
        let mut f2 = [0.0f32; IMAGE_CHANNELS];
        f1[0] = 1.0;
        f1[1] = 2.0;
        f2[0] = 3.0;
        f2[1] = 4.0;
        for f in [f1, f2] {
            pts.xyz.push([0.1, 0.1, 0.0]);
            pts.features.push(f);
            pts.weights.push(1.0);
            pts.pixels.push((0, 0));
        }
        // Dropped: outside ±100 m.
        pts.xyz.push([150.0, 0.0, 0.0]);
        pts.features.push(f1);
        pts.weights.push(1.0);
        pts.pixels.push((0, 0));
        let spec = RangeSpec::SHORT;
        let grid = splat(&pts, &spec);
        let n = spec.cell_count();
        let k = 125 * 250 + 125;
        assert_eq!(grid[k], 4.0);
        assert_eq!(grid[n + k], 6.0);
        assert_eq!(grid[0], 0.0);
        let total: f64 = grid[..n].iter().map(|&v| f64::from(v)).sum();
        assert_eq!(total, 4.0);
    }

    #[test]
    fn tree_mass_lands_near_true_cell() {
        let mut w = generate_world(&WorldConfig::flat(200.0)).unwrap();
        w.add_obstacle(45.0, 0.0, 10.0, ObstacleShape::Tree { radius: 0.6 });
        let cam = CameraModel::mounted(256, 128, 60f64.to_radians(), [0.0, 0.0, 2.0], 0.0, 0.0).unwrap();
        let img = render_image(&w, &Pose2p5::default(), &cam, 120.0, 0.0);
        let pts = lift(&img, &cam, &DepthBinning::default(), DepthMode::Oracle, &PixelFeatureSpec::default()).unwrap();
        let spec = RangeSpec::SHORT;
        let grid = splat(&pts, &spec);
        let n = spec.cell_count();
        let obstacle = &grid[2 * n..3 * n];
        let (ti, tj) = (spec.axis_index(45.0).unwrap(), spec.axis_index(0.0).unwrap());
        let mut near = 0.0;
        let mut total = 0.0;
        for i in 0..250 {
            for j in 0..250 {
                let m = f64::from(obstacle[i * 250 + j]);
                total += m;
                if (i as isize - ti as isize).abs() <= 1 && (j as isize - tj as isize).abs() <= 1 {
                    near += m;
                }
            }
        }
        assert!(near > 0.0);
        assert!(near / total > 0.9, "{near} / {total}");
    }

    #[test]
    fn pillar_features_basic() {
        let f = pillar_point_features(&[[0.4, 0.4, 1.0]], (0.4, 0.4), 1);
        assert_eq!(&f[0][3..8], &[0.0; 5]);

        let set = pillars_from_points(&[[0.1, 0.1, 1.0], [0.2, 0.1, 3.0]], &Pose2p5::default(), 16, 100);
        let grid = pillar_features(&set, &PillarEncoder::identity());
        let n = RangeSpec::SHORT.cell_count();
        let p = &set.pillars[0];
        let feats = pillar_point_features(&p.points, p.center, p.count);
        let k = p.cell.0 * 250 + p.cell.1;
        for c in 0..PILLAR_POINT_FEATURES {
            let expected = feats[0][c].max(feats[1][c]).max(0.0) as f32;
            assert_eq!(grid[c * n + k], expected);
        }
        assert_eq!(grid[0], 0.0);
    }

    #[test]
    fn pillar_encoding_is_permutation_invariant_and_translation_covariant() {
        let enc = PillarEncoder::seeded(16, 3);
        let pts: Vec<[f64; 3]> = (0..40)
            .map(|k| {
                let t = k as f64;
                [(t * 0.37).sin() * 3.0 + 0.05, (t * 0.71).cos() * 3.0 + 0.05, (t * 0.13).sin()]
            })
            .collect();
        let o = Pose2p5::default();
        let base = pillar_features(&pillars_from_points(&pts, &o, 16, 1000), &enc);
        let mut rev = pts.clone();
        rev.reverse();
        let permuted = pillar_features(&pillars_from_points(&rev, &o, 16, 1000), &enc);
        assert_eq!(base, permuted);

        let shifted: Vec<[f64; 3]> = pts.iter().map(|p| [p[0] + 0.8, p[1], p[2]]).collect();
        let moved = pillar_features(&pillars_from_points(&shifted, &o, 16, 1000), &enc);
        let n = 250 * 250;
        for c in 0..16 {
            for i in 0..249 {
                for j in 0..250 {
                    let a = base[c * n + i * 250 + j];
                    let b = moved[c * n + (i + 1) * 250 + j];
                    assert!((a - b).abs() < 1e-5, "c{c} ({i},{j}) {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn fuse_concatenates_channels() {
        let n = RangeSpec::SHORT.cell_count();
        let cam = vec![0.0; 4 * n];
        let pts = vec![1.0; 8 * n];
        let mut ele = Layer::missing(250);
        ele.set(3, 4, 12.5);
        let g = fuse(&cam, 4, &pts, 8, &ele).unwrap();
        assert_eq!(g.channels(), 14);
        assert_eq!(g.channel(12)[3 * 250 + 4], 0.5);
        assert_eq!(g.channel(13)[3 * 250 + 4], 1.0);
        assert_eq!(g.channel(13)[0], 0.0);
        assert!(g.channel(0).iter().all(|&v| v == 0.0));
        assert!(fuse(&cam, 5, &pts, 8, &ele).is_err());
        let raw = g.raw_elevation_m();
        assert_eq!(raw.get(3, 4), Some(12.5));
    }

    #[test]
    fn manifest_hash_depends_on_layout() {
        let a = ChannelManifest { camera: 8, pillar: 16 };
        let b = ChannelManifest { camera: 8, pillar: 8 };
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.names().len(), a.total());
    }

    #[allow(dead_code)]
    fn _pillar_type_is_public(p: Pillar) -> usize {
        p.count
    }
}
