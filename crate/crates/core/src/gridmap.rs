//! Vehicle-centric, gravity-aligned multi-range grid maps.
//!
//! Two ranges exist: *micro* (±50 m at 0.2 m, 500 cells per side) and
//! *short* (±100 m at 0.8 m, 250 cells per side). Row index `i` grows with
//! vehicle-forward `x`, column index `j` with vehicle-left `y`, and cell
//! `(i, j)` covers `[i·r − E/2, (i+1)·r − E/2)` along each axis.
//!
//! Elevation layers hold heights relative to the map origin's `z`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;

use crate::error::{Error, Result};

/// Elevations are clamped to this magnitude before normalisation.
pub const ELEVATION_LIMIT_M: f64 = 25.0;
/// First short-range row/column of the ±50 m crop window.
pub const CROP_OFFSET: usize = 62;
/// Side length of the ±50 m crop window in short-range cells.
pub const CROP_CELLS: usize = 125;
/// Micro cells per short cell along one axis.
pub const RESOLUTION_RATIO: usize = 4;

pub const ELEVATION: &str = "elevation";
pub const RISK: &str = "risk";
pub const CONFIDENCE: &str = "confidence";
pub const REGION: &str = "region";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RangeId {
    Micro,
    Short,
}

impl RangeId {
    pub fn code(self) -> u8 {
        match self {
            RangeId::Micro => 0,
            RangeId::Short => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(RangeId::Micro),
            1 => Some(RangeId::Short),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RangeId::Micro => "micro",
            RangeId::Short => "short",
        }
    }

    pub fn spec(self) -> RangeSpec {
        match self {
            RangeId::Micro => RangeSpec::MICRO,
            RangeId::Short => RangeSpec::SHORT,
        }
    }
}

impl fmt::Display for RangeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for RangeId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "micro" => Ok(RangeId::Micro),
            "short" => Ok(RangeId::Short),
            other => Err(Error::InvalidConfig(format!("unknown range '{other}'"))),
        }
    }
}

/// Extent and resolution of one map range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeSpec {
    pub id: RangeId,
    pub extent_m: f64,
    pub resolution_m: f64,
    pub cells: usize,
}

impl RangeSpec {
    pub const MICRO: RangeSpec = RangeSpec {
        id: RangeId::Micro,
        extent_m: 100.0,
        resolution_m: 0.2,
        cells: 500,
    };

    pub const SHORT: RangeSpec = RangeSpec {
        id: RangeId::Short,
        extent_m: 200.0,
        resolution_m: 0.8,
        cells: 250,
    };

    /// Builds a spec, requiring the extent to be an integer multiple of the resolution.
    pub fn new(id: RangeId, extent_m: f64, resolution_m: f64) -> Result<Self> {
        if !(extent_m > 0.0 && resolution_m > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "range extent {extent_m} and resolution {resolution_m} must be positive"
            )));
        }
        let ratio = extent_m / resolution_m;
        let cells = ratio.round();
        if (ratio - cells).abs() > 1e-6 {
            return Err(Error::InvalidConfig(format!(
                "extent {extent_m} is not a multiple of resolution {resolution_m}"
            )));
        }
        Ok(RangeSpec {
            id,
            extent_m,
            resolution_m,
            cells: cells as usize,
        })
    }

    pub fn half_extent(&self) -> f64 {
        0.5 * self.extent_m
    }

    pub fn cell_count(&self) -> usize {
        self.cells * self.cells
    }

    /// Local coordinate of the center of row/column `k`.
    pub fn center_coord(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.resolution_m - self.half_extent()
    }

    /// Index along one axis for a local coordinate, if inside the map.
    pub fn axis_index(&self, local: f64) -> Option<usize> {
        let k = ((local + self.half_extent()) / self.resolution_m).floor();
        if k >= 0.0 && k < self.cells as f64 {
            Some(k as usize)
        } else {
            None
        }
    }

    /// Vehicle-frame center of cell `(i, j)`.
    pub fn cell_center(&self, i: usize, j: usize) -> (f64, f64) {
        (self.center_coord(i), self.center_coord(j))
    }
}

/// Normalises an angle to `(−π, π]`.
pub fn normalize_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Position plus yaw of a gravity-aligned frame in the world.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Pose2p5 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub yaw: f64,
}

impl Pose2p5 {
    pub fn new(x: f64, y: f64, z: f64, yaw: f64) -> Self {
        Pose2p5 {
            x,
            y,
            z,
            yaw: normalize_angle(yaw),
        }
    }

    /// World xy → frame-local xy.
    pub fn to_local(&self, wx: f64, wy: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let dx = wx - self.x;
        let dy = wy - self.y;
        (c * dx + s * dy, -s * dx + c * dy)
    }

    /// Frame-local xy → world xy.
    pub fn to_world(&self, lx: f64, ly: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * lx - s * ly, self.y + s * lx + c * ly)
    }

    pub fn xy_distance(&self, other: &Pose2p5) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Cell containing world point `p` in a map centered at `origin`.
pub fn world_to_cell(p: [f64; 2], origin: &Pose2p5, spec: &RangeSpec) -> Option<(usize, usize)> {
    let (lx, ly) = origin.to_local(p[0], p[1]);
    Some((spec.axis_index(lx)?, spec.axis_index(ly)?))
}

/// World xy of the center of cell `(i, j)`.
pub fn cell_to_world(i: usize, j: usize, origin: &Pose2p5, spec: &RangeSpec) -> (f64, f64) {
    let (lx, ly) = spec.cell_center(i, j);
    origin.to_world(lx, ly)
}

/// Clamps to ±25 m and maps to ±1.
pub fn rescale_elevation(e: f64) -> f64 {
    e.clamp(-ELEVATION_LIMIT_M, ELEVATION_LIMIT_M) / ELEVATION_LIMIT_M
}

pub fn unscale_elevation(v: f64) -> f64 {
    v * ELEVATION_LIMIT_M
}

/// A square layer of `f32` values with an explicit per-cell validity bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    cells: usize,
    values: Vec<f32>,
    valid: Vec<bool>,
}

impl Layer {
    pub fn missing(cells: usize) -> Self {
        Layer {
            cells,
            values: vec![0.0; cells * cells],
            valid: vec![false; cells * cells],
        }
    }

    pub fn filled(cells: usize, value: f32) -> Self {
        Layer {
            cells,
            values: vec![value; cells * cells],
            valid: vec![true; cells * cells],
        }
    }

    pub fn from_parts(cells: usize, values: Vec<f32>, valid: Vec<bool>) -> Result<Self> {
        let n = cells * cells;
        if values.len() != n || valid.len() != n {
            return Err(Error::dims(n, format!("{}/{}", values.len(), valid.len())));
        }
        let mut layer = Layer { cells, values, valid };
        for k in 0..n {
            if !layer.valid[k] {
                layer.values[k] = 0.0;
            } else if !layer.values[k].is_finite() {
                return Err(Error::NonFinite(format!("layer cell {k}")));
            }
        }
        Ok(layer)
    }

    /// Builds a layer from optional values; `None` marks a missing cell.
    pub fn from_options(cells: usize, data: &[Option<f32>]) -> Result<Self> {
        let values = data.iter().map(|v| v.unwrap_or(0.0)).collect();
        let valid = data.iter().map(Option::is_some).collect();
        Layer::from_parts(cells, values, valid)
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize) -> usize {
        i * self.cells + j
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> Option<f32> {
        let k = self.index(i, j);
        self.valid[k].then(|| self.values[k])
    }

    #[inline]
    pub fn get_flat(&self, k: usize) -> Option<f32> {
        self.valid[k].then(|| self.values[k])
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        let k = self.index(i, j);
        self.set_flat(k, v);
    }

    #[inline]
    pub fn set_flat(&mut self, k: usize, v: f32) {
        debug_assert!(v.is_finite());
        self.values[k] = v;
        self.valid[k] = true;
    }

    pub fn clear(&mut self, i: usize, j: usize) {
        let k = self.index(i, j);
        self.values[k] = 0.0;
        self.valid[k] = false;
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn iter(&self) -> impl Iterator<Item = Option<f32>> + '_ {
        self.values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| ok.then_some(v))
    }

    /// Applies `f` to every valid cell.
    pub fn map_valid(&self, f: impl Fn(f32) -> f32) -> Layer {
        let values = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| if ok { f(v) } else { 0.0 })
            .collect();
        Layer {
            cells: self.cells,
            values,
            valid: self.valid.clone(),
        }
    }

    /// Values as `f64`, with missing cells set to `fill`.
    pub fn to_f64(&self, fill: f64) -> Vec<f64> {
        self.iter().map(|v| v.map_or(fill, f64::from)).collect()
    }

    /// Min/max over valid cells.
    pub fn value_range(&self) -> Option<(f32, f32)> {
        self.iter().flatten().fold(None, |acc, v| match acc {
            None => Some((v, v)),
            Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
        })
    }
}

/// Extracts the `out × out` window starting at `(offset, offset)`.
pub fn crop_window<T: Copy>(src: &[T], n: usize, offset: usize, out: usize) -> Vec<T> {
    debug_assert!(offset + out <= n && src.len() == n * n);
    let mut dst = Vec::with_capacity(out * out);
    for i in offset..offset + out {
        dst.extend_from_slice(&src[i * n + offset..i * n + offset + out]);
    }
    dst
}

/// Masked 4×4 block mean of an `n × n` grid; a block is missing iff all of its cells are.
pub fn downsample4(values: &[f32], valid: &[bool], n: usize) -> (Vec<f32>, Vec<bool>) {
    debug_assert!(n % RESOLUTION_RATIO == 0);
    let m = n / RESOLUTION_RATIO;
    let mut out_v = vec![0.0f32; m * m];
    let mut out_ok = vec![false; m * m];
    for bi in 0..m {
        for bj in 0..m {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for di in 0..RESOLUTION_RATIO {
                let row = (bi * RESOLUTION_RATIO + di) * n + bj * RESOLUTION_RATIO;
                for k in row..row + RESOLUTION_RATIO {
                    if valid[k] {
                        sum += f64::from(values[k]);
                        count += 1;
                    }
                }
            }
            if count > 0 {
                out_v[bi * m + bj] = (sum / count as f64) as f32;
                out_ok[bi * m + bj] = true;
            }
        }
    }
    (out_v, out_ok)
}

/// Offset and side of the centered half-size window of an `n`-cell short grid.
///
/// For 250 cells this is `(62, 125)`.
pub fn crop_geometry(short_cells: usize) -> (usize, usize) {
    let size = short_cells / 2;
    ((short_cells - size) / 2, size)
}

/// Micro spec covering the center crop of `short` at a quarter of its resolution.
pub fn micro_spec_for(short: &RangeSpec) -> RangeSpec {
    let (_, size) = crop_geometry(short.cells);
    RangeSpec {
        id: RangeId::Micro,
        extent_m: size as f64 * short.resolution_m,
        resolution_m: short.resolution_m / RESOLUTION_RATIO as f64,
        cells: size * RESOLUTION_RATIO,
    }
}

/// Central 125×125 block (rows/cols `[62, 187)`) of a short-range layer.
pub fn center_crop(short: &Layer) -> Result<Layer> {
    if short.cells != RangeSpec::SHORT.cells {
        return Err(Error::dims(RangeSpec::SHORT.cells, short.cells));
    }
    Ok(Layer {
        cells: CROP_CELLS,
        values: crop_window(&short.values, short.cells, CROP_OFFSET, CROP_CELLS),
        valid: crop_window(&short.valid, short.cells, CROP_OFFSET, CROP_CELLS),
    })
}

/// 500×500 micro layer → 125×125 layer at 0.8 m by masked 4×4 means.
pub fn downsample_micro_to_short(micro: &Layer) -> Result<Layer> {
    if micro.cells != RangeSpec::MICRO.cells {
        return Err(Error::dims(RangeSpec::MICRO.cells, micro.cells));
    }
    let (values, valid) = downsample4(&micro.values, &micro.valid, micro.cells);
    Ok(Layer {
        cells: micro.cells / RESOLUTION_RATIO,
        values,
        valid,
    })
}

/// Evaluation region of a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RegionLabel {
    /// Observed in the past and current frames.
    ObsPC,
    /// Observed only in future frames.
    ObsF,
    Unobs,
}

impl RegionLabel {
    pub const ALL: [RegionLabel; 3] = [RegionLabel::ObsPC, RegionLabel::ObsF, RegionLabel::Unobs];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            RegionLabel::ObsPC => "ObsPC",
            RegionLabel::ObsF => "ObsF",
            RegionLabel::Unobs => "Unobs",
        }
    }
}

/// One label per cell.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionLayer {
    pub cells: usize,
    pub labels: Vec<RegionLabel>,
}

impl RegionLayer {
    pub fn uniform(cells: usize, label: RegionLabel) -> Self {
        RegionLayer {
            cells,
            labels: vec![label; cells * cells],
        }
    }

    pub fn get(&self, i: usize, j: usize) -> RegionLabel {
        self.labels[i * self.cells + j]
    }

    pub fn counts(&self) -> [usize; 3] {
        let mut c = [0usize; 3];
        for l in &self.labels {
            c[l.code() as usize] += 1;
        }
        c
    }

    /// Fraction of cells carrying each label, in `RegionLabel::ALL` order.
    pub fn fractions(&self) -> [f64; 3] {
        let n = self.labels.len().max(1) as f64;
        self.counts().map(|c| c as f64 / n)
    }

    pub fn to_layer(&self) -> Layer {
        Layer {
            cells: self.cells,
            values: self.labels.iter().map(|l| f32::from(l.code())).collect(),
            valid: vec![true; self.labels.len()],
        }
    }

    pub fn from_layer(layer: &Layer) -> Result<Self> {
        let labels = layer
            .iter()
            .map(|v| {
                v.and_then(|x| RegionLabel::from_code(x as u8))
                    .ok_or_else(|| Error::Format("invalid region code".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RegionLayer {
            cells: layer.cells,
            labels,
        })
    }
}

/// A stack of equally sized layers at one range, centered on a vehicle pose.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMap {
    pub spec: RangeSpec,
    pub origin: Pose2p5,
    pub timestamp: f64,
    layers: BTreeMap<String, Layer>,
}

impl GridMap {
    pub fn new(spec: RangeSpec, origin: Pose2p5, timestamp: f64) -> Self {
        GridMap {
            spec,
            origin,
            timestamp,
            layers: BTreeMap::new(),
        }
    }

    /// Inserts or replaces a layer. Risk and confidence layers must lie in `[0, 1]`.
    pub fn insert(&mut self, name: &str, layer: Layer) -> Result<()> {
        if layer.cells != self.spec.cells {
            return Err(Error::dims(self.spec.cells, layer.cells));
        }
        if name == RISK || name == CONFIDENCE {
            if let Some((lo, hi)) = layer.value_range() {
                if lo < 0.0 || hi > 1.0 {
                    return Err(Error::InvalidConfig(format!(
                        "{name} layer values must lie in [0, 1], got [{lo}, {hi}]"
                    )));
                }
            }
        }
        self.layers.insert(name.to_string(), layer);
        Ok(())
    }

    pub fn with_layer(mut self, name: &str, layer: Layer) -> Result<Self> {
        self.insert(name, layer)?;
        Ok(self)
    }

    pub fn layer(&self, name: &str) -> Result<&Layer> {
        self.layers.get(name).ok_or_else(|| Error::UnknownLayer {
            name: name.to_string(),
            available: self.layer_names().join(", "),
        })
    }

    pub fn has_layer(&self, name: &str) -> bool {
        self.layers.contains_key(name)
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.keys().cloned().collect()
    }

    pub fn layers(&self) -> impl Iterator<Item = (&str, &Layer)> {
        self.layers.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn remove(&mut self, name: &str) -> Option<Layer> {
        self.layers.remove(name)
    }
}
