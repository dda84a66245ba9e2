//! File formats: BTM1 layered maps, PGM/CSV layer exports, scan and voxel
//! dumps, DEM rasters, pillar-encoder weights, training checkpoints and CSVs.
//!
//! All binary formats are little-endian.

use std::fs;
use std::path::{Path, PathBuf};

use crate::bevproject::{BevFeatureGrid, ChannelManifest, PillarEncoder, PILLAR_POINT_FEATURES};
use crate::error::{Error, Result};
use crate::gridmap::{GridMap, Layer, Pose2p5, RangeId, RangeSpec};
use crate::groundtruth::DemTile;
use crate::predictor::{LossRow, PredictorMode, PredictorParams, TrainState};
use crate::voxelmap::VoxelMap;

pub const MAP_MAGIC: &[u8; 4] = b"BTM1";
pub const DEM_MAGIC: &[u8; 4] = b"DEM1";
pub const ENCODER_MAGIC: &[u8; 4] = b"PEN1";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CKP1";

/// Formats with 6 significant digits, then prints the shortest exact form.
pub fn fmt6(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".into();
    }
    let rounded: f64 = format!("{x:.5e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Cursor over a byte slice with typed little-endian reads.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| format_err("unexpected end of file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| format_err("length overflow"))?)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4"))).collect())
    }

    fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.array::<4>()?;
        if &m != expected {
            return Err(format_err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&m),
                String::from_utf8_lossy(expected)
            )));
        }
        Ok(())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(format_err(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.bytes(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.bytes(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn i32(&mut self, v: i32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f32s(&mut self, v: impl IntoIterator<Item = f32>) {
        for x in v {
            self.f32(x);
        }
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| format_err(format!("{what} {v} exceeds format limits")))
}

/// Serializes a map: header (magic, range id, extent, resolution, cells,
/// origin pose, timestamp, layer count, names) then per layer the row-major
/// f32 values followed by a validity bitmask.
pub fn encode_map(map: &GridMap) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(MAP_MAGIC);
    w.u8(map.spec.id.code());
    w.f64(map.spec.extent_m);
    w.f64(map.spec.resolution_m);
    w.u32(to_u32(map.spec.cells, "cell count")?);
    for v in [map.origin.x, map.origin.y, map.origin.z, map.origin.yaw, map.timestamp] {
        w.f64(v);
    }
    let layers: Vec<(&str, &Layer)> = map.layers().collect();
    w.u32(to_u32(layers.len(), "layer count")?);
    for (name, _) in &layers {
        let b = name.as_bytes();
        w.u16(u16::try_from(b.len()).map_err(|_| format_err("layer name too long"))?);
        w.bytes(b);
    }
    for (_, layer) in &layers {
        w.f32s(layer.values().iter().copied());
        let mut mask = vec![0u8; layer.len().div_ceil(8)];
        for (k, &v) in layer.valid().iter().enumerate() {
            if v {
                mask[k / 8] |= 1 << (k % 8);
            }
        }
        w.bytes(&mask);
    }
    Ok(w.buf)
}

pub fn decode_map(bytes: &[u8]) -> Result<GridMap> {
    let mut r = Reader::new(bytes);
    r.magic(MAP_MAGIC)?;
    let id = RangeId::from_code(r.u8()?).ok_or_else(|| format_err("unknown range id"))?;
    let extent = r.f64()?;
    let resolution = r.f64()?;
    let cells = r.u32()? as usize;
    let spec = RangeSpec::new(id, extent, resolution)?;
    if spec.cells != cells {
        return Err(Error::dims(spec.cells, cells));
    }
    let origin = Pose2p5::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let timestamp = r.f64()?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u16()? as usize;
        names.push(String::from_utf8(r.take(len)?.to_vec()).map_err(|_| format_err("layer name is not UTF-8"))?);
    }
    let n = cells * cells;
    let mut map = GridMap::new(spec, origin, timestamp);
    for name in names {
        let values = r.f32s(n)?;
        let mask = r.take(n.div_ceil(8))?;
        let valid = (0..n).map(|k| mask[k / 8] & (1 << (k % 8)) != 0).collect();
        map.insert(&name, Layer::from_parts(cells, values, valid)?)?;
    }
    r.finish()?;
    Ok(map)
}

pub fn save_map(path: &Path, map: &GridMap) -> Result<()> {
    fs::write(path, encode_map(map)?)?;
    Ok(())
}

pub fn load_map(path: &Path) -> Result<GridMap> {
    decode_map(&fs::read(path)?)
}

/// Feature grid as a map whose layers are the manifest channels.
pub fn features_to_map(f: &BevFeatureGrid) -> Result<GridMap> {
    let n = f.spec.cells;
    let mut map = GridMap::new(f.spec, f.origin, f.timestamp);
    for (c, name) in f.manifest.names().iter().enumerate() {
        map.insert(name, Layer::from_parts(n, f.channel(c).to_vec(), vec![true; n * n])?)?;
    }
    Ok(map)
}

/// Inverse of [`features_to_map`]; the manifest is recovered from the channel names.
pub fn features_from_map(map: &GridMap) -> Result<BevFeatureGrid> {
    let names = map.layer_names();
    let camera = names.iter().filter(|n| n.starts_with("cam")).count();
    let pillar = names.iter().filter(|n| n.starts_with("pts")).count();
    let manifest = ChannelManifest { camera, pillar };
    let mut f = BevFeatureGrid::zeros_on(map.spec, manifest).at(map.origin, map.timestamp);
    for (c, name) in manifest.names().iter().enumerate() {
        let layer = map.layer(name)?;
        f.channel_mut(c).copy_from_slice(layer.values());
    }
    Ok(f)
}

pub fn manifest_path(features_path: &Path) -> PathBuf {
    let mut p = features_path.as_os_str().to_owned();
    p.push(".manifest");
    PathBuf::from(p)
}

/// Writes the features as BTM1 plus the channel manifest next to it.
pub fn save_features(path: &Path, f: &BevFeatureGrid) -> Result<()> {
    save_map(path, &features_to_map(f)?)?;
    fs::write(manifest_path(path), f.manifest.to_text())?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<BevFeatureGrid> {
    features_from_map(&load_map(path)?)
}

/// 8-bit binary PGM, min-max scaled over valid cells; missing cells are 0.
pub fn layer_to_pgm(layer: &Layer) -> Vec<u8> {
    let n = layer.cells();
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    let (lo, hi) = layer.value_range().unwrap_or((0.0, 0.0));
    let span = f64::from(hi) - f64::from(lo);
    out.extend(layer.iter().map(|v| match v {
        None => 0,
        Some(_) if span <= 0.0 => 255,
        Some(v) => ((f64::from(v) - f64::from(lo)) / span * 254.0).round() as u8 + 1,
    }));
    out
}

/// Width and height from a binary PGM header.
pub fn pgm_dimensions(bytes: &[u8]) -> Result<(usize, usize)> {
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(64)]);
    let mut it = text.split_ascii_whitespace();
    if it.next() != Some("P5") {
        return Err(format_err("not a binary PGM"));
    }
    let mut num = || -> Result<usize> {
        it.next().and_then(|s| s.parse().ok()).ok_or_else(|| format_err("bad PGM header"))
    };
    Ok((num()?, num()?))
}

/// `row,col,value` per cell; missing values are empty.
pub fn layer_to_csv(layer: &Layer) -> String {
    let n = layer.cells();
    let mut out = String::from("row,col,value\n");
    for i in 0..n {
        for j in 0..n {
            let v = layer.get(i, j).map_or_else(String::new, |v| fmt6(f64::from(v)));
            out.push_str(&format!("{i},{j},{v}\n"));
        }
    }
    out
}

/// Raw xyz float32 records.
pub fn encode_points(points: &[[f32; 3]]) -> Vec<u8> {
    let mut w = Writer::default();
    for p in points {
        w.f32s(p.iter().copied());
    }
    w.buf
}

pub fn decode_points(bytes: &[u8]) -> Result<Vec<[f32; 3]>> {
    if bytes.len() % 12 != 0 {
        return Err(format_err("point dump length is not a multiple of 12"));
    }
    let mut r = Reader::new(bytes);
    (0..bytes.len() / 12).map(|_| Ok([r.f32()?, r.f32()?, r.f32()?])).collect()
}

/// One voxel record as stored in a dump.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VoxelRecord {
    pub key: [i32; 3],
    pub count: u32,
    pub centroid: [f32; 3],
    pub min_z: f32,
    pub max_z: f32,
}

/// Records `(kx, ky, kz, count, centroid xyz, min_z, max_z)` in key order.
pub fn encode_voxels(map: &VoxelMap) -> Vec<u8> {
    let mut w = Writer::default();
    for (key, s) in map.sorted() {
        for k in key {
            w.i32(k);
        }
        w.u32(s.point_count);
        w.f32s(s.centroid().map(|v| v as f32));
        w.f32(s.min_z as f32);
        w.f32(s.max_z as f32);
    }
    w.buf
}

pub fn decode_voxels(bytes: &[u8]) -> Result<Vec<VoxelRecord>> {
    const RECORD: usize = 36;
    if bytes.len() % RECORD != 0 {
        return Err(format_err("voxel dump length is not a multiple of the record size"));
    }
    let mut r = Reader::new(bytes);
    (0..bytes.len() / RECORD)
        .map(|_| {
            Ok(VoxelRecord {
                key: [r.i32()?, r.i32()?, r.i32()?],
                count: r.u32()?,
                centroid: [r.f32()?, r.f32()?, r.f32()?],
                min_z: r.f32()?,
                max_z: r.f32()?,
            })
        })
        .collect()
}

/// Header (magic, origin xy, pitch, rows, cols) then f32 samples row-major.
pub fn encode_dem(dem: &DemTile) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(DEM_MAGIC);
    w.f64(dem.origin_x);
    w.f64(dem.origin_y);
    w.f64(dem.pitch);
    w.u32(to_u32(dem.rows, "DEM rows")?);
    w.u32(to_u32(dem.cols, "DEM cols")?);
    w.f32s(dem.data.iter().copied());
    Ok(w.buf)
}

pub fn decode_dem(bytes: &[u8]) -> Result<DemTile> {
    let mut r = Reader::new(bytes);
    r.magic(DEM_MAGIC)?;
    let (ox, oy, pitch) = (r.f64()?, r.f64()?, r.f64()?);
    let (rows, cols) = (r.u32()? as usize, r.u32()? as usize);
    let data = r.f32s(rows * cols)?;
    r.finish()?;
    DemTile::new(ox, oy, pitch, rows, cols, data)
}

/// Header (magic, out channels, in features) then weights and bias as f32.
pub fn encode_encoder(e: &PillarEncoder) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(ENCODER_MAGIC);
    w.u32(to_u32(e.out_channels, "encoder channels")?);
    w.u32(PILLAR_POINT_FEATURES as u32);
    w.f32s(e.weights.iter().copied());
    w.f32s(e.bias.iter().copied());
    Ok(w.buf)
}

pub fn decode_encoder(bytes: &[u8]) -> Result<PillarEncoder> {
    let mut r = Reader::new(bytes);
    r.magic(ENCODER_MAGIC)?;
    let out = r.u32()? as usize;
    let inputs = r.u32()? as usize;
    if inputs != PILLAR_POINT_FEATURES {
        return Err(Error::dims(PILLAR_POINT_FEATURES, inputs));
    }
    let weights = r.f32s(out * inputs)?;
    let bias = r.f32s(out)?;
    r.finish()?;
    PillarEncoder::new(out, weights, bias)
}

/// Header (magic, mode, manifest shape and hash, kernel, step, lengths)
/// then input scale, parameters and both Adam moments as f32.
pub fn encode_checkpoint(state: &TrainState) -> Result<Vec<u8>> {
    let p = &state.params;
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u8(p.mode.code());
    w.u32(to_u32(p.manifest.camera, "camera channels")?);
    w.u32(to_u32(p.manifest.pillar, "pillar channels")?);
    w.u64(p.manifest.hash());
    w.u32(to_u32(p.smooth_kernel, "kernel")?);
    w.u64(state.step as u64);
    w.u32(to_u32(p.input_scale.len(), "scale length")?);
    w.u32(to_u32(p.values.len(), "parameter count")?);
    for v in [&p.input_scale, &p.values, &state.m, &state.v] {
        w.f32s(v.iter().map(|&x| x as f32));
    }
    Ok(w.buf)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let mode = PredictorMode::from_code(r.u8()?).ok_or_else(|| format_err("unknown predictor mode"))?;
    let manifest = ChannelManifest {
        camera: r.u32()? as usize,
        pillar: r.u32()? as usize,
    };
    let hash = r.u64()?;
    if hash != manifest.hash() {
        return Err(Error::ChannelMismatch(format!(
            "checkpoint manifest hash {hash:#x} does not match its channel shape ({:#x})",
            manifest.hash()
        )));
    }
    let kernel = r.u32()? as usize;
    let step = r.u64()? as usize;
    let scale_len = r.u32()? as usize;
    let n = r.u32()? as usize;
    let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<f64>>();
    let input_scale = widen(r.f32s(scale_len)?);
    let values = widen(r.f32s(n)?);
    let m = widen(r.f32s(n)?);
    let v = widen(r.f32s(n)?);
    r.finish()?;
    let params = PredictorParams {
        mode,
        manifest,
        smooth_kernel: kernel,
        input_scale,
        values,
    };
    params.validate()?;
    Ok(TrainState { params, m, v, step })
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    fs::write(path, encode_checkpoint(state)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}

pub const LOSS_CSV_HEADER: &str = "step,L_trav_m,L_trav_s,L_ele_m,L_ele_s,L_cons,L_total";

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for r in rows {
        let t = &r.terms;
        let vals = [t.micro.trav, t.short.trav, t.micro.ele, t.short.ele, t.cons, r.total].map(fmt6);
        out.push_str(&format!("{},{}\n", r.step, vals.join(",")));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridmap::{ELEVATION, RISK};
    use crate::losses::{LossTerms, RangeTerms};

    #[test]
    fn sig_digits() {
        assert_eq!(fmt6(0.0), "0");
        assert_eq!(fmt6(0.396), "0.396");
        assert_eq!(fmt6(1.0 / 3.0), "0.333333");
        assert_eq!(fmt6(123456789.0), "123457000");
        assert_eq!(fmt6(-2.5e-7), "-0.00000025");
    }

    fn sample_map() -> GridMap {
        let spec = RangeSpec::new(RangeId::Micro, 1.6, 0.4).unwrap();
        let ele = Layer::from_options(4, &(0..16).map(|k| (k % 3 != 0).then_some(k as f32 * 0.5)).collect::<Vec<_>>()).unwrap();
        GridMap::new(spec, Pose2p5::new(1.0, 2.0, 3.0, 0.5), 7.5)
            .with_layer(ELEVATION, ele)
            .unwrap()
            .with_layer(RISK, Layer::filled(4, 0.25))
            .unwrap()
    }

    #[test]
    fn map_round_trip() {
        let m = sample_map();
        let bytes = encode_map(&m).unwrap();
        assert_eq!(&bytes[..4], MAP_MAGIC);
        assert_eq!(decode_map(&bytes).unwrap(), m);
        assert!(decode_map(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_map(&bad).is_err());
    }

    #[test]
    fn pgm_and_csv_shapes() {
        let m = sample_map();
        let pgm = layer_to_pgm(m.layer(ELEVATION).unwrap());
        assert_eq!(pgm_dimensions(&pgm).unwrap(), (4, 4));
        assert_eq!(pgm.len(), "P5\n4 4\n255\n".len() + 16);
        let csv = layer_to_csv(m.layer(ELEVATION).unwrap());
        assert_eq!(csv.lines().count(), 1 + 16);
        assert!(csv.contains("0,1,0.5\n"));
        assert!(csv.contains("0,0,\n"));
    }

    #[test]
    fn binary_dumps_round_trip() {
        let pts = vec![[1.0f32, -2.0, 3.5], [0.0, 0.25, -1.0]];
        assert_eq!(decode_points(&encode_points(&pts)).unwrap(), pts);
        assert!(decode_points(&[0u8; 5]).is_err());

        let mut vm = VoxelMap::default();
        vm.insert_points(&[[0.1, 0.1, 0.1], [0.2, 0.1, 0.3], [5.0, 5.0, 1.0]]);
        let recs = decode_voxels(&encode_voxels(&vm)).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs.iter().map(|r| r.count).sum::<u32>(), 3);

        let dem = DemTile::new(-1.0, 2.0, 1.0, 2, 3, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(decode_dem(&encode_dem(&dem).unwrap()).unwrap(), dem);

        let enc = PillarEncoder::seeded(6, 3);
        assert_eq!(decode_encoder(&encode_encoder(&enc).unwrap()).unwrap(), enc);
    }

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let manifest = ChannelManifest { camera: 2, pillar: 3 };
        let params = PredictorParams::elevation_passthrough(PredictorMode::Hierarchical, manifest, 3).unwrap();
        let mut state = TrainState::new(params);
        state.step = 12;
        state.m[0] = f64::from(0.5f32);
        let bytes = encode_checkpoint(&state).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), state);
        let mut bad = bytes.clone();
        bad[13] ^= 1; // inside the manifest hash
        assert!(matches!(decode_checkpoint(&bad), Err(Error::ChannelMismatch(_))));
    }

    #[test]
    fn loss_csv_schema() {
        let row = LossRow {
            step: 3,
            terms: LossTerms {
                micro: RangeTerms { trav: 0.1, ele: 0.2 },
                short: RangeTerms { trav: 0.3, ele: 0.4 },
                cons: 0.5,
            },
            total: 1.0 / 3.0,
        };
        let csv = loss_csv(&[row]);
        assert_eq!(csv, format!("{LOSS_CSV_HEADER}\n3,0.1,0.3,0.2,0.4,0.5,0.333333\n"));
    }
}
