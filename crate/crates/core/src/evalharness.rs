//! Region-partitioned evaluation: elevation MAE per region, risk MSE and
//! hazard precision/recall/F1, coverage, and multi-system comparison tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gridmap::{crop_geometry, crop_window, downsample4, GridMap, Layer, RangeId, RegionLabel, RegionLayer, CONFIDENCE, ELEVATION, RISK};
use crate::groundtruth::Sample;
use crate::io::fmt6;
use crate::losses::OBSERVED_CONFIDENCE;
use crate::predictor::{predict, predict_single_range, PredictorMode, PredictorParams};
use crate::bevproject::BevFeatureGrid;
use crate::groundtruth::{DatasetConfig, PoseError};
use crate::synthworld::{simulate_scan, SimScan, Trajectory, World};
use crate::voxelmap::{accumulate_scans, raw_elevation, AccumulationPolicy, VoxelMap, VOXEL_SIZE_M};
use rayon::prelude::*;

/// Bumped whenever the report columns change.
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const DEFAULT_FATAL_RISK: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Cells with risk at or above this are hazardous.
    pub fatal_risk_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            fatal_risk_threshold: DEFAULT_FATAL_RISK,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.fatal_risk_threshold > 0.0 && self.fatal_risk_threshold < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "fatal risk threshold must be in (0, 1), got {}",
                self.fatal_risk_threshold
            )));
        }
        Ok(())
    }
}

fn check_cells(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::dims(format!("{a}×{a}"), format!("{b}×{b}")));
    }
    Ok(())
}

/// Running sums of absolute elevation error per region.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MaeAccumulator {
    pub sum: [f64; 3],
    pub count: [usize; 3],
}

impl MaeAccumulator {
    /// Adds cells where both prediction and ground truth are defined.
    pub fn add(&mut self, pred: &Layer, gt: &Layer, regions: &RegionLayer) -> Result<()> {
        check_cells(gt.cells(), pred.cells())?;
        check_cells(gt.cells(), regions.cells)?;
        for k in 0..gt.len() {
            if let (Some(p), Some(g)) = (pred.get_flat(k), gt.get_flat(k)) {
                let r = regions.labels[k].code() as usize;
                self.sum[r] += (f64::from(p) - f64::from(g)).abs();
                self.count[r] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &MaeAccumulator) {
        for r in 0..3 {
            self.sum[r] += other.sum[r];
            self.count[r] += other.count[r];
        }
    }

    pub fn finish(&self) -> RegionMae {
        let region = std::array::from_fn(|r| (self.count[r] > 0).then(|| self.sum[r] / self.count[r] as f64));
        let n: usize = self.count.iter().sum();
        RegionMae {
            region,
            total: (n > 0).then(|| self.sum.iter().sum::<f64>() / n as f64),
            counts: self.count,
        }
    }
}

/// Mean absolute elevation error in meters; regions without cells are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionMae {
    /// Indexed by [`RegionLabel::code`].
    pub region: [Option<f64>; 3],
    /// Cell-count-weighted over all regions.
    pub total: Option<f64>,
    pub counts: [usize; 3],
}

impl RegionMae {
    pub fn get(&self, label: RegionLabel) -> Option<f64> {
        self.region[label.code() as usize]
    }
}

pub fn mae_by_region(pred: &Layer, gt: &Layer, regions: &RegionLayer) -> Result<RegionMae> {
    let mut acc = MaeAccumulator::default();
    acc.add(pred, gt, regions)?;
    Ok(acc.finish())
}

/// Confusion counts and squared error for risk.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RiskAccumulator {
    pub squared_error: f64,
    pub cells: usize,
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
}

impl RiskAccumulator {
    pub fn add(&mut self, pred: &Layer, gt: &Layer, threshold: f64) -> Result<()> {
        check_cells(gt.cells(), pred.cells())?;
        for k in 0..gt.len() {
            if let (Some(p), Some(g)) = (pred.get_flat(k), gt.get_flat(k)) {
                let (p, g) = (f64::from(p), f64::from(g));
                self.squared_error += (p - g).powi(2);
                self.cells += 1;
                match (p >= threshold, g >= threshold) {
                    (true, true) => self.true_positive += 1,
                    (true, false) => self.false_positive += 1,
                    (false, true) => self.false_negative += 1,
                    (false, false) => {}
                }
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, o: &RiskAccumulator) {
        self.squared_error += o.squared_error;
        self.cells += o.cells;
        self.true_positive += o.true_positive;
        self.false_positive += o.false_positive;
        self.false_negative += o.false_negative;
    }

    pub fn finish(&self) -> Result<RiskMetrics> {
        if self.cells == 0 {
            return Err(Error::EmptyInput("no cells with both predicted and ground-truth risk"));
        }
        let tp = self.true_positive as f64;
        let pd = self.true_positive + self.false_positive;
        let rd = self.true_positive + self.false_negative;
        let precision = if pd > 0 { tp / pd as f64 } else { 0.0 };
        let recall = if rd > 0 { tp / rd as f64 } else { 0.0 };
        Ok(RiskMetrics {
            mse: self.squared_error / self.cells as f64,
            precision,
            recall,
            f1: f1_score(precision, recall),
            precision_undefined: pd == 0,
            recall_undefined: rd == 0,
            counts: *self,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskMetrics {
    pub mse: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No predicted hazards: precision reported as 0.
    pub precision_undefined: bool,
    /// No ground-truth hazards: recall reported as 0.
    pub recall_undefined: bool,
    pub counts: RiskAccumulator,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

pub fn risk_metrics(pred: &Layer, gt: &Layer, cfg: &EvalConfig) -> Result<RiskMetrics> {
    cfg.validate()?;
    let mut acc = RiskAccumulator::default();
    acc.add(pred, gt, cfg.fatal_risk_threshold)?;
    acc.finish()
}

/// Defined/total cell counts per region.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct CoverageAccumulator {
    pub defined: [usize; 3],
    pub total: [usize; 3],
}

impl CoverageAccumulator {
    pub fn add(&mut self, map: &Layer, regions: &RegionLayer) -> Result<()> {
        check_cells(regions.cells, map.cells())?;
        for (k, label) in regions.labels.iter().enumerate() {
            let r = label.code() as usize;
            self.total[r] += 1;
            if map.get_flat(k).is_some() {
                self.defined[r] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, o: &CoverageAccumulator) {
        for r in 0..3 {
            self.defined[r] += o.defined[r];
            self.total[r] += o.total[r];
        }
    }

    /// Percent defined per region; `None` for regions with no cells.
    pub fn percent(&self) -> [Option<f64>; 3] {
        std::array::from_fn(|r| (self.total[r] > 0).then(|| 100.0 * self.defined[r] as f64 / self.total[r] as f64))
    }
}

pub fn coverage(map: &Layer, regions: &RegionLayer) -> Result<[Option<f64>; 3]> {
    let mut acc = CoverageAccumulator::default();
    acc.add(map, regions)?;
    Ok(acc.percent())
}

/// Mean |center crop of short − 4× downsampled micro| in meters over cells
/// defined in both.
pub fn consistency_mae(micro_elevation: &Layer, short_elevation: &Layer) -> Result<f64> {
    let n = short_elevation.cells();
    let (offset, crop) = crop_geometry(n);
    check_cells(2 * n, micro_elevation.cells())?;
    let sv = crop_window(short_elevation.values(), n, offset, crop);
    let sm = crop_window(short_elevation.valid(), n, offset, crop);
    let (mv, mm) = downsample4(micro_elevation.values(), micro_elevation.valid(), micro_elevation.cells());
    let (mut sum, mut count) = (0.0, 0usize);
    for k in 0..crop * crop {
        if sm[k] && mm[k] {
            sum += (f64::from(sv[k]) - f64::from(mv[k])).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no overlapping cells between micro and short maps"));
    }
    Ok(sum / count as f64)
}

/// All statistics for one range, accumulated over samples.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RangeAccumulator {
    pub mae: MaeAccumulator,
    pub risk: RiskAccumulator,
    pub coverage: CoverageAccumulator,
}

impl RangeAccumulator {
    pub fn add(&mut self, pred: &GridMap, gt: &GridMap, regions: &RegionLayer, cfg: &EvalConfig) -> Result<()> {
        let pe = pred.layer(ELEVATION)?;
        self.mae.add(pe, gt.layer(ELEVATION)?, regions)?;
        self.risk.add(pred.layer(RISK)?, gt.layer(RISK)?, cfg.fatal_risk_threshold)?;
        self.coverage.add(pe, regions)?;
        Ok(())
    }

    pub fn finish(&self) -> Result<RangeReport> {
        Ok(RangeReport {
            mae: self.mae.finish(),
            risk: self.risk.finish()?,
            coverage: self.coverage.percent(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RangeReport {
    pub mae: RegionMae,
    pub risk: RiskMetrics,
    pub coverage: [Option<f64>; 3],
}

/// Maps produced by a system for one sample; a range it does not cover is `None`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SystemMaps {
    pub micro: Option<GridMap>,
    pub short: Option<GridMap>,
}

impl SystemMaps {
    pub fn range(&self, id: RangeId) -> Option<&GridMap> {
        match id {
            RangeId::Micro => self.micro.as_ref(),
            RangeId::Short => self.short.as_ref(),
        }
    }
}

/// Anything that turns a sample into elevation + risk maps.
pub trait MapSystem: Sync {
    fn name(&self) -> &str;
    fn maps(&self, sample: &Sample) -> Result<SystemMaps>;
}

/// Keeps only cells whose confidence exceeds the observation threshold.
pub fn observed_only(map: &GridMap) -> Result<GridMap> {
    let conf = map.layer(CONFIDENCE)?;
    let keep = |l: &Layer| {
        let mut out = l.clone();
        for k in 0..l.len() {
            if !conf.get_flat(k).is_some_and(|c| f64::from(c) > OBSERVED_CONFIDENCE) {
                let (i, j) = (k / l.cells(), k % l.cells());
                out.clear(i, j);
            }
        }
        out
    };
    GridMap::new(map.spec, map.origin, map.timestamp)
        .with_layer(ELEVATION, keep(map.layer(ELEVATION)?))?
        .with_layer(RISK, keep(map.layer(RISK)?))
}

/// Onboard maps from accumulated LiDAR: raw elevation and heuristic risk,
/// defined only on observed cells.
#[derive(Debug, Clone, Copy, Default)]
pub struct RawVoxelBaseline;

impl MapSystem for RawVoxelBaseline {
    fn name(&self) -> &str {
        "raw-voxel"
    }

    fn maps(&self, s: &Sample) -> Result<SystemMaps> {
        Ok(SystemMaps {
            micro: Some(observed_only(&s.current.micro)?),
            short: Some(observed_only(&s.current.short)?),
        })
    }
}

/// Returns the ground truth itself; a sanity row that must score zero error.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleSystem;

impl MapSystem for OracleSystem {
    fn name(&self) -> &str {
        "ground-truth"
    }

    fn maps(&self, s: &Sample) -> Result<SystemMaps> {
        Ok(SystemMaps {
            micro: Some(s.ground_truth.micro.clone()),
            short: Some(s.ground_truth.short.clone()),
        })
    }
}

/// Which sensor inputs a predictor sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputAblation {
    #[default]
    Full,
    NoCamera,
    NoLidar,
}

impl InputAblation {
    pub fn apply(self, f: &BevFeatureGrid) -> BevFeatureGrid {
        match self {
            InputAblation::Full => f.clone(),
            InputAblation::NoCamera => f.without_camera(),
            InputAblation::NoLidar => f.without_lidar(),
        }
    }
}

/// Learned predictor; single-range parameters fill only their own range.
#[derive(Debug, Clone)]
pub struct PredictorSystem {
    pub name: String,
    pub params: PredictorParams,
    pub inputs: InputAblation,
}

impl MapSystem for PredictorSystem {
    fn name(&self) -> &str {
        &self.name
    }

    fn maps(&self, s: &Sample) -> Result<SystemMaps> {
        let f = self.inputs.apply(&s.features);
        Ok(match self.params.mode {
            PredictorMode::Hierarchical => {
                let p = predict(&f, &self.params)?;
                SystemMaps {
                    micro: Some(p.micro),
                    short: Some(p.short),
                }
            }
            PredictorMode::ShortOnly => SystemMaps {
                micro: None,
                short: Some(predict_single_range(&f, &self.params, RangeId::Short)?),
            },
            PredictorMode::MicroOnly => SystemMaps {
                micro: Some(predict_single_range(&f, &self.params, RangeId::Micro)?),
                short: None,
            },
        })
    }
}

/// One row of the comparison: a system's report per range plus its
/// cross-range consistency when it produces both.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemReport {
    pub name: String,
    pub micro: Option<RangeReport>,
    pub short: Option<RangeReport>,
    pub consistency_mae: Option<f64>,
}

impl SystemReport {
    pub fn range(&self, id: RangeId) -> Option<&RangeReport> {
        match id {
            RangeId::Micro => self.micro.as_ref(),
            RangeId::Short => self.short.as_ref(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub samples: usize,
    pub systems: Vec<SystemReport>,
}

fn regions_for(s: &Sample, id: RangeId) -> &RegionLayer {
    match id {
        RangeId::Micro => &s.regions_micro,
        RangeId::Short => &s.regions_short,
    }
}

fn gt_for(s: &Sample, id: RangeId) -> &GridMap {
    match id {
        RangeId::Micro => &s.ground_truth.micro,
        RangeId::Short => &s.ground_truth.short,
    }
}

/// Evaluates one system over all samples.
pub fn evaluate_system(system: &dyn MapSystem, samples: &[Sample], cfg: &EvalConfig) -> Result<SystemReport> {
    let mut acc: [Option<RangeAccumulator>; 2] = [None, None];
    let (mut cons_sum, mut cons_n) = (0.0, 0usize);
    for s in samples {
        let maps = system.maps(s)?;
        for (slot, id) in [RangeId::Micro, RangeId::Short].into_iter().enumerate() {
            if let Some(m) = maps.range(id) {
                let gt = gt_for(s, id);
                if m.spec.cells != gt.spec.cells {
                    return Err(Error::dims(
                        format!("{} map of {} cells", id, gt.spec.cells),
                        format!("{} from system {}", m.spec.cells, system.name()),
                    ));
                }
                acc[slot].get_or_insert_default().add(m, gt, regions_for(s, id), cfg)?;
            }
        }
        if let (Some(m), Some(sh)) = (&maps.micro, &maps.short) {
            cons_sum += consistency_mae(m.layer(ELEVATION)?, sh.layer(ELEVATION)?)?;
            cons_n += 1;
        }
    }
    let finish = |a: &Option<RangeAccumulator>| a.as_ref().map(|a| a.finish()).transpose();
    Ok(SystemReport {
        name: system.name().to_string(),
        micro: finish(&acc[0])?,
        short: finish(&acc[1])?,
        consistency_mae: (cons_n > 0).then(|| cons_sum / cons_n as f64),
    })
}

/// Evaluates every system on the same samples.
pub fn compare(systems: &[&dyn MapSystem], samples: &[Sample], cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation samples"));
    }
    let systems = systems
        .iter()
        .map(|s| evaluate_system(*s, samples, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        config: *cfg,
        samples: samples.len(),
        systems,
    })
}

/// Metric columns, shared by CSV and text output.
pub const METRIC_COLUMNS: [&str; 11] = [
    "mae_obs_pc",
    "mae_obs_f",
    "mae_unobs",
    "mae_total",
    "risk_mse",
    "precision",
    "recall",
    "f1",
    "coverage_obs_pc",
    "coverage_obs_f",
    "coverage_unobs",
];

fn metric_values(r: &RangeReport) -> [Option<f64>; 11] {
    [
        r.mae.region[0],
        r.mae.region[1],
        r.mae.region[2],
        r.mae.total,
        Some(r.risk.mse),
        Some(r.risk.precision),
        Some(r.risk.recall),
        Some(r.risk.f1),
        r.coverage[0],
        r.coverage[1],
        r.coverage[2],
    ]
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), fmt6)
}

impl EvalReport {
    /// `system,range,<11 metrics>,consistency_mae`, preceded by a comment line
    /// with the schema version and threshold.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# schema={} fatal_risk_threshold={} samples={}\nsystem,range,{},consistency_mae\n",
            REPORT_SCHEMA_VERSION,
            fmt6(self.config.fatal_risk_threshold),
            self.samples,
            METRIC_COLUMNS.join(",")
        );
        for s in &self.systems {
            for id in [RangeId::Micro, RangeId::Short] {
                if let Some(r) = s.range(id) {
                    let vals: Vec<String> = metric_values(r).into_iter().map(cell).collect();
                    out.push_str(&format!("{},{},{},{}\n", s.name, id, vals.join(","), cell(s.consistency_mae)));
                }
            }
        }
        out
    }

    /// Aligned text table for one range.
    pub fn to_table(&self, id: RangeId) -> String {
        let mut header = vec!["system".to_string()];
        header.extend(METRIC_COLUMNS.iter().map(|s| s.to_string()));
        let mut rows = vec![header];
        for s in &self.systems {
            if let Some(r) = s.range(id) {
                let mut row = vec![s.name.clone()];
                row.extend(metric_values(r).into_iter().map(|v| v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))));
                rows.push(row);
            }
        }
        let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = format!("{} range (fatal risk ≥ {})\n", id, self.config.fatal_risk_threshold);
        for row in rows {
            let line: Vec<String> = row.iter().zip(&widths).map(|(v, w)| format!("{v:>w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Raw-elevation coverage and accuracy for one accumulation setting.
#[derive(Debug, Clone, PartialEq)]
pub struct AccumulationRow {
    pub label: String,
    pub coverage: [Option<f64>; 3],
    pub mae: RegionMae,
}

/// Parses an accumulation setting: a scan count `N` or `vm` for the voxel map.
pub fn parse_accumulation(label: &str) -> Result<AccumulationPolicy> {
    match label.trim() {
        "vm" => Ok(AccumulationPolicy::voxel_map()),
        n => AccumulationPolicy::last_n(
            n.parse()
                .map_err(|_| Error::InvalidConfig(format!("accumulation setting '{n}' is neither a count nor 'vm'")))?,
        ),
    }
}

/// Short-range raw elevation built from scans accumulated under each policy,
/// scored against every sample's ground truth. Scans are re-simulated on the
/// dataset's schedule; only scans up to each sample's timestamp are used.
pub fn accumulation_study(
    world: &World,
    trajectory: &Trajectory,
    samples: &[Sample],
    settings: &[(String, AccumulationPolicy)],
    cfg: &DatasetConfig,
) -> Result<Vec<AccumulationRow>> {
    if samples.is_empty() || trajectory.is_empty() {
        return Err(Error::EmptyInput("accumulation study needs samples and a trajectory"));
    }
    let last_t = samples.iter().map(|s| s.timestamp).fold(f64::NEG_INFINITY, f64::max);
    let scan_dt = 1.0 / cfg.scan_rate_hz;
    let mut times = Vec::new();
    let mut next = trajectory.samples[0].0;
    for (t, pose) in &trajectory.samples {
        if *t > last_t + 1e-9 {
            break;
        }
        if t + 1e-9 >= next {
            next += scan_dt;
            times.push((*t, *pose));
        }
    }
    let scans: Vec<SimScan> = times
        .par_iter()
        .map(|(t, pose)| {
            let mut scan = simulate_scan(world, pose, &cfg.lidar, *t);
            if cfg.pose_error != PoseError::default() {
                scan.sensor_pose = cfg.pose_error.pose(&scan.sensor_pose, *t);
            }
            scan
        })
        .collect();
    settings
        .iter()
        .map(|(label, policy)| {
            let per_sample: Vec<Result<(MaeAccumulator, CoverageAccumulator)>> = samples
                .par_iter()
                .map(|s| {
                    let upto = scans.partition_point(|sc| sc.timestamp <= s.timestamp + 1e-9);
                    let points = accumulate_scans(&scans[..upto], policy)?;
                    let mut vm = VoxelMap::new(VOXEL_SIZE_M, f64::INFINITY);
                    vm.insert_points(&points);
                    let ele = raw_elevation(&vm, &s.ground_truth.short.spec, &s.pose);
                    let mut mae = MaeAccumulator::default();
                    mae.add(&ele, s.ground_truth.short.layer(ELEVATION)?, &s.regions_short)?;
                    let mut cov = CoverageAccumulator::default();
                    cov.add(&ele, &s.regions_short)?;
                    Ok((mae, cov))
                })
                .collect();
            let mut mae = MaeAccumulator::default();
            let mut cov = CoverageAccumulator::default();
            for r in per_sample {
                let (m, c) = r?;
                mae.merge(&m);
                cov.merge(&c);
            }
            Ok(AccumulationRow {
                label: label.clone(),
                coverage: cov.percent(),
                mae: mae.finish(),
            })
        })
        .collect()
}

pub const ACCUMULATION_CSV_HEADER: &str =
    "setting,coverage_obspc,coverage_obsf,coverage_unobs,mae_obspc,mae_obsf,mae_unobs";

pub fn accumulation_csv(rows: &[AccumulationRow]) -> String {
    let opt = |v: Option<f64>| v.map(fmt6).unwrap_or_default();
    let mut out = format!("{ACCUMULATION_CSV_HEADER}\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            opt(r.coverage[0]),
            opt(r.coverage[1]),
            opt(r.coverage[2]),
            opt(r.mae.region[0]),
            opt(r.mae.region[1]),
            opt(r.mae.region[2]),
        ));
    }
    out
}
