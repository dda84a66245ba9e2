//! Subcommand implementations. Each writes its outputs plus the effective
//! config into its output directory and returns a summary for printing.

use std::path::{Path, PathBuf};

use mrbev::evalharness::{
    accumulation_csv, accumulation_study, compare, parse_accumulation, AccumulationRow, EvalReport, InputAblation,
    MapSystem, OracleSystem, PredictorSystem, RawVoxelBaseline,
};
use mrbev::gridmap::{RangeId, RISK};
use mrbev::groundtruth::{build_dataset, Rejection};
use mrbev::io::{fmt6, layer_to_csv, layer_to_pgm, load_checkpoint, load_map, loss_csv, save_checkpoint};
use mrbev::losses::{LossWeights, RangeTarget, TargetPair};
use mrbev::planner::{plan, CostMaps, PlanPose, PlanResult};
use mrbev::predictor::{dataset_loss, train_from, LossRow, PredictorMode, PredictorParams, TrainSample, TrainState};
use mrbev::synthworld::{generate_trajectory, generate_world};
use mrbev::{GridMap, Layer};

use crate::config::RunConfig;
use crate::datadir::{
    create_dir, dataset_world, index_row, load_dataset, read_world_dir, require_file, save_sample, write_text,
    write_world_dir, Split, INDEX_FILE, INDEX_HEADER, REJECTED_FILE,
};
use crate::error::{CliError, CliResult, PathContext};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckp";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const ACCUMULATION_FILE: &str = "accumulation.csv";
pub const LOSS_ABLATION_FILE: &str = "loss_ablation.csv";
pub const PLANS_FILE: &str = "plans.csv";

fn prepare(cfg: &RunConfig, out: &Path) -> CliResult<()> {
    cfg.validate()?;
    create_dir(out)?;
    cfg.echo(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSummary {
    pub obstacles: usize,
    pub poses: usize,
}

pub fn genworld(cfg: &RunConfig, out: &Path) -> CliResult<WorldSummary> {
    prepare(cfg, out)?;
    let world = generate_world(&cfg.world)?;
    let traj = generate_trajectory(&world, &cfg.trajectory)?;
    write_world_dir(out, &cfg.world, &world, &traj)?;
    Ok(WorldSummary {
        obstacles: world.obstacles.len(),
        poses: traj.len(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSummary {
    pub train: usize,
    pub val: usize,
    pub rejected: Vec<Rejection>,
}

pub fn rejected_csv(rejected: &[Rejection]) -> String {
    let mut out = String::from("timestamp,x,y,fitness,reason\n");
    for r in rejected {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt6(r.timestamp),
            fmt6(r.pose.x),
            fmt6(r.pose.y),
            r.fitness.map(fmt6).unwrap_or_default(),
            r.reason.replace([',', '\n'], ";")
        ));
    }
    out
}

pub fn dataset(cfg: &RunConfig, world_dir: &Path, out: &Path) -> CliResult<DatasetSummary> {
    prepare(cfg, out)?;
    let (wcfg, world, traj) = read_world_dir(world_dir)?;
    let data = build_dataset(&world, &traj, &cfg.dataset)?;
    write_world_dir(out, &wcfg, &world, &traj)?;
    let n_train = cfg.split.train_count(data.samples.len());
    let mut index = format!("{INDEX_HEADER}\n");
    for (k, s) in data.samples.iter().enumerate() {
        save_sample(out, s)?;
        index.push_str(&index_row(s, if k < n_train { "train" } else { "val" }));
    }
    write_text(&out.join(INDEX_FILE), &index)?;
    write_text(&out.join(REJECTED_FILE), &rejected_csv(&data.rejected))?;
    Ok(DatasetSummary {
        train: n_train,
        val: data.samples.len() - n_train,
        rejected: data.rejected,
    })
}

fn training_set(dataset: &Path) -> CliResult<Vec<TrainSample>> {
    let samples = load_dataset(dataset, Split::Train)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("{}: no training samples", dataset.display())));
    }
    samples
        .into_iter()
        .map(|s| {
            Ok(TrainSample {
                targets: TargetPair {
                    micro: RangeTarget::from_map(&s.ground_truth.micro)?,
                    short: RangeTarget::from_map(&s.ground_truth.short)?,
                },
                features: s.features,
            })
        })
        .collect()
}

fn initial_params(cfg: &RunConfig, mode: PredictorMode, set: &[TrainSample]) -> CliResult<PredictorParams> {
    let mut p = PredictorParams::elevation_passthrough(mode, set[0].features.manifest, cfg.predictor.smooth_kernel)?;
    p.fit_input_scale(set.iter().map(|s| &s.features));
    Ok(p)
}

pub fn mode_for(single_range: Option<RangeId>) -> PredictorMode {
    match single_range {
        None => PredictorMode::Hierarchical,
        Some(RangeId::Micro) => PredictorMode::MicroOnly,
        Some(RangeId::Short) => PredictorMode::ShortOnly,
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub single_range: Option<RangeId>,
    pub resume: Option<PathBuf>,
    /// Stop after this many total steps instead of `train.steps`.
    pub stop_at: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub curve: Vec<LossRow>,
    /// Mean loss over the training split before and after this run.
    pub before: LossRow,
    pub after: LossRow,
}

pub fn train(cfg: &RunConfig, dataset: &Path, opts: &TrainOptions, out: &Path) -> CliResult<TrainOutcome> {
    prepare(cfg, out)?;
    let set = training_set(dataset)?;
    let mode = mode_for(opts.single_range);
    let mut state = match &opts.resume {
        Some(p) => {
            let state = load_checkpoint(&require_file(p)?).at(p)?;
            if opts.single_range.is_some() && state.params.mode != mode {
                return Err(CliError::Usage(format!(
                    "checkpoint {} was trained in {:?} mode, not {:?}",
                    p.display(),
                    state.params.mode,
                    mode
                )));
            }
            state
        }
        None => TrainState::new(initial_params(cfg, mode, &set)?),
    };
    let stop = opts.stop_at.unwrap_or(cfg.train.steps);
    let before = dataset_loss(&set, &state.params, &cfg.train.weights)?;
    let curve = train_from(&set, &mut state, &cfg.train, stop)?;
    let after = dataset_loss(&set, &state.params, &cfg.train.weights)?;
    let ck = out.join(CHECKPOINT_FILE);
    save_checkpoint(&ck, &state).at(&ck)?;
    write_text(&out.join(LOSS_FILE), &loss_csv(&curve))?;
    Ok(TrainOutcome {
        state,
        curve,
        before,
        after,
    })
}

/// Loss-ablation variant: which of the unobserved-elevation and
/// consistency terms stay on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossVariant {
    pub unobserved: bool,
    pub consistency: bool,
}

impl LossVariant {
    pub fn parse(s: &str) -> CliResult<Self> {
        let (unobserved, consistency) = match s.trim() {
            "none" => (false, false),
            "ul" => (true, false),
            "cl" => (false, true),
            "ul+cl" | "cl+ul" => (true, true),
            other => return Err(CliError::Usage(format!("unknown loss variant '{other}' (none, ul, cl, ul+cl)"))),
        };
        Ok(LossVariant { unobserved, consistency })
    }

    pub fn label(self) -> &'static str {
        match (self.unobserved, self.consistency) {
            (false, false) => "none",
            (true, false) => "ul",
            (false, true) => "cl",
            (true, true) => "ul+cl",
        }
    }

    pub fn weights(self, base: &LossWeights) -> LossWeights {
        LossWeights {
            alpha: if self.unobserved { base.alpha } else { 0.0 },
            gamma: if self.consistency { base.gamma } else { 0.0 },
            ..*base
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub checkpoints: Vec<PathBuf>,
    pub baselines: Vec<String>,
    pub accumulation: Vec<String>,
    pub losses: Vec<String>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalOutcome {
    pub report: Option<EvalReport>,
    pub accumulation: Option<Vec<AccumulationRow>>,
    pub loss_ablation: Option<EvalReport>,
}

fn baseline(name: &str) -> CliResult<Box<dyn MapSystem>> {
    match name {
        "raw-voxel" => Ok(Box::new(RawVoxelBaseline)),
        "ground-truth" => Ok(Box::new(OracleSystem)),
        other => Err(CliError::Usage(format!("unknown baseline '{other}' (raw-voxel, ground-truth)"))),
    }
}

fn checkpoint_system(path: &Path) -> CliResult<PredictorSystem> {
    let state = load_checkpoint(&require_file(path)?).at(path)?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| *s != "checkpoint")
        .map(str::to_string)
        .or_else(|| path.parent().and_then(|p| p.file_name()).and_then(|s| s.to_str()).map(str::to_string))
        .unwrap_or_else(|| "predictor".into());
    Ok(PredictorSystem {
        name,
        params: state.params,
        inputs: InputAblation::Full,
    })
}

fn write_report(out: &Path, file: &str, report: &EvalReport) -> CliResult<()> {
    write_text(&out.join(file), &report.to_csv())?;
    let stem = file.trim_end_matches(".csv");
    for id in [RangeId::Micro, RangeId::Short] {
        write_text(&out.join(format!("{stem}_{}.txt", id.name())), &report.to_table(id))?;
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, dataset: &Path, opts: &EvalOptions, out: &Path) -> CliResult<EvalOutcome> {
    prepare(cfg, out)?;
    let variants: Vec<LossVariant> = opts.losses.iter().map(|s| LossVariant::parse(s)).collect::<CliResult<_>>()?;
    let settings = opts
        .accumulation
        .iter()
        .map(|s| Ok((s.trim().to_string(), parse_accumulation(s).map_err(|e| CliError::Usage(e.to_string()))?)))
        .collect::<CliResult<Vec<_>>>()?;
    let mut systems: Vec<Box<dyn MapSystem>> = Vec::new();
    for c in &opts.checkpoints {
        systems.push(Box::new(checkpoint_system(c)?));
    }
    for b in &opts.baselines {
        systems.push(baseline(b)?);
    }
    if systems.is_empty() && settings.is_empty() && variants.is_empty() {
        systems.push(Box::new(RawVoxelBaseline));
    }
    let samples = load_dataset(dataset, Split::Val)?;
    if samples.is_empty() {
        return Err(CliError::Data(format!("{}: no validation samples", dataset.display())));
    }
    let mut outcome = EvalOutcome::default();
    if !systems.is_empty() {
        let refs: Vec<&dyn MapSystem> = systems.iter().map(|s| s.as_ref()).collect();
        let report = compare(&refs, &samples, &cfg.eval)?;
        write_report(out, REPORT_FILE, &report)?;
        outcome.report = Some(report);
    }
    if !settings.is_empty() {
        let (_, world, traj) = dataset_world(dataset)?;
        // Scans are re-simulated on the schedule the dataset was built with.
        let data_cfg = RunConfig::load(Some(&dataset.join(crate::config::CONFIG_ECHO)))?;
        let rows = accumulation_study(&world, &traj, &samples, &settings, &data_cfg.dataset)?;
        write_text(&out.join(ACCUMULATION_FILE), &accumulation_csv(&rows))?;
        outcome.accumulation = Some(rows);
    }
    if !variants.is_empty() {
        let set = training_set(dataset)?;
        let params0 = initial_params(cfg, PredictorMode::Hierarchical, &set)?;
        let mut trained = Vec::new();
        for v in &variants {
            let mut tc = cfg.train;
            tc.weights = v.weights(&cfg.train.weights);
            let mut state = TrainState::new(params0.clone());
            train_from(&set, &mut state, &tc, tc.steps)?;
            trained.push(PredictorSystem {
                name: format!("loss:{}", v.label()),
                params: state.params,
                inputs: InputAblation::Full,
            });
        }
        let refs: Vec<&dyn MapSystem> = trained.iter().map(|s| s as &dyn MapSystem).collect();
        let report = compare(&refs, &samples, &cfg.eval)?;
        write_report(out, LOSS_ABLATION_FILE, &report)?;
        outcome.loss_ablation = Some(report);
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Default)]
pub struct PlanOptions {
    pub maps: Vec<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub sample: usize,
    pub checkpoint: Option<PathBuf>,
    pub start: Option<[f64; 3]>,
    pub goal: Option<[f64; 2]>,
}

#[derive(Debug, Clone)]
pub struct NamedPlan {
    pub name: String,
    pub plan: PlanResult,
}

/// Risk as gray levels 1..=200 (missing cells 0) with the path drawn at 255.
pub fn plan_overlay(map: &GridMap, plan: &PlanResult) -> CliResult<Vec<u8>> {
    let risk = map.layer(RISK)?;
    let n = risk.cells();
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    let head = out.len();
    out.extend(risk.iter().map(|v| match v {
        None => 0u8,
        Some(r) => 1 + (f64::from(r).clamp(0.0, 1.0) * 199.0).round() as u8,
    }));
    for (i, j) in plan.cells(&map.spec) {
        out[head + i * n + j] = 255;
    }
    Ok(out)
}

fn plan_inputs(opts: &PlanOptions) -> CliResult<Vec<(String, GridMap)>> {
    let mut maps = Vec::new();
    for p in &opts.maps {
        let map = load_map(&require_file(p)?).at(p)?;
        let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or("map").to_string();
        maps.push((name, map));
    }
    if let Some(ds) = &opts.dataset {
        let samples = load_dataset(ds, Split::All)?;
        let s = samples
            .iter()
            .find(|s| s.index == opts.sample)
            .ok_or_else(|| CliError::Data(format!("{}: no sample {}", ds.display(), opts.sample)))?;
        let short = |m: mrbev::evalharness::SystemMaps, who: &str| {
            m.short.ok_or_else(|| CliError::Usage(format!("{who} produces no short-range map")))
        };
        maps.push(("raw-voxel".into(), short(RawVoxelBaseline.maps(s)?, "raw-voxel")?));
        if let Some(c) = &opts.checkpoint {
            let sys = checkpoint_system(c)?;
            let name = sys.name.clone();
            maps.push((name.clone(), short(sys.maps(s)?, &name)?));
        }
    }
    if maps.is_empty() {
        return Err(CliError::Usage("plan needs --map files or --dataset".into()));
    }
    Ok(maps)
}

pub fn plan_summary_csv(plans: &[NamedPlan]) -> String {
    let mut out = String::from("map,reached_goal,cost,length,waypoints\n");
    for p in plans {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            p.name,
            p.plan.reached_goal,
            fmt6(p.plan.cost),
            fmt6(p.plan.length),
            p.plan.waypoints.len()
        ));
    }
    out
}

pub fn plan_cmd(cfg: &RunConfig, opts: &PlanOptions, out: &Path) -> CliResult<Vec<NamedPlan>> {
    cfg.validate()?;
    let maps = plan_inputs(opts)?;
    prepare(cfg, out)?;
    let s = opts.start.unwrap_or(cfg.plan.start);
    let g = opts.goal.unwrap_or(cfg.plan.goal);
    let mut plans = Vec::new();
    for (name, map) in &maps {
        let result = plan(&CostMaps::from_map(map)?, &PlanPose::new(s[0], s[1], s[2]), (g[0], g[1]), &cfg.footprint, &cfg.planner)?;
        write_text(&out.join(format!("plan_{name}.csv")), &result.to_csv())?;
        let pgm = out.join(format!("plan_{name}.pgm"));
        std::fs::write(&pgm, plan_overlay(map, &result)?).at(&pgm)?;
        plans.push(NamedPlan {
            name: name.clone(),
            plan: result,
        });
    }
    write_text(&out.join(PLANS_FILE), &plan_summary_csv(&plans))?;
    Ok(plans)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Pgm,
    Csv,
    Both,
}

/// Writes the requested layers (all when empty) of a BTM1 map.
pub fn export(map_path: &Path, layers: &[String], format: ExportFormat, out: &Path) -> CliResult<Vec<PathBuf>> {
    let map = load_map(&require_file(map_path)?).at(map_path)?;
    let names = if layers.is_empty() { map.layer_names() } else { layers.to_vec() };
    let selected: Vec<(&String, &Layer)> = names
        .iter()
        .map(|n| Ok((n, map.layer(n)?)))
        .collect::<CliResult<_>>()?;
    create_dir(out)?;
    let stem = map_path.file_stem().and_then(|s| s.to_str()).unwrap_or("map");
    let mut written = Vec::new();
    for (name, layer) in selected {
        if format != ExportFormat::Csv {
            let p = out.join(format!("{stem}_{name}.pgm"));
            std::fs::write(&p, layer_to_pgm(layer)).at(&p)?;
            written.push(p);
        }
        if format != ExportFormat::Pgm {
            let p = out.join(format!("{stem}_{name}.csv"));
            write_text(&p, &layer_to_csv(layer))?;
            written.push(p);
        }
    }
    Ok(written)
}
