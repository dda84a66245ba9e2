//! On-disk layout of world and dataset directories.
//!
//! World directory: `world.toml`, `obstacles.csv`, `trajectory.csv`.
//! Dataset directory: the world files, `index.csv`, `rejected.csv` and one
//! `samples/NNNNN/` directory of BTM1 maps per sample.

use std::fs;
use std::path::{Path, PathBuf};

use mrbev::gridmap::REGION;
use mrbev::groundtruth::{RangeMaps, RigidTransform2p5, Sample};
use mrbev::io::{fmt6, load_features, load_map, save_features, save_map};
use mrbev::synthworld::{generate_world, ObstacleShape, Trajectory, World, WorldConfig};
use mrbev::{Pose2p5, RegionLayer};

use crate::error::{CliError, CliResult, PathContext};

pub const WORLD_FILE: &str = "world.toml";
pub const OBSTACLES_FILE: &str = "obstacles.csv";
pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const INDEX_FILE: &str = "index.csv";
pub const REJECTED_FILE: &str = "rejected.csv";
pub const INDEX_HEADER: &str = "index,split,timestamp,x,y,z,yaw,reg_tx,reg_ty,reg_tz,reg_yaw,fitness,degenerate,dir";

const FEATURES: &str = "features.btm";
const GT_MICRO: &str = "gt_micro.btm";
const GT_SHORT: &str = "gt_short.btm";
const CUR_MICRO: &str = "cur_micro.btm";
const CUR_SHORT: &str = "cur_short.btm";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    All,
}

impl Split {
    fn keeps(self, label: &str) -> bool {
        match self {
            Split::All => true,
            Split::Train => label == "train",
            Split::Val => label == "val",
        }
    }
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).at(dir)
}

pub fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).at(path)
}

fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).at(path)
}

pub fn obstacles_csv(world: &World) -> String {
    let mut out = String::from("kind,cx,cy,height,size_x,size_y,top_z\n");
    for o in &world.obstacles {
        let (kind, a, b) = match o.shape {
            ObstacleShape::Tree { radius } => ("tree", radius, radius),
            ObstacleShape::Rock { half_x, half_y } => ("rock", half_x, half_y),
        };
        out.push_str(&format!(
            "{kind},{},{},{},{},{},{}\n",
            fmt6(o.cx),
            fmt6(o.cy),
            fmt6(o.height),
            fmt6(a),
            fmt6(b),
            fmt6(o.top_z)
        ));
    }
    out
}

/// Full-precision CSV; trajectories are inputs to later stages.
pub fn trajectory_csv(t: &Trajectory) -> String {
    let mut out = String::from("t,x,y,z,yaw\n");
    for (ts, p) in &t.samples {
        out.push_str(&format!("{ts},{},{},{},{}\n", p.x, p.y, p.z, p.yaw));
    }
    out
}

fn parse_f64(field: &str, path: &Path, line: usize) -> CliResult<f64> {
    field
        .trim()
        .parse()
        .map_err(|_| CliError::Data(format!("{}:{line}: bad number '{field}'", path.display())))
}

pub fn parse_trajectory(text: &str, path: &Path) -> CliResult<Trajectory> {
    let mut samples = Vec::new();
    for (k, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 5 {
            return Err(CliError::Data(format!("{}:{}: expected 5 fields", path.display(), k + 1)));
        }
        let v: Vec<f64> = f.iter().map(|s| parse_f64(s, path, k + 1)).collect::<CliResult<_>>()?;
        samples.push((v[0], Pose2p5::new(v[1], v[2], v[3], v[4])));
    }
    if samples.is_empty() {
        return Err(CliError::Data(format!("{}: empty trajectory", path.display())));
    }
    let dt = if samples.len() > 1 { samples[1].0 - samples[0].0 } else { 0.0 };
    Ok(Trajectory { dt, samples })
}

pub fn write_world_dir(dir: &Path, cfg: &WorldConfig, world: &World, traj: &Trajectory) -> CliResult<()> {
    create_dir(dir)?;
    write_text(&dir.join(WORLD_FILE), &cfg.to_toml())?;
    write_text(&dir.join(OBSTACLES_FILE), &obstacles_csv(world))?;
    write_text(&dir.join(TRAJECTORY_FILE), &trajectory_csv(traj))
}

/// Regenerates the world from its config and reads the trajectory.
pub fn read_world_dir(dir: &Path) -> CliResult<(WorldConfig, World, Trajectory)> {
    let wpath = dir.join(WORLD_FILE);
    let cfg = WorldConfig::from_toml(&read_text(&wpath)?).at(&wpath)?;
    let world = generate_world(&cfg).at(&wpath)?;
    let tpath = dir.join(TRAJECTORY_FILE);
    let traj = parse_trajectory(&read_text(&tpath)?, &tpath)?;
    Ok((cfg, world, traj))
}

fn sample_dir(index: usize) -> String {
    format!("samples/{index:05}")
}

pub fn index_row(s: &Sample, split: &str) -> String {
    let r = &s.registration;
    format!(
        "{},{split},{},{},{},{},{},{},{},{},{},{},{},{}\n",
        s.index,
        fmt6(s.timestamp),
        fmt6(s.pose.x),
        fmt6(s.pose.y),
        fmt6(s.pose.z),
        fmt6(s.pose.yaw),
        fmt6(r.tx),
        fmt6(r.ty),
        fmt6(r.tz),
        fmt6(r.yaw),
        r.fitness.map(fmt6).unwrap_or_default(),
        r.degenerate,
        sample_dir(s.index)
    )
}

pub fn save_sample(root: &Path, s: &Sample) -> CliResult<()> {
    let dir = root.join(sample_dir(s.index));
    create_dir(&dir)?;
    let put = |name: &str, map: &mrbev::GridMap| {
        let p = dir.join(name);
        save_map(&p, map).at(&p)
    };
    let fp = dir.join(FEATURES);
    save_features(&fp, &s.features).at(&fp)?;
    let mut gm = s.ground_truth.micro.clone();
    gm.insert(REGION, s.regions_micro.to_layer())?;
    let mut gs = s.ground_truth.short.clone();
    gs.insert(REGION, s.regions_short.to_layer())?;
    put(GT_MICRO, &gm)?;
    put(GT_SHORT, &gs)?;
    put(CUR_MICRO, &s.current.micro)?;
    put(CUR_SHORT, &s.current.short)
}

fn load_sample(root: &Path, rel: &str, index: usize, registration: RigidTransform2p5) -> CliResult<Sample> {
    let dir = root.join(rel);
    let get = |name: &str| {
        let p = dir.join(name);
        load_map(&p).at(&p)
    };
    let fp = dir.join(FEATURES);
    let features = load_features(&fp).at(&fp)?;
    let mut gm = get(GT_MICRO)?;
    let mut gs = get(GT_SHORT)?;
    let take_regions = |m: &mut mrbev::GridMap, name: &str| -> CliResult<RegionLayer> {
        let layer = m
            .remove(REGION)
            .ok_or_else(|| CliError::Data(format!("{}: missing region layer", dir.join(name).display())))?;
        Ok(RegionLayer::from_layer(&layer)?)
    };
    let regions_micro = take_regions(&mut gm, GT_MICRO)?;
    let regions_short = take_regions(&mut gs, GT_SHORT)?;
    Ok(Sample {
        index,
        timestamp: features.timestamp,
        pose: features.origin,
        features,
        ground_truth: RangeMaps { micro: gm, short: gs },
        current: RangeMaps {
            micro: get(CUR_MICRO)?,
            short: get(CUR_SHORT)?,
        },
        regions_micro,
        regions_short,
        registration,
    })
}

/// Index rows as `(split, sample)` pairs, restricted to `split`.
pub fn load_dataset(root: &Path, split: Split) -> CliResult<Vec<Sample>> {
    let ipath = root.join(INDEX_FILE);
    let text = read_text(&ipath)?;
    let mut lines = text.lines();
    if lines.next() != Some(INDEX_HEADER) {
        return Err(CliError::Data(format!("{}: unexpected header", ipath.display())));
    }
    let mut out = Vec::new();
    for (k, line) in lines.enumerate() {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 14 {
            return Err(CliError::Data(format!("{}:{}: expected 14 fields", ipath.display(), k + 2)));
        }
        if !split.keeps(f[1]) {
            continue;
        }
        let index: usize = f[0]
            .parse()
            .map_err(|_| CliError::Data(format!("{}:{}: bad index", ipath.display(), k + 2)))?;
        let num = |i: usize| parse_f64(f[i], &ipath, k + 2);
        let mut reg = RigidTransform2p5::new(num(7)?, num(8)?, num(9)?, num(10)?);
        reg.fitness = if f[11].is_empty() { None } else { Some(num(11)?) };
        reg.degenerate = f[12] == "true";
        out.push(load_sample(root, f[13], index, reg)?);
    }
    Ok(out)
}

pub fn dataset_world(root: &Path) -> CliResult<(WorldConfig, World, Trajectory)> {
    read_world_dir(root)
}

pub fn require_file(path: &Path) -> CliResult<PathBuf> {
    if path.is_file() {
        Ok(path.to_path_buf())
    } else {
        Err(CliError::Data(format!("{}: no such file", path.display())))
    }
}
