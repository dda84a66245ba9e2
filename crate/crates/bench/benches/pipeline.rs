use criterion::{criterion_group, criterion_main, Criterion};
use mrbev::bevproject::{lift, splat, DepthBinning, DepthMode, PillarEncoder, PixelFeatureSpec};
use mrbev::gridmap::{GridMap, Pose2p5, RangeSpec, ELEVATION};
use mrbev::groundtruth::{compute_features, dataset_cameras, fuse_hindsight, frame_map, DatasetConfig, HindsightArchive};
use mrbev::losses::{LossWeights, RangeTarget, TargetPair};
use mrbev::planner::{plan, CostMaps, PlanPose, PlannerConfig, VehicleFootprint};
use mrbev::predictor::{parameter_gradients, predict, PredictorMode, PredictorParams};
use mrbev::synthworld::{generate_world, render_image, simulate_scan, true_elevation_map, World, WorldConfig};
use mrbev::voxelmap::VoxelMap;

struct Scene {
    world: World,
    pose: Pose2p5,
    cfg: DatasetConfig,
    voxels: VoxelMap,
    current: GridMap,
}

fn scene() -> Scene {
    let world = generate_world(&WorldConfig { seed: 3, ..WorldConfig::default() }).expect("world");
    let cfg = DatasetConfig::default();
    let mut voxels = VoxelMap::default();
    let mut track = Vec::new();
    let mut pose = Pose2p5::default();
    for s in 0..10 {
        let x = -10.0 + s as f64;
        pose = Pose2p5::new(x, 0.0, world.height(x, 0.0), 0.0);
        track.push(pose);
        voxels.integrate_scan(&simulate_scan(&world, &pose, &cfg.lidar, s as f64 * 0.5), &pose);
    }
    let columns = voxels.columns(&RangeSpec::SHORT, &pose);
    let current = frame_map(&columns, &RangeSpec::SHORT, &pose, &track, 5.0).expect("frame map");
    Scene { world, pose, cfg, voxels, current }
}

fn sensing(c: &mut Criterion) {
    let s = scene();
    let cam = dataset_cameras(&s.cfg).remove(0);
    let img = render_image(&s.world, &s.pose, &cam, s.cfg.camera_range, 0.0);
    let binning = DepthBinning::default();
    let pix = PixelFeatureSpec::default();
    let mut g = c.benchmark_group("sensing");
    g.sample_size(10);
    g.bench_function("simulate_scan", |b| b.iter(|| simulate_scan(&s.world, &s.pose, &s.cfg.lidar, 0.0)));
    g.bench_function("render_image", |b| b.iter(|| render_image(&s.world, &s.pose, &cam, s.cfg.camera_range, 0.0)));
    for (name, mode) in [("lift_splat_oracle", DepthMode::Oracle), ("lift_splat_uniform", DepthMode::Uniform)] {
        g.bench_function(name, |b| {
            b.iter(|| {
                let pts = lift(&img, &cam, &binning, mode, &pix).expect("lift");
                splat(&pts, &RangeSpec::SHORT)
            })
        });
    }
    g.finish();
}

fn learning(c: &mut Criterion) {
    let s = scene();
    let encoder = PillarEncoder::seeded(s.cfg.pillar_channels, s.cfg.pillar_seed);
    let short_ele = s.current.layer(ELEVATION).expect("elevation");
    let features = compute_features(&s.world, &s.voxels, &s.pose, &s.pose, short_ele, &s.cfg, &encoder, 5.0).expect("features");
    let params = PredictorParams::elevation_passthrough(PredictorMode::Hierarchical, features.manifest, 3).expect("params");
    let gt = TargetPair {
        micro: RangeTarget::from_map(&true_elevation_map(&s.world, &s.pose, &RangeSpec::MICRO)).expect("micro target"),
        short: RangeTarget::from_map(&true_elevation_map(&s.world, &s.pose, &RangeSpec::SHORT)).expect("short target"),
    };
    let weights = LossWeights::default();
    let mut g = c.benchmark_group("learning");
    g.sample_size(10);
    g.bench_function("compute_features", |b| {
        b.iter(|| compute_features(&s.world, &s.voxels, &s.pose, &s.pose, short_ele, &s.cfg, &encoder, 5.0).expect("features"))
    });
    g.bench_function("predict", |b| b.iter(|| predict(&features, &params).expect("predict")));
    g.bench_function("parameter_gradients", |b| b.iter(|| parameter_gradients(&features, &params, &gt, &weights).expect("gradients")));
    g.finish();
}

fn mapping(c: &mut Criterion) {
    let s = scene();
    let mut archive = HindsightArchive::new(60.0);
    for k in 0..10 {
        let x = k as f64 * 2.0;
        let pose = Pose2p5::new(x, 0.0, s.world.height(x, 0.0), 0.0);
        let mut frame = true_elevation_map(&s.world, &pose, &RangeSpec::SHORT);
        frame.timestamp = k as f64;
        archive.push(frame).expect("push");
    }
    let query = Pose2p5::new(10.0, 0.0, s.world.height(10.0, 0.0), 0.0);
    let truth = true_elevation_map(&s.world, &Pose2p5::default(), &RangeSpec::SHORT);
    let maps = CostMaps::from_map(&truth).expect("cost maps");
    let mut g = c.benchmark_group("mapping");
    g.sample_size(10);
    g.bench_function("fuse_hindsight_10_frames", |b| {
        b.iter(|| fuse_hindsight(&archive, &query, 5.0, &RangeSpec::SHORT).expect("fuse"))
    });
    g.bench_function("plan_90m", |b| {
        b.iter(|| {
            plan(&maps, &PlanPose::new(0.0, 0.0, 0.0), (90.0, 0.0), &VehicleFootprint::default(), &PlannerConfig::default()).expect("plan")
        })
    });
    g.finish();
}

criterion_group!(benches, sensing, learning, mapping);
criterion_main!(benches);
