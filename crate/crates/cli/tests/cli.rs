use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const SMALL: &str = r#"
[world]
trees = 40
rocks = 10
half_size = 200.0

[trajectory]
duration = 10.0

[dataset]
image_width = 64
image_height = 32

[dataset.lidar]
rings = 8
azimuth_steps = 90

[train]
steps = 4
batch_size = 2
"#;

fn mrbev(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mrbev")).args(args).output().expect("spawn mrbev")
}

fn ok(args: &[&str]) -> Output {
    let out = mrbev(args);
    assert!(out.status.success(), "mrbev {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// A small world and dataset shared by the tests below.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    dataset: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path().to_path_buf();
        let config = root.join("small.toml");
        fs::write(&config, SMALL).expect("write config");
        let world = root.join("world");
        let dataset = root.join("dataset");
        ok(&["--config", s(&config), "--seed", "2", "genworld", "--out", s(&world)]);
        ok(&["--config", s(&config), "dataset", "--world", s(&world), "--out", s(&dataset)]);
        Fixture {
            _dir: dir,
            root,
            config,
            dataset,
        }
    })
}

/// Lines of a CSV file without `#` comment lines.
fn csv_rows(path: &Path) -> Vec<String> {
    fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}", path.display()))
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

#[test]
fn genworld_is_deterministic_and_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(&["--seed", "9", "genworld", "--trees", "7", "--rocks", "3", "--out", s(&a)]);
    ok(&["--seed", "9", "genworld", "--trees", "7", "--rocks", "3", "--out", s(&b)]);
    ok(&["--seed", "10", "genworld", "--trees", "7", "--rocks", "3", "--out", s(&c)]);
    let obstacles = |d: &Path| fs::read(d.join("obstacles.csv")).unwrap();
    assert_eq!(obstacles(&a), obstacles(&b));
    assert_ne!(obstacles(&a), obstacles(&c));
    assert_eq!(csv_rows(&a.join("obstacles.csv")).len(), 1 + 10);
    assert_eq!(fs::read(a.join("trajectory.csv")).unwrap(), fs::read(b.join("trajectory.csv")).unwrap());
}

#[test]
fn config_errors_exit_with_code_1() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[world]\ntreez = 3\n").unwrap();
    let out = mrbev(&["--config", s(&bad), "genworld", "--out", s(&dir.path().join("w"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("treez"));

    fs::write(&bad, "[world]\nhalf_size = -1.0\n").unwrap();
    let out = mrbev(&["--config", s(&bad), "genworld", "--out", s(&dir.path().join("w"))]);
    assert_eq!(out.status.code(), Some(1));

    assert_eq!(mrbev(&["train"]).status.code(), Some(1));
}

#[test]
fn dataset_index_lists_every_sample() {
    let f = fixture();
    let rows = csv_rows(&f.dataset.join("index.csv"));
    assert!(rows[0].starts_with("index,split,timestamp"));
    let samples = &rows[1..];
    assert!(samples.len() >= 3, "{} samples", samples.len());
    assert!(samples.iter().any(|r| r.contains(",train,")));
    assert!(samples.iter().any(|r| r.contains(",val,")));
    for r in samples {
        let dir = r.rsplit(',').next().unwrap();
        assert!(f.dataset.join(dir).join("features.btm").is_file());
    }
}

#[test]
fn training_resumes_bit_identically() {
    let f = fixture();
    let cfg = s(&f.config);
    let ds = s(&f.dataset);
    let (full, part, resumed) = (f.root.join("t_full"), f.root.join("t_part"), f.root.join("t_resumed"));
    ok(&["--config", cfg, "train", "--dataset", ds, "--out", s(&full)]);
    ok(&["--config", cfg, "train", "--dataset", ds, "--stop-at", "2", "--out", s(&part)]);
    let ckp = part.join("checkpoint.ckp");
    ok(&["--config", cfg, "train", "--dataset", ds, "--resume", s(&ckp), "--out", s(&resumed)]);
    assert_eq!(fs::read(full.join("checkpoint.ckp")).unwrap(), fs::read(resumed.join("checkpoint.ckp")).unwrap());

    let rows = csv_rows(&full.join("loss.csv"));
    assert_eq!(rows[0], "step,L_trav_m,L_trav_s,L_ele_m,L_ele_s,L_cons,L_total");
    assert_eq!(rows.len(), 1 + 4);
}

#[test]
fn single_range_training_leaves_other_terms_zero() {
    let f = fixture();
    let out = f.root.join("t_micro");
    ok(&["--config", s(&f.config), "train", "--dataset", s(&f.dataset), "--single-range", "micro", "--out", s(&out)]);
    for row in &csv_rows(&out.join("loss.csv"))[1..] {
        let v: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!((v[2], v[4], v[5]), (0.0, 0.0, 0.0), "{row}");
        assert!(v[6] > 0.0);
    }
}

#[test]
fn eval_reports_zero_error_for_ground_truth() {
    let f = fixture();
    let out = f.root.join("eval_gt");
    ok(&["--config", s(&f.config), "eval", "--dataset", s(&f.dataset), "--baseline", "ground-truth", "--baseline", "raw-voxel", "--out", s(&out)]);
    let rows = csv_rows(&out.join("report.csv"));
    let header: Vec<&str> = rows[0].split(',').collect();
    let gt: Vec<&String> = rows.iter().filter(|r| r.starts_with("ground-truth,")).collect();
    assert_eq!(gt.len(), 2);
    for row in gt {
        for (k, v) in row.split(',').enumerate() {
            if header[k].starts_with("mae_") || header[k] == "risk_mse" {
                assert_eq!(v.parse::<f64>().unwrap(), 0.0, "{} in {row}", header[k]);
            }
        }
    }
    assert!(rows.iter().any(|r| r.starts_with("raw-voxel,")));
}

#[test]
fn eval_sweeps_write_their_tables() {
    let f = fixture();
    let out = f.root.join("eval_sweeps");
    ok(&["--config", s(&f.config), "eval", "--dataset", s(&f.dataset), "--accum", "1,vm", "--loss", "ul,ul+cl", "--out", s(&out)]);
    let accum = csv_rows(&out.join("accumulation.csv"));
    assert_eq!(accum.len(), 1 + 2);
    assert!(accum[2].starts_with("vm,"), "{}", accum[2]);
    // One row per variant and range.
    let loss = csv_rows(&out.join("loss_ablation.csv"));
    assert_eq!(loss.len(), 1 + 4);
    assert!(loss[1].starts_with("loss:ul,micro,"), "{}", loss[1]);

    let bad = mrbev(&["eval", "--dataset", s(&f.dataset), "--accum", "0", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn plan_writes_paths_and_overlays() {
    let f = fixture();
    let out = f.root.join("plan");
    ok(&["--config", s(&f.config), "plan", "--dataset", s(&f.dataset), "--goal", "60", "0", "--out", s(&out)]);
    let plans = csv_rows(&out.join("plans.csv"));
    assert!(plans.len() >= 2);
    let pgm = fs::read(out.join("plan_raw-voxel.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n250 250\n255\n"));
    assert_eq!(pgm.len(), b"P5\n250 250\n255\n".len() + 250 * 250);

    let missing = mrbev(&["plan", "--map", s(&f.root.join("nope.btm")), "--out", s(&out)]);
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn export_writes_layers_and_rejects_unknown_ones() {
    let f = fixture();
    let map = f.dataset.join("samples/00000/gt_short.btm");
    let out = f.root.join("export");
    ok(&["export", "--map", s(&map), "--layer", "elevation", "--layer", "risk", "--format", "both", "--out", s(&out)]);
    for name in ["elevation", "risk"] {
        assert!(out.join(format!("gt_short_{name}.pgm")).is_file());
        assert_eq!(csv_rows(&out.join(format!("gt_short_{name}.csv"))).len(), 1 + 250 * 250);
    }
    let bad = mrbev(&["export", "--map", s(&map), "--layer", "slope", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(2));
}
