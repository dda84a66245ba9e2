use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mrbev::gridmap::RangeId;
use mrbev_cli::commands::{self, EvalOptions, ExportFormat, PlanOptions, TrainOptions};
use mrbev_cli::{CliError, CliResult, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "mrbev", version, about = "Multi-range BEV terrain mapping pipeline")]
struct Cli {
    /// TOML run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the world and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum RangeArg {
    Micro,
    Short,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FormatArg {
    Pgm,
    Csv,
    Both,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic world and a trajectory through it.
    Genworld {
        #[arg(long)]
        trees: Option<usize>,
        #[arg(long)]
        rocks: Option<usize>,
    },
    /// Simulate sensing along the trajectory and build a labelled dataset.
    Dataset {
        /// Directory written by `genworld`.
        #[arg(long)]
        world: PathBuf,
    },
    /// Train the predictor on the training split.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Train a single range head only.
        #[arg(long, value_enum)]
        single_range: Option<RangeArg>,
        /// Continue from a checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
        /// Stop early after this many total steps.
        #[arg(long)]
        stop_at: Option<usize>,
    },
    /// Evaluate checkpoints and baselines on the validation split.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
        /// raw-voxel or ground-truth.
        #[arg(long = "baseline")]
        baselines: Vec<String>,
        /// Accumulation sweep, e.g. 1,2,5,10,vm.
        #[arg(long, value_delimiter = ',')]
        accum: Vec<String>,
        /// Loss sweep, e.g. ul,cl,ul+cl.
        #[arg(long, value_delimiter = ',')]
        loss: Vec<String>,
    },
    /// Plan on short-range maps and write plan CSVs with PGM overlays.
    Plan {
        #[arg(long = "map")]
        maps: Vec<PathBuf>,
        /// Plan on a dataset sample's raw-voxel map (and a checkpoint's prediction).
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Start as x,y,heading in the map frame.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        start: Option<Vec<f64>>,
        /// Goal as x,y in the map frame.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        goal: Option<Vec<f64>>,
    },
    /// Export map layers as PGM images or CSV.
    Export {
        #[arg(long)]
        map: PathBuf,
        #[arg(long = "layer")]
        layers: Vec<String>,
        #[arg(long, value_enum, default_value = "pgm")]
        format: FormatArg,
    },
}

fn fixed<const N: usize>(v: Option<Vec<f64>>, what: &str) -> CliResult<Option<[f64; N]>> {
    v.map(|v| {
        <[f64; N]>::try_from(v).map_err(|_| CliError::Usage(format!("{what} needs {N} comma-separated numbers")))
    })
    .transpose()
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    let out: &Path = &cli.out;
    match cli.command {
        Command::Genworld { trees, rocks } => {
            if let Some(t) = trees {
                cfg.world.trees = t;
            }
            if let Some(r) = rocks {
                cfg.world.rocks = r;
            }
            let s = commands::genworld(&cfg, out)?;
            println!("world: {} obstacles, {} poses -> {}", s.obstacles, s.poses, out.display());
        }
        Command::Dataset { world } => {
            let s = commands::dataset(&cfg, &world, out)?;
            println!("dataset: {} train, {} val, {} rejected -> {}", s.train, s.val, s.rejected.len(), out.display());
            for r in &s.rejected {
                let fit = r.fitness.map_or("n/a".to_string(), |f| format!("{f:.4}"));
                println!("  rejected t={:.1} fitness={fit}: {}", r.timestamp, r.reason);
            }
        }
        Command::Train { dataset, single_range, resume, steps, stop_at } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let opts = TrainOptions {
                single_range: single_range.map(|r| match r {
                    RangeArg::Micro => RangeId::Micro,
                    RangeArg::Short => RangeId::Short,
                }),
                resume,
                stop_at,
            };
            let o = commands::train(&cfg, &dataset, &opts, out)?;
            let first = o.curve.first().map_or(o.state.step, |r| r.step);
            println!(
                "train: steps {first} -> {}, training-set L_total {:.6} -> {:.6}",
                o.state.step, o.before.total, o.after.total
            );
        }
        Command::Eval { dataset, checkpoints, baselines, accum, loss } => {
            let opts = EvalOptions {
                checkpoints,
                baselines,
                accumulation: accum,
                losses: loss,
            };
            let o = commands::eval(&cfg, &dataset, &opts, out)?;
            for report in [&o.report, &o.loss_ablation].into_iter().flatten() {
                for id in [RangeId::Micro, RangeId::Short] {
                    println!("[{}]\n{}", id.name(), report.to_table(id));
                }
            }
            if let Some(rows) = &o.accumulation {
                print!("{}", mrbev::evalharness::accumulation_csv(rows));
            }
        }
        Command::Plan { maps, dataset, sample, checkpoint, start, goal } => {
            let opts = PlanOptions {
                maps,
                dataset,
                sample,
                checkpoint,
                start: fixed::<3>(start, "--start")?,
                goal: fixed::<2>(goal, "--goal")?,
            };
            let plans = commands::plan_cmd(&cfg, &opts, out)?;
            print!("{}", commands::plan_summary_csv(&plans));
        }
        Command::Export { map, layers, format } => {
            let format = match format {
                FormatArg::Pgm => ExportFormat::Pgm,
                FormatArg::Csv => ExportFormat::Csv,
                FormatArg::Both => ExportFormat::Both,
            };
            for p in commands::export(&map, &layers, format, out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
