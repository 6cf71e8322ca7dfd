//! `extremeseg` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use extremeseg::geodesic::build_seed_map;
use extremeseg::learner::save_checkpoint;
use extremeseg::phantom::{dataset, write_dataset, PhantomParams};
use extremeseg::pipeline::{run, write_round_log, Case, CroppedCase, PipelineConfig};
use extremeseg::points::{simulate_extreme_points, PointsFile};
use extremeseg::volume::{
    load_mask, load_volume, resample_isotropic, save_labels, save_mask, save_probability, save_volume,
};

#[derive(Parser, Debug)]
#[command(name = "extremeseg", version, about = "Weakly supervised 3D segmentation from six extreme-point clicks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Derive six extreme-point clicks from a ground-truth mask.
    SimulatePoints {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        jitter_mm: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the full self-training loop on one volume.
    Segment {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        points: PathBuf,
        /// JSON file with pipeline settings; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth mask, only used for the Dice column of the round log.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Seed for the learner's weight initialization.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        max_rounds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Also write the round-0 seed map (0 unlabeled, 1 foreground, 2 background) on the crop.
        #[arg(long)]
        dump_seeds: bool,
    },
    /// Write synthetic ellipsoid phantoms with ground truth.
    Phantom {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Serve the annotation API over a data directory.
    Serve {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Resample a volume to isotropic spacing.
    Resample {
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        target_mm: f64,
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Data(String),
    Numerical(String),
}

impl From<extremeseg::Error> for Failure {
    fn from(e: extremeseg::Error) -> Self {
        if e.is_numerical() {
            Failure::Numerical(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

type Outcome = Result<(), Failure>;

fn data_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig, Failure> {
    let Some(path) = path else {
        return Ok(PipelineConfig::default());
    };
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| data_err(path, e))
}

fn simulate_points(gt: &Path, out: &Path, jitter_mm: f64, seed: u64) -> Outcome {
    let mask = load_mask(gt)?;
    let points = simulate_extreme_points(&mask, jitter_mm, seed)?;
    let text = serde_json::to_string_pretty(&PointsFile { points }).expect("points serialize");
    fs::write(out, text + "\n").map_err(|e| data_err(out, e))
}

struct SegmentArgs {
    volume: PathBuf,
    points: PathBuf,
    config: Option<PathBuf>,
    out: PathBuf,
    gt: Option<PathBuf>,
    seed: Option<u64>,
    max_rounds: Option<usize>,
    epochs: Option<usize>,
    dump_seeds: bool,
}

fn segment(a: SegmentArgs) -> Outcome {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(seed) = a.seed {
        cfg.train.rng_seed = seed;
    }
    if let Some(n) = a.max_rounds {
        cfg.max_rounds = n;
    }
    if let Some(n) = a.epochs {
        cfg.train.epochs = n;
    }
    cfg.validate()?;

    let volume = load_volume(&a.volume)?;
    let text = fs::read_to_string(&a.points).map_err(|e| data_err(&a.points, e))?;
    let PointsFile { points } = serde_json::from_str(&text).map_err(|e| data_err(&a.points, e))?;
    let gt = a.gt.as_deref().map(load_mask).transpose()?;
    fs::create_dir_all(&a.out).map_err(|e| data_err(&a.out, e))?;

    if a.dump_seeds {
        let crop = CroppedCase::new(&volume, &points, &cfg)?;
        let seeds = build_seed_map(&crop.volume, &crop.points, &cfg.seeds())?;
        save_labels(seeds.geometry(), &seeds.to_codes(), &a.out.join("seeds"))?;
    }

    let case = Case { volume, points, gt };
    let out = run(std::slice::from_ref(&case), &cfg)?;
    save_mask(&out.masks[0], &a.out.join("mask"))?;
    save_probability(&out.probabilities[0], &a.out.join("probability"))?;
    write_round_log(&out.rounds, &a.out.join("rounds.jsonl"))?;
    if let Some(model) = &out.model {
        save_checkpoint(model, &a.out.join("model.ckpt"))?;
    }
    Ok(())
}

fn phantom(out: &Path, cases: usize, seed: u64) -> Outcome {
    let phantoms = dataset(cases, seed, &PhantomParams::default())?;
    write_dataset(out, &phantoms)?;
    Ok(())
}

fn serve(data: PathBuf, port: u16, config: Option<PathBuf>) -> Outcome {
    let cfg = load_config(config.as_deref())?;
    cfg.validate()?;
    if !data.is_dir() {
        return Err(data_err(&data, "not a directory"));
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::Data(e.to_string()))?;
    rt.block_on(extremeseg_service::serve(data, port, cfg))
        .map_err(|e| Failure::Data(format!("server: {e}")))
}

fn resample(volume: &Path, target_mm: f64, out: &Path) -> Outcome {
    let v = load_volume(volume)?;
    save_volume(&resample_isotropic(&v, target_mm)?, out)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::SimulatePoints {
            gt,
            out,
            jitter_mm,
            seed,
        } => simulate_points(&gt, &out, jitter_mm, seed),
        Command::Segment {
            volume,
            points,
            config,
            out,
            gt,
            seed,
            max_rounds,
            epochs,
            dump_seeds,
        } => segment(SegmentArgs {
            volume,
            points,
            config,
            out,
            gt,
            seed,
            max_rounds,
            epochs,
            dump_seeds,
        }),
        Command::Phantom { out, cases, seed } => phantom(&out, cases, seed),
        Command::Serve { data, port, config } => serve(data, port, config),
        Command::Resample {
            volume,
            target_mm,
            out,
        } => resample(&volume, target_mm, &out),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("numerical failure: {msg}");
            ExitCode::from(3)
        }
    }
}
