//! Command-line front end: dataset generation, training, evaluation,
//! ablation grids, and diagnostics.

use clap::{Parser, Subcommand};
use rankkd::data::dataset::{generate_dataset, load_dataset};
use rankkd::data::scene::SceneSpec;
use rankkd::detector::model::DetectorModel;
use rankkd::harness::ablate::{run_grid, GridConfig};
use rankkd::harness::config::RunConfig;
use rankkd::harness::diagnose::{diagnose, DEFAULT_HEATMAP_IMAGES};
use rankkd::harness::evalcmd::{eval_model, write_eval_artifacts};
use rankkd::harness::train::train;
use rankkd::{Error, Result};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "rankkd", about = "Detection distillation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shapes dataset.
    GenData {
        /// Scene spec as JSON; defaults apply when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a teacher or student per a run config file.
    Train {
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an ablation grid of loss combinations x seeds.
    Ablate {
        grid: PathBuf,
    },
    /// Compare a student against a teacher on a dataset.
    Diagnose {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Heatmaps are written for the first this-many images.
        #[arg(long, default_value_t = DEFAULT_HEATMAP_IMAGES)]
        heatmap_images: usize,
    },
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::GenData {
            spec,
            count,
            seed,
            out,
        } => {
            let mut scene = match spec {
                Some(path) => serde_json::from_str(&std::fs::read_to_string(&path)?)?,
                None => SceneSpec::default(),
            };
            if let Some(seed) = seed {
                scene.seed = seed;
            }
            generate_dataset(&scene, count, &out)?;
            println!("wrote {count} images to {}", out.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::parse(&std::fs::read_to_string(&config)?)?;
            let report = train(&cfg)?;
            println!(
                "final val mAP {:.4} -> {}",
                report.val.map,
                cfg.out.display()
            );
        }
        Command::Eval {
            checkpoint,
            dataset,
            out,
        } => {
            let model = DetectorModel::load(&checkpoint)?;
            let images = load_dataset(&dataset)?;
            let refs: Vec<_> = images.iter().collect();
            let (dets, report) = eval_model(&model, &refs)?;
            write_eval_artifacts(&out, &dets, &report)?;
            println!("mAP {:.4} -> {}", report.map, out.display());
        }
        Command::Ablate { grid } => {
            let grid = GridConfig::parse(&std::fs::read_to_string(&grid)?)?;
            let results = run_grid(&grid)?;
            print!("{}", results.summary_csv(&grid.cells));
        }
        Command::Diagnose {
            teacher,
            student,
            dataset,
            out,
            heatmap_images,
        } => {
            let teacher = DetectorModel::load(&teacher)?;
            let student = DetectorModel::load(&student)?;
            let images = load_dataset(&dataset)?;
            let refs: Vec<_> = images.iter().collect();
            let arts = diagnose(&teacher, &student, &refs, &out, heatmap_images)?;
            println!(
                "agreement {:.3} over {} instances, mean rank KL {:.4} -> {}",
                arts.summary.top1_agreement_rate,
                arts.summary.compared,
                arts.summary.mean_rank_kl,
                out.display()
            );
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run() {
        eprintln!("error: {e}");
        std::process::exit(match e {
            Error::Usage(_) => 2,
            _ => 1,
        });
    }
}
