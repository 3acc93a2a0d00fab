use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use gazeguide::harness::{self, DataConfig, EpochRecord, TrainConfig};
use gazeguide::synth::{generate_dataset, read_dataset, write_dataset, Split};

#[derive(Parser)]
#[command(name = "gazeguide", version, about = "Gaze-guided detection transformer training on synthetic cytology scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (images, gaze traces, annotations, splits).
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compute and cache gaze-only boxes for a dataset.
    GazeBoxes {
        #[arg(long)]
        data: PathBuf,
        /// Training config whose gaze parameters to use.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one model.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint directory on a split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Dataset to use instead of the one the checkpoint was trained on.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train baseline, +GGW, +GGR and +GGW+GGR for every seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tabulate finished runs and merge their PR curves.
    Report {
        #[arg(long)]
        runs: PathBuf,
    },
}

fn epoch_line(e: &EpochRecord) -> String {
    let val = e
        .val
        .as_ref()
        .map(|r| {
            format!(
                " | val AP {:.3} AR {:.3} fp {:.3}",
                r.ap_range.unwrap_or(f64::NAN),
                r.ar.unwrap_or(f64::NAN),
                r.confounder_fp_rate.unwrap_or(f64::NAN)
            )
        })
        .unwrap_or_default();
    format!(
        "epoch {:>3} {:?} lr {:.2e} loss {:.4} (cls {:.3} l1 {:.3} giou {:.3} gq {:.3}) {:.1}s{val}",
        e.epoch, e.phase, e.lr, e.loss.total, e.loss.class, e.loss.l1, e.loss.giou, e.loss.gaze_query, e.wall_clock_s
    )
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = match config {
                Some(p) => DataConfig::from_file(&p)?,
                None => DataConfig::default(),
            };
            let spec = cfg.scene_spec();
            let gaze = cfg.gaze_sim();
            let scenes = generate_dataset(&spec, &gaze, cfg.n_scenes)?;
            write_dataset(&scenes, &spec, &gaze, &out)?;
            eprintln!("wrote {} scenes to {}", scenes.len(), out.display());
        }
        Command::GazeBoxes { data, config } => {
            let params = match config {
                Some(p) => TrainConfig::from_file(&p)?.gaze(),
                None => TrainConfig::default().gaze(),
            };
            let dataset = read_dataset(&data)?;
            let boxes = harness::gaze_only_boxes(&dataset, &params)?;
            let total: usize = boxes.values().map(Vec::len).sum();
            eprintln!(
                "{total} gaze-only boxes over {} scenes cached in {}",
                boxes.len(),
                data.join(harness::GAZE_CACHE_FILE).display()
            );
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let outcome = harness::train(&cfg, &out, &mut |e| eprintln!("{}", epoch_line(e)))?;
            if let Some(r) = outcome.record.epochs.last().and_then(|e| e.val.as_ref()) {
                print!("{}", r.to_table());
            }
        }
        Command::Eval { ckpt, split, data, json } => {
            let report = harness::evaluate(&ckpt, split, data.as_deref())?;
            print!("{}", report.to_table());
            if let Some(p) = json {
                write_text(&p, &serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Ablate { config, seeds, out } => {
            let cfg = TrainConfig::from_file(&config)?;
            let table = harness::ablate(&cfg, &seeds, &out, &mut |row, seed, e| {
                eprintln!("[{row} seed {seed}] {}", epoch_line(e))
            })?;
            print!("{}", table.to_markdown());
        }
        Command::Report { runs } => {
            let table = harness::report(&runs)?;
            print!("{}", table.to_markdown());
            eprintln!("PR curves written to {}", runs.join("pr_curves.csv").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
