use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use asr::analysis::{verify_identity, IdentityCheck};
use asr::episodes::export::export_dataset;
use asr::episodes::{make_dataset, Split};
use asr::harness::experiments::{ablation_csv, sweep_csv, DEFAULT_EVAL_EPISODES};
use asr::harness::{ablate, evaluate, load_trained, save_trained, sweep_d, train, Report, TrainConfig};
use asr::Error;

#[derive(Parser)]
#[command(name = "asr", about = "Anti-aliasing semantic reconstruction on a synthetic few-shot benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Export episodes as PPM/PGM files plus index.json.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Episodes per split.
        #[arg(long, default_value_t = 10)]
        episodes: usize,
    },
    /// Train on base-class episodes and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint and write a JSON report.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "novel")]
        split: String,
        #[arg(long, default_value_t = DEFAULT_EVAL_EPISODES)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Module and filtering-strategy ablation as CSV.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = DEFAULT_EVAL_EPISODES)]
        episodes: usize,
    },
    /// Novel mIoU against the channel number D as CSV.
    SweepD {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        d: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = DEFAULT_EVAL_EPISODES)]
        episodes: usize,
    },
    /// Check the two-class cosine identity or summarise a report.
    Analyze {
        #[arg(long, conflicts_with = "report", required_unless_present = "report")]
        verify_identity: Option<usize>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
}

fn write(path: &Path, contents: &str) -> asr::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, contents)?;
    Ok(())
}

fn seeds_or(seeds: Vec<u64>, cfg: &TrainConfig) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds
    }
}

fn run(cli: Cli) -> asr::Result<()> {
    match cli.command {
        Command::GenData { config, out, episodes } => {
            let cfg = TrainConfig::load(&config)?;
            let dataset = make_dataset(&cfg.dataset())?;
            export_dataset(&dataset, cfg.k_shot, episodes, &out)?;
            println!("wrote {} episodes per split to {}", episodes, out.display());
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let dataset = make_dataset(&cfg.dataset())?;
            let trained = train(&cfg, &dataset)?;
            save_trained(&out, &cfg, &trained)?;
            let last = trained.loss_log.last().copied().unwrap_or(f64::NAN);
            println!("trained {} steps, final loss {last:.4}, checkpoint {}", cfg.steps, out.display());
        }
        Command::Eval { config, ckpt, split, episodes, out } => {
            let cfg = TrainConfig::load(&config)?;
            let split: Split = split.parse()?;
            let dataset = make_dataset(&cfg.dataset())?;
            let trained = load_trained(&ckpt, &cfg)?;
            let report = evaluate(&cfg, &trained.params, &trained.loss_log, &dataset, split, episodes, cfg.seed)?;
            write(&out, &serde_json::to_string_pretty(&report)?)?;
            println!("{split} mIoU {:.4}, FB-IoU {:.4}", report.miou, report.fb_iou);
        }
        Command::Ablate { config, out, seeds, episodes } => {
            let cfg = TrainConfig::load(&config)?;
            let rows = ablate(&cfg, &seeds_or(seeds, &cfg), episodes)?;
            let csv = ablation_csv(&rows);
            write(&out, &csv)?;
            print!("{csv}");
        }
        Command::SweepD { config, d, out, seeds, episodes } => {
            let cfg = TrainConfig::load(&config)?;
            let points = sweep_d(&cfg, &d, &seeds_or(seeds, &cfg), episodes)?;
            let csv = sweep_csv(&points);
            write(&out, &csv)?;
            print!("{csv}");
        }
        Command::Analyze { verify_identity: Some(n), .. } => {
            let check = verify_identity(n, 0)?;
            let at = IdentityCheck::at(0.5, 0.5, std::f64::consts::FRAC_PI_2);
            println!("samples {}", check.samples);
            println!("max |inner product - identity| {:.3e}", check.max_abs_error);
            println!("max |normalized cosine - identity| {:.6}", check.max_normalized_gap);
            println!("normalized gap at (0.5, 0.5, 90 deg) {:.6}", at.max_normalized_gap);
        }
        Command::Analyze { report: Some(path), .. } => {
            let report: Report = serde_json::from_str(&fs::read_to_string(&path)?)?;
            println!("mode {} filter {} k_shot {}", report.config.mode, report.config.filter_strategy, report.config.k_shot);
            println!("mIoU {:.4}  FB-IoU {:.4}", report.miou, report.fb_iou);
            for (class, iou) in &report.per_class_iou {
                println!("  class {class:>2}  IoU {iou:.4}");
            }
            println!("mean off-diagonal |cos| {:.4}", report.mean_offdiag_cos);
            for (class, h) in &report.sparsity_entropy {
                println!("  class {class:>2}  weight entropy {h:.4} nats");
            }
            for (class, row) in report.confusion.iter().enumerate() {
                let total: u64 = row.iter().sum();
                if total > 0 {
                    let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
                    println!("  confusion {class:>2}: {}", cells.join(" "));
                }
            }
        }
        Command::Analyze { .. } => unreachable!("clap requires one of the analyze options"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::NonFiniteLoss { .. } => 3,
                _ => 1,
            })
        }
    }
}
