//! Trains one model, saves and reloads the checkpoint, and evaluates it on
//! the novel split.
//!
//! cargo run --release --example train_and_evaluate -- [mode] [steps]

use asr::episodes::{make_dataset, Split};
use asr::harness::{evaluate, load_trained, save_trained, train, Mode, TrainConfig};

fn main() -> asr::Result<()> {
    let mut args = std::env::args().skip(1);
    let mode: Mode = args.next().map(|m| m.parse()).transpose()?.unwrap_or_default();
    let steps = args.next().map(|s| s.parse().expect("steps must be an integer")).unwrap_or(2000);
    let cfg = TrainConfig { mode, steps, ..Default::default() };
    let dataset = make_dataset(&cfg.dataset())?;

    let out = train(&cfg, &dataset)?;
    let n = (out.loss_log.len() / 10).max(1);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    println!(
        "{mode}: {steps} steps, loss first 10% {:.4}, last 10% {:.4}",
        mean(&out.loss_log[..n]),
        mean(&out.loss_log[out.loss_log.len() - n..])
    );

    let dir = std::env::temp_dir().join("asr-example");
    let path = dir.join(format!("{mode}.json"));
    save_trained(&path, &cfg, &out)?;
    let reloaded = load_trained(&path, &cfg)?;
    assert_eq!(reloaded.params, out.params);

    for split in [Split::Base, Split::Novel] {
        let r = evaluate(&cfg, &reloaded.params, &reloaded.loss_log, &dataset, split, 200, cfg.seed)?;
        println!("{split}: mIoU {:.4}, FB-IoU {:.4}, per class {:.3?}", r.miou, r.fb_iou, r.per_class_iou);
    }
    Ok(())
}
