//! Novel mIoU of full ASR against the channel number D per group.
//!
//! cargo run --release --example sweep_d -- [d values] [seeds]

use asr::harness::experiments::{sweep_csv, DEFAULT_EVAL_EPISODES};
use asr::harness::{sweep_d, TrainConfig};

fn list<T: std::str::FromStr>(arg: Option<String>, default: &str) -> Vec<T> {
    arg.unwrap_or_else(|| default.into()).split(',').map(|x| x.trim().parse().ok().expect("bad list entry")).collect()
}

fn main() -> asr::Result<()> {
    let mut args = std::env::args().skip(1);
    let d: Vec<usize> = list(args.next(), "2,4,8");
    let seeds: Vec<u64> = list(args.next(), "0");
    let points = sweep_d(&TrainConfig::default(), &d, &seeds, DEFAULT_EVAL_EPISODES)?;
    for p in &points {
        println!("D={} per seed {:.4?}", p.d, p.miou);
    }
    print!("{}", sweep_csv(&points));
    Ok(())
}
