//! Module ablation (baseline, reconstruction, span losses, filtering) and the
//! filtering-strategy comparison, written as CSV.
//!
//! cargo run --release --example ablation -- [seeds, e.g. 0,1,2]

use asr::harness::experiments::{ablation_csv, DEFAULT_EVAL_EPISODES};
use asr::harness::{ablate, TrainConfig};

fn main() -> asr::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|x| x.trim().parse().expect("seed must be an integer")).collect())
        .unwrap_or_else(|| vec![0]);
    let rows = ablate(&TrainConfig::default(), &seeds, DEFAULT_EVAL_EPISODES)?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}
