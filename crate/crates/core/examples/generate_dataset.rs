//! Builds the default benchmark, prints its class table and a few episodes,
//! and exports PPM/PGM files.
//!
//! cargo run --release --example generate_dataset -- [out_dir]

use asr::episodes::export::export_dataset;
use asr::episodes::{make_dataset, DatasetConfig, Split};

fn main() -> asr::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "target/asr-data".into());
    let dataset = make_dataset(&DatasetConfig::default())?;
    for spec in &dataset.specs {
        let split = if dataset.base_ids.contains(&spec.class_id) { "base" } else { "novel" };
        println!("class {:>2} {split:<5} {:?} {:?} rgb {:.2?}", spec.class_id, spec.shape, spec.pattern, spec.base_color);
    }
    for split in [Split::Base, Split::Novel] {
        for index in 0..3 {
            let e = dataset.sample_episode(split, 1, index)?;
            let fg = e.query_mask.data().iter().filter(|&&v| v == 1.0).count();
            println!("{split} episode {index}: class {} distractors {:?}, {fg} target pixels", e.class_id, e.distractor_ids);
        }
    }
    export_dataset(&dataset, 1, 5, std::path::Path::new(&out))?;
    println!("exported 5 episodes per split to {out}");
    Ok(())
}
