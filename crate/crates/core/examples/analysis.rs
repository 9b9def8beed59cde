//! Interpretability diagnostics: the two-class cosine identity, then
//! orthogonality, weight sparsity and the confusion matrix of a short
//! training run.
//!
//! cargo run --release --example analysis -- [steps]

use std::f64::consts::PI;

use asr::analysis::{verify_identity, IdentityCheck};
use asr::episodes::{make_dataset, Split};
use asr::harness::{evaluate, train, TrainConfig};

fn main() -> asr::Result<()> {
    let check = verify_identity(10_000, 0)?;
    println!(
        "identity: max |inner - closed form| {:.2e}, max |cosine - closed form| {:.4}",
        check.max_abs_error, check.max_normalized_gap
    );
    for deg in [0.0, 45.0, 90.0, 135.0] {
        let at = IdentityCheck::at(0.5, 0.5, deg * PI / 180.0);
        println!("  w11 = w21 = 0.5, theta {deg:>5} deg: normalized gap {:.4}", at.max_normalized_gap);
    }

    let steps = std::env::args().nth(1).map(|s| s.parse().expect("steps must be an integer")).unwrap_or(2000);
    let cfg = TrainConfig { steps, ..Default::default() };
    let dataset = make_dataset(&cfg.dataset())?;
    let out = train(&cfg, &dataset)?;
    let r = evaluate(&cfg, &out.params, &out.loss_log, &dataset, Split::Novel, 200, cfg.seed)?;
    println!("mean off-diagonal |cos| of base-class sub-vectors {:.4}", r.mean_offdiag_cos);
    println!("weight entropy per novel class (max ln B = {:.3}): {:.3?}", (cfg.b as f64).ln(), r.sparsity_entropy);
    println!("confusion (rows: true class, columns: predicted class, last = background)");
    for (c, row) in r.confusion.iter().enumerate() {
        if row.iter().any(|&n| n > 0) {
            println!("  {c:>2}: {row:?}");
        }
    }
    Ok(())
}
