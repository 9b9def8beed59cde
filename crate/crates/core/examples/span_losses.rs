//! Decoupling and contrastive losses on aliased and orthogonal sub-vector
//! sets, and the contrastive gate in the total loss.

use asr::losses::{contrastive_loss, decoupling_loss, total_loss, LossWeights};
use asr::semantics::{support_weights, SemanticVector};
use asr::{Graph, Result, Tensor};

fn semantic(g: &mut Graph, values: Vec<f64>, groups: usize, dim: usize) -> Result<SemanticVector> {
    let v = g.constant(Tensor::new(vec![groups * dim], values)?);
    SemanticVector::new(g, v, groups, dim)
}

fn main() -> Result<()> {
    let mut g = Graph::new();
    let aliased = semantic(&mut g, vec![1.0, 0.0, 1.0, 0.0], 2, 2)?;
    let orthogonal = semantic(&mut g, vec![1.0, 0.0, 0.0, 1.0], 2, 2)?;
    let l_alias = contrastive_loss(&mut g, aliased, aliased)?;
    let l_orth = contrastive_loss(&mut g, orthogonal, orthogonal)?;
    println!("contrastive: aliased {:.6} (e), orthogonal {:.6} (1/e)", g.value(l_alias).item(), g.value(l_orth).item());

    for norms in [[0.1, 0.1, 0.1], [3.0, 0.1, 0.1], [0.1, 3.0, 0.1]] {
        let v = semantic(&mut g, norms.iter().flat_map(|&n| [n, 0.0]).collect(), 3, 2)?;
        let w = support_weights(&mut g, v)?;
        let l = decoupling_loss(&mut g, w, 0)?;
        println!("norms {norms:?} weights {:.3?} decoupling(class 0) {:.4}", g.value(w.values).data(), g.value(l).item());
    }

    let weights = LossWeights { total_steps: 100, ..LossWeights::default() };
    let (dec, seg) = (g.constant(Tensor::scalar(0.5)?), g.constant(Tensor::scalar(0.2)?));
    for step in [0, 49, 50, 99] {
        let t = total_loss(&mut g, Some(dec), seg, Some(l_alias), &weights, step)?;
        println!("step {step:>2}: total {:.4}", g.value(t).item());
    }
    Ok(())
}
