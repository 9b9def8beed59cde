//! Support reconstruction, query reconstruction and projection filtering on a
//! hand-built three-group feature map where two classes alias.

use asr::encoder::{mask_features, GroupedFeatureMap};
use asr::filtering::{fuse, FilterStrategy};
use asr::reconstruction::{reconstruct_query, reconstruct_support, BasisMode};
use asr::semantics::{basis_set, semantic_vector, support_weights};
use asr::{Graph, Result, Tensor};

const B: usize = 3;
const D: usize = 2;

/// 1×4 map. Pixels 0-1 belong to class 0 (strong group 0), pixel 2 to class 1
/// (strong group 1, pointing nearly the same way), pixel 3 is background.
fn feature_row() -> Vec<f64> {
    let px = |g0: [f64; 2], g1: [f64; 2], g2: [f64; 2]| [g0, g1, g2].concat();
    [
        px([2.0, 0.2], [0.1, 0.0], [0.0, 0.1]),
        px([1.8, 0.1], [0.2, 0.1], [0.1, 0.0]),
        px([0.1, 0.0], [1.9, 0.6], [0.0, 0.1]),
        px([0.0, 0.1], [0.0, 0.1], [0.3, 0.3]),
    ]
    .concat()
}

fn main() -> Result<()> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![1, 4, B * D], feature_row())?);
    let features = GroupedFeatureMap::new(&g, x, B, D)?;

    let support_mask = Tensor::new(vec![4, 16], (0..64).map(|i| f64::from(u8::from(i % 16 < 8))).collect())?;
    let masked = mask_features(&mut g, features, &support_mask)?;
    let v = semantic_vector(&mut g, masked)?;
    println!("support sub-vector norms {:.3?}", v.sub_vector_norms(&g));
    let w = support_weights(&mut g, v)?;
    println!("reconstruction weights   {:.3?}", g.value(w.values).data());
    let basis = basis_set(&mut g, v)?;
    for b in 0..B {
        println!("basis v_{b} {:.3?}", basis.vector(&g, b));
    }
    let v_hat = reconstruct_support(&mut g, v)?;
    println!("reconstructed support vector {:.3?}", g.value(v_hat.values).data());

    let recon = reconstruct_query(&mut g, features, BasisMode::SelfBasis, None)?;
    println!("reconstructed query pixels {:.3?}", g.value(recon.values).data());
    for strategy in [FilterStrategy::Projection, FilterStrategy::Cosine] {
        let out = fuse(&mut g, strategy, recon, v_hat)?;
        println!("{strategy:<10} {:.3?}", g.value(out.values).data());
    }
    Ok(())
}
