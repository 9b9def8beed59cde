//! Linear reconstruction of support vectors and query features from basis
//! vectors, plus K-shot averaging.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::GroupedFeatureMap;
use crate::error::{Error, Result};
use crate::semantics::{basis_set, basis_set_tolerant, query_weight_map, support_weights, BasisSet, SemanticVector};

/// Dim-D vector in the class-level semantic space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassVector {
    pub values: Var,
    pub dim: usize,
}

impl ClassVector {
    pub fn new(g: &Graph, values: Var) -> Result<Self> {
        match *g.shape(values) {
            [dim] if dim > 0 => Ok(ClassVector { values, dim }),
            _ => Err(Error::shape("class vector", format!("{:?}", g.shape(values)))),
        }
    }

    pub fn norm(&self, g: &Graph) -> f64 {
        g.value(self.values).data().iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Which unit vectors stand in for `v_b` when reconstructing query pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisMode {
    /// The pixel's own normalised group-b sub-vector.
    #[default]
    #[serde(rename = "self")]
    SelfBasis,
    /// The episode's support-derived basis.
    Support,
}

/// `v̂ = Σ_b w_b · v_b` with `w = softmax(‖v_b‖)` and `v_b` the unit sub-vectors.
pub fn reconstruct_support(g: &mut Graph, v: SemanticVector) -> Result<ClassVector> {
    let basis = basis_set(g, v)?;
    reconstruct_with_basis(g, v, basis)
}

/// [`reconstruct_support`] with dead groups contributing nothing.
pub fn reconstruct_support_tolerant(g: &mut Graph, v: SemanticVector) -> Result<ClassVector> {
    let basis = basis_set_tolerant(g, v)?;
    reconstruct_with_basis(g, v, basis)
}

/// Same as [`reconstruct_support`] with an already-built basis.
pub fn reconstruct_with_basis(g: &mut Graph, v: SemanticVector, basis: BasisSet) -> Result<ClassVector> {
    let w = support_weights(g, v)?;
    let row = g.reshape(w.values, &[1, v.groups])?;
    let out = g.matmul(row, basis.values)?;
    let out = g.reshape(out, &[v.group_dim])?;
    ClassVector::new(g, out)
}

/// Per pixel `Σ_b ‖F_b(x,y)‖ · v_b`. In self mode `v_b` is the pixel's own
/// unit sub-vector, which collapses to the groupwise sum `Σ_b F_b(x,y)`;
/// zero sub-vectors contribute zero.
pub fn reconstruct_query(
    g: &mut Graph,
    features: GroupedFeatureMap,
    mode: BasisMode,
    support_basis: Option<BasisSet>,
) -> Result<GroupedFeatureMap> {
    let GroupedFeatureMap { height, width, groups, group_dim, .. } = features;
    let out = match mode {
        BasisMode::SelfBasis => {
            let split = g.reshape(features.values, &[height * width, groups, group_dim])?;
            g.reduce(crate::autodiff::ReduceOp::Sum, split, &[1])?
        }
        BasisMode::Support => {
            let basis = support_basis
                .ok_or_else(|| Error::Invalid("support basis mode requires a support basis".into()))?;
            if basis.groups != groups || basis.dim != group_dim {
                return Err(Error::shape(
                    "reconstruct_query",
                    format!("basis {}×{} vs features {groups}×{group_dim}", basis.groups, basis.dim),
                ));
            }
            let weights = query_weight_map(g, features)?;
            let flat = g.reshape(weights.values, &[height * width, groups])?;
            g.matmul(flat, basis.values)?
        }
    };
    let out = g.reshape(out, &[height, width, group_dim])?;
    GroupedFeatureMap::new(g, out, 1, group_dim)
}

/// Arithmetic mean of per-shot class vectors.
pub fn kshot_aggregate(g: &mut Graph, vectors: &[ClassVector]) -> Result<ClassVector> {
    let (first, rest) = vectors
        .split_first()
        .ok_or_else(|| Error::Invalid("K-shot aggregation of an empty list".into()))?;
    let mut acc = first.values;
    for v in rest {
        if v.dim != first.dim {
            return Err(Error::shape("kshot_aggregate", format!("dims {} vs {}", first.dim, v.dim)));
        }
        acc = g.add(acc, v.values)?;
    }
    let mean = if rest.is_empty() { acc } else { g.scale(acc, 1.0 / vectors.len() as f64)? };
    ClassVector::new(g, mean)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn sv(g: &mut Graph, data: &[f64], groups: usize, dim: usize) -> SemanticVector {
        let v = g.constant(Tensor::vector(data).unwrap());
        SemanticVector::new(g, v, groups, dim).unwrap()
    }

    fn cv(g: &mut Graph, data: &[f64]) -> ClassVector {
        let v = g.constant(Tensor::vector(data).unwrap());
        ClassVector::new(g, v).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn support_reconstruction_examples() {
        let mut g = Graph::new();
        let v = sv(&mut g, &[3.0, 4.0], 1, 2);
        let r = reconstruct_support(&mut g, v).unwrap();
        assert!(close(g.value(r.values).data(), &[0.6, 0.8], 1e-15));

        let v = sv(&mut g, &[2.0, 0.0, 0.0, 2.0], 2, 2);
        let r = reconstruct_support(&mut g, v).unwrap();
        assert!(close(g.value(r.values).data(), &[0.5, 0.5], 1e-15));
        assert!((r.norm(&g) - 0.5f64.sqrt()).abs() < 1e-15);

        let n = 1.3;
        let v = sv(&mut g, &[n, 0.0, 0.0, n + 3f64.ln()], 2, 2);
        let r = reconstruct_support(&mut g, v).unwrap();
        assert!(close(g.value(r.values).data(), &[0.25, 0.75], 1e-12));
    }

    #[test]
    fn support_reconstruction_propagates_degenerate() {
        let mut g = Graph::new();
        let v = sv(&mut g, &[0.0, 0.0, 1.0, 1.0], 2, 2);
        assert_eq!(reconstruct_support(&mut g, v), Err(Error::DegenerateSubvector(0)));
    }

    fn pixel_map(g: &mut Graph, px: &[f64], groups: usize, dim: usize) -> GroupedFeatureMap {
        let v = g.constant(Tensor::new(vec![1, 1, px.len()], px.to_vec()).unwrap());
        GroupedFeatureMap::new(g, v, groups, dim).unwrap()
    }

    #[test]
    fn query_reconstruction_examples() {
        let mut g = Graph::new();
        let f = pixel_map(&mut g, &[1.0, 0.0, 0.0, 2.0], 2, 2);
        let r = reconstruct_query(&mut g, f, BasisMode::SelfBasis, None).unwrap();
        assert_eq!(g.value(r.values).data(), &[1.0, 2.0]);
        assert_eq!((r.groups, r.group_dim), (1, 2));

        let f = pixel_map(&mut g, &[0.0, 0.0, -0.3, 0.9, 0.0, 0.0], 3, 2);
        let r = reconstruct_query(&mut g, f, BasisMode::SelfBasis, None).unwrap();
        assert_eq!(g.value(r.values).data(), &[-0.3, 0.9]);

        // Support mode: pixel norms (1, 2) with bases {e₂, e₁}.
        let f = pixel_map(&mut g, &[1.0, 0.0, 0.0, 2.0], 2, 2);
        let support = sv(&mut g, &[0.0, 5.0, 3.0, 0.0], 2, 2);
        let basis = basis_set(&mut g, support).unwrap();
        let r = reconstruct_query(&mut g, f, BasisMode::Support, Some(basis)).unwrap();
        assert!(close(g.value(r.values).data(), &[2.0, 1.0], 1e-15));

        assert!(reconstruct_query(&mut g, f, BasisMode::Support, None).is_err());
    }

    #[test]
    fn kshot_examples() {
        let mut g = Graph::new();
        let a = cv(&mut g, &[1.0, 0.0]);
        let b = cv(&mut g, &[0.0, 1.0]);
        let one = kshot_aggregate(&mut g, &[a]).unwrap();
        assert_eq!(g.value(one.values).data(), &[1.0, 0.0]);
        let twice = kshot_aggregate(&mut g, &[b, b]).unwrap();
        assert_eq!(g.value(twice.values).data(), &[0.0, 1.0]);
        let mean = kshot_aggregate(&mut g, &[a, b]).unwrap();
        assert_eq!(g.value(mean.values).data(), &[0.5, 0.5]);
        assert!(kshot_aggregate(&mut g, &[]).is_err());
        let c = cv(&mut g, &[1.0, 2.0, 3.0]);
        assert!(kshot_aggregate(&mut g, &[a, c]).is_err());
    }

    #[test]
    fn basis_mode_serde_names() {
        assert_eq!(serde_json::to_string(&BasisMode::SelfBasis).unwrap(), "\"self\"");
        assert_eq!(serde_json::from_str::<BasisMode>("\"support\"").unwrap(), BasisMode::Support);
    }
}
