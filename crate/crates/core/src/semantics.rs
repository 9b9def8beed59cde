//! Semantic vectors, reconstruction weights and basis vectors.
//!
//! Support weights are the softmax of sub-vector norms; query weights are the
//! raw per-pixel group norms. The asymmetry is intentional.

use crate::autodiff::{Graph, Var, DIV_EPS};
use crate::encoder::GroupedFeatureMap;
use crate::error::{Error, Result};

/// Length-(B·D) pooled vector; sub-vector `b` is `values[b·D..(b+1)·D]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SemanticVector {
    pub values: Var,
    pub groups: usize,
    pub group_dim: usize,
}

impl SemanticVector {
    pub fn new(g: &Graph, values: Var, groups: usize, group_dim: usize) -> Result<Self> {
        if groups == 0 || group_dim == 0 || g.shape(values) != [groups * group_dim] {
            return Err(Error::shape(
                "semantic vector",
                format!("{:?} is not a vector of {groups}×{group_dim}", g.shape(values)),
            ));
        }
        Ok(SemanticVector { values, groups, group_dim })
    }

    /// B×D view of the sub-vectors.
    pub fn sub_vectors(&self, g: &mut Graph) -> Result<Var> {
        g.reshape(self.values, &[self.groups, self.group_dim])
    }

    pub fn sub_vector<'g>(&self, g: &'g Graph, b: usize) -> &'g [f64] {
        &g.value(self.values).data()[b * self.group_dim..(b + 1) * self.group_dim]
    }

    pub fn sub_vector_norms(&self, g: &Graph) -> Vec<f64> {
        (0..self.groups)
            .map(|b| self.sub_vector(g, b).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect()
    }
}

/// Softmax of sub-vector norms; length B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupportWeights {
    pub values: Var,
    pub groups: usize,
}

/// H×W×B map of per-pixel group norms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QueryWeightMap {
    pub values: Var,
    pub height: usize,
    pub width: usize,
    pub groups: usize,
}

/// B unit vectors of dimension D stored as a B×D matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisSet {
    pub values: Var,
    pub groups: usize,
    pub dim: usize,
}

impl BasisSet {
    pub fn vector<'g>(&self, g: &'g Graph, b: usize) -> &'g [f64] {
        &g.value(self.values).data()[b * self.dim..(b + 1) * self.dim]
    }
}

/// Spatial mean of every channel.
pub fn semantic_vector(g: &mut Graph, features: GroupedFeatureMap) -> Result<SemanticVector> {
    let v = g.gap(features.values)?;
    SemanticVector::new(g, v, features.groups, features.group_dim)
}

pub fn support_weights(g: &mut Graph, v: SemanticVector) -> Result<SupportWeights> {
    let subs = v.sub_vectors(g)?;
    let norms = g.norm_last(subs)?;
    let w = g.softmax(norms)?;
    Ok(SupportWeights { values: w, groups: v.groups })
}

pub fn query_weight_map(g: &mut Graph, features: GroupedFeatureMap) -> Result<QueryWeightMap> {
    let GroupedFeatureMap { height, width, groups, group_dim, .. } = features;
    let split = g.reshape(features.values, &[height, width, groups, group_dim])?;
    let w = g.norm_last(split)?;
    Ok(QueryWeightMap { values: w, height, width, groups })
}

/// Unit-normalised sub-vectors. A sub-vector with norm below 1e-12 has no
/// direction and is reported as [`Error::DegenerateSubvector`].
pub fn basis_set(g: &mut Graph, v: SemanticVector) -> Result<BasisSet> {
    if let Some(b) = v.sub_vector_norms(g).iter().position(|&n| n < DIV_EPS) {
        return Err(Error::DegenerateSubvector(b));
    }
    basis_set_tolerant(g, v)
}

/// Like [`basis_set`] but a dead group yields a zero vector instead of an
/// error, so it drops out of every reconstruction.
pub fn basis_set_tolerant(g: &mut Graph, v: SemanticVector) -> Result<BasisSet> {
    let subs = v.sub_vectors(g)?;
    let unit = g.normalize_last(subs)?;
    Ok(BasisSet { values: unit, groups: v.groups, dim: v.group_dim })
}
