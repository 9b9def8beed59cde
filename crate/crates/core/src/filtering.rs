//! Semantic filtering (projection onto the reconstructed support vector),
//! the alternative fusion strategies, and the segmentation decoder.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, DIV_EPS};
use crate::encoder::{GroupedFeatureMap, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::params::{ConvParams, ConvVars};
use crate::reconstruction::ClassVector;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterStrategy {
    #[default]
    Projection,
    Cosine,
    Concat,
    /// Feeds the query features to the decoder unchanged.
    None,
}

impl FilterStrategy {
    pub const ALL_FUSIONS: [FilterStrategy; 3] =
        [FilterStrategy::Projection, FilterStrategy::Cosine, FilterStrategy::Concat];

    /// Channels of the fused map for `dim`-channel query features.
    pub fn fused_channels(self, dim: usize) -> usize {
        match self {
            FilterStrategy::Projection | FilterStrategy::None => dim,
            FilterStrategy::Cosine => 1,
            FilterStrategy::Concat => 2 * dim,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FilterStrategy::Projection => "projection",
            FilterStrategy::Cosine => "cosine",
            FilterStrategy::Concat => "concat",
            FilterStrategy::None => "none",
        }
    }
}

impl fmt::Display for FilterStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FilterStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(FilterStrategy::Projection),
            "cosine" => Ok(FilterStrategy::Cosine),
            "concat" => Ok(FilterStrategy::Concat),
            "none" => Ok(FilterStrategy::None),
            other => Err(Error::Config(format!("unknown filter strategy {other:?}"))),
        }
    }
}

fn unit_support(g: &mut Graph, support_vec: ClassVector) -> Result<Var> {
    if support_vec.norm(g) < DIV_EPS {
        return Err(Error::DegenerateSupportVector);
    }
    g.normalize_last(support_vec.values)
}

fn flat_pixels(g: &mut Graph, features: GroupedFeatureMap) -> Result<Var> {
    g.reshape(features.values, &[features.pixels(), features.channels()])
}

fn check_dims(features: GroupedFeatureMap, support_vec: ClassVector) -> Result<()> {
    if features.channels() != support_vec.dim {
        return Err(Error::shape(
            "fuse",
            format!("{} feature channels vs support dim {}", features.channels(), support_vec.dim),
        ));
    }
    Ok(())
}

/// Signed projection of every pixel vector onto the direction of `support_vec`.
pub fn project(g: &mut Graph, recon_query: GroupedFeatureMap, support_vec: ClassVector) -> Result<GroupedFeatureMap> {
    check_dims(recon_query, support_vec)?;
    let u = unit_support(g, support_vec)?;
    let d = support_vec.dim;
    let col = g.reshape(u, &[d, 1])?;
    let row = g.reshape(u, &[1, d])?;
    let flat = flat_pixels(g, recon_query)?;
    let coeff = g.matmul(flat, col)?;
    let proj = g.matmul(coeff, row)?;
    let out = g.reshape(proj, &[recon_query.height, recon_query.width, d])?;
    GroupedFeatureMap::new(g, out, 1, d)
}

/// Combines query features with the support vector according to `strategy`.
pub fn fuse(
    g: &mut Graph,
    strategy: FilterStrategy,
    recon_query: GroupedFeatureMap,
    support_vec: ClassVector,
) -> Result<GroupedFeatureMap> {
    check_dims(recon_query, support_vec)?;
    let (h, w, d) = (recon_query.height, recon_query.width, support_vec.dim);
    match strategy {
        FilterStrategy::Projection => project(g, recon_query, support_vec),
        FilterStrategy::None => GroupedFeatureMap::new(g, recon_query.values, 1, recon_query.channels()),
        FilterStrategy::Cosine => {
            let u = unit_support(g, support_vec)?;
            let col = g.reshape(u, &[d, 1])?;
            let flat = flat_pixels(g, recon_query)?;
            let unit_px = g.normalize_last(flat)?;
            let cos = g.matmul(unit_px, col)?;
            let out = g.reshape(cos, &[h, w, 1])?;
            GroupedFeatureMap::new(g, out, 1, 1)
        }
        FilterStrategy::Concat => {
            let ones = g.constant(Tensor::full(&[h * w, 1], 1.0));
            let row = g.reshape(support_vec.values, &[1, d])?;
            let tiled = g.matmul(ones, row)?;
            let flat = flat_pixels(g, recon_query)?;
            let cat = g.concat_last(flat, tiled)?;
            let out = g.reshape(cat, &[h, w, 2 * d])?;
            GroupedFeatureMap::new(g, out, 1, 2 * d)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
    pub head: ConvParams,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub conv1: ConvVars,
    pub conv2: ConvVars,
    pub head: ConvVars,
}

impl DecoderParams {
    pub fn layers(&self) -> [(&'static str, &ConvParams); 3] {
        [("decoder.conv1", &self.conv1), ("decoder.conv2", &self.conv2), ("decoder.head", &self.head)]
    }

    pub fn layers_mut(&mut self) -> [&mut ConvParams; 3] {
        [&mut self.conv1, &mut self.conv2, &mut self.head]
    }

    pub fn bind(&self, g: &mut Graph) -> DecoderVars {
        DecoderVars { conv1: self.conv1.bind(g), conv2: self.conv2.bind(g), head: self.head.bind(g) }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }
}

impl DecoderVars {
    pub fn layers(&self) -> [ConvVars; 3] {
        [self.conv1, self.conv2, self.head]
    }
}

/// conv3×3 + relu, conv3×3 + relu, conv1×1 to two logits, bilinear ×4.
pub fn decode(g: &mut Graph, fused: GroupedFeatureMap, params: &DecoderVars) -> Result<Var> {
    let expected = g.shape(params.conv1.kernel)[2];
    if fused.channels() != expected {
        return Err(Error::shape("decode", format!("{} channels, decoder expects {expected}", fused.channels())));
    }
    let x = params.conv1.apply(g, fused.values, 1)?;
    let x = g.relu(x)?;
    let x = params.conv2.apply(g, x, 1)?;
    let x = g.relu(x)?;
    let x = params.head.apply(g, x, 1)?;
    g.upsample_bilinear(x, DOWNSAMPLE)
}

/// Foreground wherever logit 1 strictly exceeds logit 0.
pub fn predict_mask(logits: &Tensor) -> Result<Tensor> {
    let &[h, w, 2] = logits.shape() else {
        return Err(Error::shape("predict_mask", format!("expected H×W×2, got {:?}", logits.shape())));
    };
    let data = logits.data().chunks(2).map(|p| if p[1] > p[0] { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_parts(vec![h, w], data))
}

/// Per-pixel softmax probability of the foreground channel.
pub fn foreground_probability(logits: &Tensor) -> Vec<f64> {
    logits.data().chunks(2).map(|p| 1.0 / (1.0 + (p[0] - p[1]).exp())).collect()
}
