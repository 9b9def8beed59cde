//! Forward pass of one episode for every mode, plus the training objective.
//!
//! A channel group can die during training (all-zero sub-vector after the
//! relu). The pipeline uses the tolerant basis and contrastive variants so a
//! dead group drops out instead of aborting the run.

use crate::autodiff::{Graph, Var, DIV_EPS};
use crate::encoder::{encode, mask_features, GroupedFeatureMap, ModelVars};
use crate::error::Result;
use crate::filtering::{decode, fuse, FilterStrategy};
use crate::losses::{contrastive_loss_tolerant, decoupling_loss, segmentation_loss, total_loss};
use crate::reconstruction::{kshot_aggregate, reconstruct_query, reconstruct_support_tolerant, BasisMode, ClassVector};
use crate::semantics::{basis_set_tolerant, semantic_vector, support_weights, BasisSet, SemanticVector};
use crate::tensor::Tensor;

use super::config::TrainConfig;

/// Support-side quantities shared by every query pixel.
#[derive(Debug, Clone)]
pub struct SupportBranch {
    /// Masked-GAP semantic vector of every shot.
    pub shots: Vec<SemanticVector>,
    pub class_vector: ClassVector,
    pub basis: Option<BasisSet>,
}

pub fn encode_supports(
    g: &mut Graph,
    model: &ModelVars,
    supports: &[(Tensor, Tensor)],
) -> Result<Vec<SemanticVector>> {
    supports
        .iter()
        .map(|(image, mask)| {
            let f = encode(g, image, &model.encoder)?;
            let masked = mask_features(g, f, mask)?;
            semantic_vector(g, masked)
        })
        .collect()
}

fn mean_semantic(g: &mut Graph, shots: &[SemanticVector]) -> Result<SemanticVector> {
    let mut acc = shots[0].values;
    for s in &shots[1..] {
        acc = g.add(acc, s.values)?;
    }
    if shots.len() > 1 {
        acc = g.scale(acc, 1.0 / shots.len() as f64)?;
    }
    SemanticVector::new(g, acc, shots[0].groups, shots[0].group_dim)
}

pub fn support_branch(g: &mut Graph, cfg: &TrainConfig, shots: Vec<SemanticVector>) -> Result<SupportBranch> {
    if !cfg.mode.uses_reconstruction() {
        let mean = mean_semantic(g, &shots)?;
        let class_vector = ClassVector::new(g, mean.values)?;
        return Ok(SupportBranch { shots, class_vector, basis: None });
    }
    let per_shot = shots.iter().map(|&v| reconstruct_support_tolerant(g, v)).collect::<Result<Vec<_>>>()?;
    let class_vector = kshot_aggregate(g, &per_shot)?;
    let basis = match cfg.basis_mode {
        BasisMode::SelfBasis => None,
        BasisMode::Support => {
            let mean = mean_semantic(g, &shots)?;
            Some(basis_set_tolerant(g, mean)?)
        }
    };
    Ok(SupportBranch { shots, class_vector, basis })
}

/// Two-channel logits at image resolution.
pub fn segment(
    g: &mut Graph,
    cfg: &TrainConfig,
    model: &ModelVars,
    query: GroupedFeatureMap,
    support: &SupportBranch,
) -> Result<Var> {
    let features = if cfg.mode.uses_reconstruction() {
        reconstruct_query(g, query, cfg.basis_mode, support.basis)?
    } else {
        query
    };
    let fusion = cfg.fusion();
    let fused = if support.class_vector.norm(g) < DIV_EPS && matches!(fusion, FilterStrategy::Projection | FilterStrategy::Cosine) {
        // Every support group is dead: no direction to filter by, so no evidence.
        let (h, w) = (features.height, features.width);
        let channels = fusion.fused_channels(features.group_dim);
        let zeros = g.constant(Tensor::zeros(&[h, w, channels]));
        GroupedFeatureMap::new(g, zeros, 1, channels)?
    } else {
        fuse(g, fusion, features, support.class_vector)?
    };
    decode(g, fused, &model.decoder)
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeLoss {
    pub total: Var,
    pub seg: Var,
    pub dec: Option<Var>,
    pub con: Option<Var>,
}

fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    if terms.len() > 1 {
        acc = g.scale(acc, 1.0 / terms.len() as f64)?;
    }
    Ok(acc)
}

/// Training objective for one base-class episode at `step`. `class_index`
/// is the channel group owned by the episode's class.
#[allow(clippy::too_many_arguments)]
pub fn episode_loss(
    g: &mut Graph,
    cfg: &TrainConfig,
    model: &ModelVars,
    supports: &[(Tensor, Tensor)],
    query_image: &Tensor,
    query_mask: &Tensor,
    class_index: usize,
    step: usize,
) -> Result<EpisodeLoss> {
    let shots = encode_supports(g, model, supports)?;
    let branch = support_branch(g, cfg, shots)?;
    let query = encode(g, query_image, &model.encoder)?;
    let logits = segment(g, cfg, model, query, &branch)?;
    let seg = segmentation_loss(g, logits, query_mask)?;
    let weights = cfg.loss_weights();

    let (mut dec, mut con) = (None, None);
    if cfg.mode.uses_span_losses() {
        let terms = branch
            .shots
            .iter()
            .map(|&v| {
                let w = support_weights(g, v)?;
                decoupling_loss(g, w, class_index)
            })
            .collect::<Result<Vec<_>>>()?;
        dec = Some(mean_of(g, &terms)?);
        if weights.contrastive_active(step) {
            let v_q = semantic_vector(g, query)?;
            let terms =
                branch.shots.iter().map(|&v_s| contrastive_loss_tolerant(g, v_s, v_q)).collect::<Result<Vec<_>>>()?;
            con = Some(mean_of(g, &terms)?);
        }
    }
    let total = total_loss(g, dec, seg, con, &weights, step)?;
    Ok(EpisodeLoss { total, seg, dec, con })
}
