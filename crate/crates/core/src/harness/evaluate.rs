//! Episodic evaluation and the JSON report.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{assign_pixels, orthogonality_matrix, sparsity_profile, ConfusionMatrix};
use crate::autodiff::Graph;
use crate::encoder::{encode, ModelParams};
use crate::episodes::{mix_seed, Dataset, Episode, IouAccumulator, Split};
use crate::error::{Error, Result};
use crate::filtering::{foreground_probability, predict_mask};
use crate::semantics::support_weights;
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::pipeline::{encode_supports, segment, support_branch};

const TAG_EVAL: u64 = 0xE7A1;
const TAG_CANDIDATE: u64 = 0xCA4D;
const TAG_ORTHO: u64 = 0x0470;
const TAG_SPARSE: u64 = 0x5BA5;

/// Supports per class used for the orthogonality and sparsity diagnostics.
pub const DIAGNOSTIC_SHOTS: usize = 8;

/// Most points kept from the training loss log.
pub const LOSS_CURVE_POINTS: usize = 500;

/// A candidate class with the support set used to test it on a query.
#[derive(Debug, Clone)]
pub struct Candidate {
    pub class_id: usize,
    pub supports: Vec<(Tensor, Tensor)>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// Binary mask for the episode's target class.
    pub mask: Tensor,
    /// Per-pixel foreground probability for every candidate class.
    pub candidate_probs: Vec<(usize, Vec<f64>)>,
}

pub trait Predictor {
    /// `candidates` contains the episode's own class with its supports.
    fn predict(&self, episode: &Episode, candidates: &[Candidate]) -> Result<Prediction>;
}

pub struct ModelPredictor<'a> {
    pub config: &'a TrainConfig,
    pub params: &'a ModelParams,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&self, episode: &Episode, candidates: &[Candidate]) -> Result<Prediction> {
        let mut g = Graph::new();
        let model = self.params.bind(&mut g);
        let query = encode(&mut g, &episode.query_image, &model.encoder)?;
        let mut mask = None;
        let mut candidate_probs = Vec::with_capacity(candidates.len());
        for c in candidates {
            let shots = encode_supports(&mut g, &model, &c.supports)?;
            let branch = support_branch(&mut g, self.config, shots)?;
            let logits = segment(&mut g, self.config, &model, query, &branch)?;
            let logits = g.value(logits);
            if c.class_id == episode.class_id {
                mask = Some(predict_mask(logits)?);
            }
            candidate_probs.push((c.class_id, foreground_probability(logits)));
        }
        let mask = mask.ok_or_else(|| Error::Invalid("target class missing from candidates".into()))?;
        Ok(Prediction { mask, candidate_probs })
    }
}

/// Answers with the ground truth.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(&self, episode: &Episode, candidates: &[Candidate]) -> Result<Prediction> {
        let labels = episode.query_labels();
        let candidate_probs = candidates
            .iter()
            .map(|c| (c.class_id, labels.iter().map(|l| if *l == Some(c.class_id) { 1.0 } else { 0.0 }).collect()))
            .collect();
        Ok(Prediction { mask: episode.query_mask.clone(), candidate_probs })
    }
}

/// Index of evaluation episode `i` under `seed`.
pub fn eval_episode_index(seed: u64, i: usize) -> u64 {
    mix_seed(&[seed, TAG_EVAL, i as u64])
}

#[derive(Debug, Clone)]
pub struct Scores {
    pub iou: IouAccumulator,
    pub confusion: ConfusionMatrix,
}

/// Runs `n_episodes` K-shot episodes of `split` through `predictor`.
pub fn score_episodes(
    predictor: &dyn Predictor,
    dataset: &Dataset,
    split: Split,
    k_shot: usize,
    n_episodes: usize,
    seed: u64,
) -> Result<Scores> {
    let mut iou = IouAccumulator::new();
    let mut confusion = ConfusionMatrix::new(dataset.specs.len());
    for i in 0..n_episodes {
        let index = eval_episode_index(seed, i);
        let episode = dataset.sample_episode(split, k_shot, index)?;
        let candidates = dataset
            .ids(split)
            .iter()
            .map(|&c| {
                let supports = if c == episode.class_id {
                    episode.supports.clone()
                } else {
                    dataset.support_set(c, k_shot, mix_seed(&[index, TAG_CANDIDATE, c as u64]))?
                };
                Ok(Candidate { class_id: c, supports })
            })
            .collect::<Result<Vec<_>>>()?;
        let prediction = predictor.predict(&episode, &candidates)?;
        iou.add(&prediction.mask, &episode.query_mask, episode.class_id)?;
        confusion.add(&episode.query_labels(), &assign_pixels(&prediction.candidate_probs))?;
    }
    Ok(Scores { iou, confusion })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Mean off-diagonal |cos| between base-class mean sub-vectors.
    pub mean_offdiag_cos: f64,
    /// Entropy (nats) of the mean support weights of every novel class.
    pub sparsity_entropy: BTreeMap<usize, f64>,
}

/// Orthogonality of the class-owned sub-vectors and sparsity of novel
/// reconstruction weights, both from dedicated support sets. Classes whose
/// own group is dead have no direction and are left out of the orthogonality.
pub fn diagnostics(cfg: &TrainConfig, params: &ModelParams, dataset: &Dataset, seed: u64) -> Result<Diagnostics> {
    let mut g = Graph::new();
    let model = params.bind(&mut g);
    let mut class_vectors = Vec::new();
    for &c in &dataset.base_ids {
        let b = dataset.base_index(c).expect("base id");
        let supports = dataset.support_set(c, DIAGNOSTIC_SHOTS, mix_seed(&[seed, TAG_ORTHO, c as u64]))?;
        let shots = encode_supports(&mut g, &model, &supports)?;
        let mut mean = vec![0.0; cfg.d];
        for v in &shots {
            mean.iter_mut().zip(v.sub_vector(&g, b)).for_each(|(m, x)| *m += x / shots.len() as f64);
        }
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm >= crate::autodiff::DIV_EPS {
            class_vectors.push((c, mean.iter().map(|x| x / norm).collect()));
        }
    }
    let mean_offdiag_cos = orthogonality_matrix(&class_vectors)?.mean_offdiag;

    let mut weights = Vec::new();
    for &c in &dataset.novel_ids {
        let supports = dataset.support_set(c, DIAGNOSTIC_SHOTS, mix_seed(&[seed, TAG_SPARSE, c as u64]))?;
        let shots = encode_supports(&mut g, &model, &supports)?;
        let per_shot = shots
            .iter()
            .map(|&v| {
                let w = support_weights(&mut g, v)?;
                Ok(g.value(w.values).data().to_vec())
            })
            .collect::<Result<Vec<_>>>()?;
        weights.push((c, per_shot));
    }
    let sparsity_entropy = sparsity_profile(&weights)?.into_iter().map(|e| (e.class_id, e.entropy)).collect();
    Ok(Diagnostics { mean_offdiag_cos, sparsity_entropy })
}

/// Chunk means of `log`, at most `max_points` long.
pub fn downsample(log: &[f64], max_points: usize) -> Vec<f64> {
    if log.len() <= max_points || max_points == 0 {
        return log.to_vec();
    }
    let chunk = log.len().div_ceil(max_points);
    log.chunks(chunk).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub per_class_iou: BTreeMap<String, f64>,
    pub miou: f64,
    pub fb_iou: f64,
    /// Foreground pixels: rows are true classes, the last column is background.
    pub confusion: Vec<Vec<u64>>,
    pub mean_offdiag_cos: f64,
    pub sparsity_entropy: BTreeMap<String, f64>,
    pub loss_curve: Vec<f64>,
    pub config: TrainConfig,
    pub wall_time_s: f64,
}

impl Report {
    /// Canonical JSON with `wall_time_s` zeroed, for byte comparisons.
    pub fn without_timing(&self) -> Report {
        Report { wall_time_s: 0.0, ..self.clone() }
    }
}

/// Evaluates a trained model on `n_episodes` episodes of `split`.
pub fn evaluate(
    cfg: &TrainConfig,
    params: &ModelParams,
    loss_log: &[f64],
    dataset: &Dataset,
    split: Split,
    n_episodes: usize,
    seed: u64,
) -> Result<Report> {
    let start = Instant::now();
    if params.config != cfg.model() {
        return Err(Error::shape("evaluate", "parameters do not match the config"));
    }
    let predictor = ModelPredictor { config: cfg, params };
    let scores = score_episodes(&predictor, dataset, split, cfg.k_shot, n_episodes, seed)?;
    let diag = diagnostics(cfg, params, dataset, seed)?;
    let iou = scores.iou.finish();
    Ok(Report {
        per_class_iou: iou.per_class.iter().map(|(c, v)| (c.to_string(), *v)).collect(),
        miou: iou.miou,
        fb_iou: iou.fb_iou,
        confusion: scores.confusion.counts,
        mean_offdiag_cos: diag.mean_offdiag_cos,
        sparsity_entropy: diag.sparsity_entropy.iter().map(|(c, v)| (c.to_string(), *v)).collect(),
        loss_curve: downsample(loss_log, LOSS_CURVE_POINTS),
        config: *cfg,
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}
