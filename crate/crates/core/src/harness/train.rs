//! Episodic SGD training on base classes.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::encoder::{init_params, ModelParams};
use crate::episodes::{flip_horizontal, mix_seed, Dataset, Split};
use crate::error::{Error, Result};
use crate::params::{load_checkpoint, save_checkpoint};

use super::config::TrainConfig;
use super::pipeline::episode_loss;

/// Global gradient-norm ceiling applied before every update.
pub const GRAD_CLIP_NORM: f64 = 5.0;

const TAG_TRAIN: u64 = 0x7EA1;
const TAG_FLIP: u64 = 0xF11B;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub params: ModelParams,
    /// Total loss at every step.
    pub loss_log: Vec<f64>,
}

/// Checkpoint metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub config: TrainConfig,
    pub loss_log: Vec<f64>,
}

pub fn train(cfg: &TrainConfig, dataset: &Dataset) -> Result<TrainOutput> {
    train_until(cfg, dataset, cfg.steps)
}

/// Runs the first `limit` steps of the `cfg.steps`-step schedule.
pub fn train_until(cfg: &TrainConfig, dataset: &Dataset, limit: usize) -> Result<TrainOutput> {
    cfg.validate()?;
    if dataset.config != cfg.dataset() {
        return Err(Error::Config("dataset does not match the training config".into()));
    }
    let mut params = init_params(&cfg.model())?;
    let mut loss_log = Vec::with_capacity(limit.min(cfg.steps));
    for step in 0..limit.min(cfg.steps) {
        let loss = sgd_step(cfg, dataset, &mut params, step).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFiniteLoss { step },
            other => other,
        })?;
        loss_log.push(loss);
    }
    Ok(TrainOutput { params, loss_log })
}

/// Index of the base episode used at `step`.
pub fn train_episode_index(cfg: &TrainConfig, step: usize) -> u64 {
    mix_seed(&[cfg.seed, TAG_TRAIN, step as u64])
}

fn sgd_step(cfg: &TrainConfig, dataset: &Dataset, params: &mut ModelParams, step: usize) -> Result<f64> {
    let mut episode = dataset.sample_episode(Split::Base, cfg.k_shot, train_episode_index(cfg, step))?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, TAG_FLIP, step as u64]));
    for (image, mask) in &mut episode.supports {
        if rng.gen_bool(0.5) {
            *image = flip_horizontal(image);
            *mask = flip_horizontal(mask);
        }
    }
    let class_index = dataset
        .base_index(episode.class_id)
        .ok_or_else(|| Error::Invalid(format!("class {} is not a base class", episode.class_id)))?;

    let mut g = Graph::new();
    let model = params.bind(&mut g);
    let loss = episode_loss(
        &mut g,
        cfg,
        &model,
        &episode.supports,
        &episode.query_image,
        &episode.query_mask,
        class_index,
        step,
    )?;
    let value = g.value(loss.total).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    g.backward(loss.total)?;

    let handles: Vec<_> = model.layers().iter().flat_map(|l| [l.kernel, l.bias]).collect();
    let grads: Vec<_> = handles.iter().map(|&v| g.grad(v)).collect();
    let sq: f64 = grads.iter().flatten().flat_map(|t| t.data()).map(|x| x * x).sum();
    if !sq.is_finite() {
        return Err(Error::NonFinite("gradient"));
    }
    let norm = sq.sqrt();
    let clip = if norm > GRAD_CLIP_NORM { GRAD_CLIP_NORM / norm } else { 1.0 };
    let lr = cfg.learning_rate(step) * clip;
    let targets = params.layers_mut().into_iter().flat_map(|l| [&mut l.kernel, &mut l.bias]);
    for (t, grad) in targets.zip(grads) {
        if let Some(grad) = grad {
            t.data_mut().iter_mut().zip(grad.data()).for_each(|(p, d)| *p -= lr * d);
        }
    }
    Ok(value)
}

pub fn save_trained(path: &Path, cfg: &TrainConfig, out: &TrainOutput) -> Result<()> {
    let meta = serde_json::to_value(TrainMeta { config: *cfg, loss_log: out.loss_log.clone() })?;
    save_checkpoint(path, &out.params.named_tensors(), meta)?;
    Ok(())
}

/// Loads a checkpoint trained under `cfg`; shapes must match its model.
pub fn load_trained(path: &Path, cfg: &TrainConfig) -> Result<TrainOutput> {
    let (manifest, named) = load_checkpoint(path)?;
    let params = ModelParams::from_named(cfg.model(), &named)?;
    let loss_log = serde_json::from_value::<TrainMeta>(manifest.meta).map(|m| m.loss_log).unwrap_or_default();
    Ok(TrainOutput { params, loss_log })
}
