//! Flat JSON run configuration.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::ModelConfig;
use crate::episodes::{mix_seed, DatasetConfig};
use crate::error::{Error, Result};
use crate::filtering::FilterStrategy;
use crate::losses::LossWeights;
use crate::reconstruction::BasisMode;

/// Rows of the module ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Masked-GAP support vector concatenated with raw query features.
    Baseline,
    /// Reconstructed support vector and query features, concat comparison.
    ReconstOnly,
    /// `ReconstOnly` plus the decoupling and contrastive losses.
    ReconstSpan,
    /// `ReconstSpan` with semantic filtering (`filter_strategy`).
    #[default]
    FullAsr,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Baseline, Mode::ReconstOnly, Mode::ReconstSpan, Mode::FullAsr];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::ReconstOnly => "reconst_only",
            Mode::ReconstSpan => "reconst_span",
            Mode::FullAsr => "full_asr",
        }
    }

    pub fn uses_reconstruction(self) -> bool {
        self != Mode::Baseline
    }

    pub fn uses_span_losses(self) -> bool {
        matches!(self, Mode::ReconstSpan | Mode::FullAsr)
    }

    /// Fusion actually applied in this mode.
    pub fn fusion(self, configured: FilterStrategy) -> FilterStrategy {
        match self {
            Mode::FullAsr => configured,
            _ => FilterStrategy::Concat,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub b: usize,
    pub d: usize,
    pub stem_channels: usize,
    pub image_size: usize,
    pub k_shot: usize,
    pub steps: usize,
    pub lr0: f64,
    pub poly_power: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub filter_strategy: FilterStrategy,
    pub basis_mode: BasisMode,
    pub mode: Mode,
    pub n_classes: usize,
    pub n_base: usize,
    pub max_objects_per_query: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            b: 8,
            d: 8,
            stem_channels: 8,
            image_size: 64,
            k_shot: 1,
            steps: 2000,
            lr0: 0.05,
            poly_power: 0.9,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            tau: 0.5,
            filter_strategy: FilterStrategy::Projection,
            basis_mode: BasisMode::SelfBasis,
            mode: Mode::FullAsr,
            n_classes: 12,
            n_base: 8,
            max_objects_per_query: 3,
            seed: 0,
        }
    }
}

const TAG_INIT: u64 = 0x1417;

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return err("steps must be >= 1".into());
        }
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return err(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.poly_power.is_finite() && self.poly_power >= 0.0) {
            return err(format!("poly_power must be >= 0, got {}", self.poly_power));
        }
        if self.b != self.n_base {
            return err(format!("b ({}) must equal n_base ({})", self.b, self.n_base));
        }
        if self.d == 0 || self.stem_channels == 0 || self.k_shot == 0 {
            return err("d, stem_channels and k_shot must be >= 1".into());
        }
        self.dataset().validate()?;
        self.loss_weights().validate()
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            n_classes: self.n_classes,
            n_base: self.n_base,
            image_size: self.image_size,
            max_objects_per_query: self.max_objects_per_query,
            seed: self.seed,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha, beta: self.beta, gamma: self.gamma, tau: self.tau, total_steps: self.steps }
    }

    pub fn fusion(&self) -> FilterStrategy {
        self.mode.fusion(self.filter_strategy)
    }

    /// Channels entering the decoder.
    pub fn decoder_in(&self) -> usize {
        match self.mode {
            Mode::Baseline => 2 * self.b * self.d,
            _ => self.fusion().fused_channels(self.d),
        }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            groups: self.b,
            group_dim: self.d,
            stem_channels: self.stem_channels,
            decoder_in: self.decoder_in(),
            seed: mix_seed(&[self.seed, TAG_INIT]),
        }
    }

    /// `lr0 · (1 − t/T)^p`.
    pub fn learning_rate(&self, step: usize) -> f64 {
        self.lr0 * (1.0 - step as f64 / self.steps as f64).powf(self.poly_power)
    }
}
