//! Module ablation and the channel-number sweep.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::episodes::{make_dataset, Split};
use crate::error::{Error, Result};
use crate::filtering::FilterStrategy;

use super::config::{Mode, TrainConfig};
use super::evaluate::{evaluate, Report};
use super::train::train;

/// Novel episodes per evaluation unless overridden.
pub const DEFAULT_EVAL_EPISODES: usize = 200;

/// Trains under `cfg` and evaluates on the novel split with `cfg.seed`.
pub fn run(cfg: &TrainConfig, n_episodes: usize) -> Result<Report> {
    let dataset = make_dataset(&cfg.dataset())?;
    let out = train(cfg, &dataset)?;
    evaluate(cfg, &out.params, &out.loss_log, &dataset, Split::Novel, n_episodes, cfg.seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    /// `mode` for the module rows, `strategy` for the filtering rows.
    pub table: String,
    pub mode: Mode,
    pub filter_strategy: FilterStrategy,
    /// Novel mIoU per seed, in seed order.
    pub miou: Vec<f64>,
}

impl AblationRow {
    pub fn mean_miou(&self) -> f64 {
        self.miou.iter().sum::<f64>() / self.miou.len() as f64
    }
}

fn variants(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let mut out: Vec<_> = Mode::ALL
        .into_iter()
        .map(|mode| {
            let filter_strategy = if mode == Mode::FullAsr { FilterStrategy::Projection } else { base.filter_strategy };
            ("mode", TrainConfig { mode, filter_strategy, ..*base })
        })
        .collect();
    for s in FilterStrategy::ALL_FUSIONS {
        out.push(("strategy", TrainConfig { mode: Mode::FullAsr, filter_strategy: s, ..*base }));
    }
    out
}

/// Four mode rows and three filtering-strategy rows, every variant trained
/// and evaluated on each seed. Identical configs are run once.
pub fn ablate(base: &TrainConfig, seeds: &[u64], n_episodes: usize) -> Result<Vec<AblationRow>> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut cache: Vec<(TrainConfig, f64)> = Vec::new();
    let mut rows = Vec::new();
    for (table, cfg) in variants(base) {
        let mut miou = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cfg };
            let cached = cache.iter().find(|(c, _)| *c == cfg).map(|(_, m)| *m);
            let m = match cached {
                Some(m) => m,
                None => {
                    let m = run(&cfg, n_episodes)?.miou;
                    cache.push((cfg, m));
                    m
                }
            };
            miou.push(m);
        }
        rows.push(AblationRow { table: table.into(), mode: cfg.mode, filter_strategy: cfg.fusion(), miou });
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("table,mode,filter_strategy,miou,miou_per_seed\n");
    for r in rows {
        let per_seed: Vec<String> = r.miou.iter().map(|m| format!("{m:.6}")).collect();
        let _ = writeln!(out, "{},{},{},{:.6},{}", r.table, r.mode, r.filter_strategy, r.mean_miou(), per_seed.join(";"));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub d: usize,
    pub miou: Vec<f64>,
}

impl SweepPoint {
    pub fn mean_miou(&self) -> f64 {
        self.miou.iter().sum::<f64>() / self.miou.len() as f64
    }
}

/// Retrains `base` for every channel number with matched seeds.
pub fn sweep_d(base: &TrainConfig, d_values: &[usize], seeds: &[u64], n_episodes: usize) -> Result<Vec<SweepPoint>> {
    if d_values.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep-d needs at least one D value and one seed".into()));
    }
    d_values
        .iter()
        .map(|&d| {
            let miou = seeds
                .iter()
                .map(|&seed| run(&TrainConfig { d, seed, ..*base }, n_episodes).map(|r| r.miou))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepPoint { d, miou })
        })
        .collect()
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("d,miou\n");
    for p in points {
        let _ = writeln!(out, "{},{:.6}", p.d, p.mean_miou());
    }
    out
}
