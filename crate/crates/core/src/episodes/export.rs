//! Dataset export: binary PPM (P6) images, binary PGM (P5) masks with values
//! 0/255, and a JSON index.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{ClassSpec, Dataset, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an H×W×3 image in [0, 1] as P6.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[h, w, 3] = image.shape() else {
        return Err(Error::shape("ppm", format!("expected H×W×3, got {:?}", image.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

/// Encodes a binary H×W mask as P5 with values 0/255.
pub fn encode_pgm(mask: &Tensor) -> Result<Vec<u8>> {
    let &[h, w] = mask.shape() else {
        return Err(Error::shape("pgm", format!("expected H×W, got {:?}", mask.shape())));
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.data().iter().map(|&v| if v == 1.0 { 255 } else { 0 }));
    Ok(out)
}

#[derive(Debug, Serialize)]
struct EpisodeEntry {
    split: Split,
    index: u64,
    class_id: usize,
    distractor_ids: Vec<usize>,
    /// Input to `Dataset::episode_from_seed`.
    episode_seed: u64,
    supports: Vec<(String, String)>,
    query: (String, String),
}

#[derive(Debug, Serialize)]
struct Index<'a> {
    config: &'a super::DatasetConfig,
    classes: &'a [ClassSpec],
    base_ids: &'a [usize],
    novel_ids: &'a [usize],
    episodes: Vec<EpisodeEntry>,
}

/// Writes `n_per_split` K-shot episodes of each split plus `index.json`.
pub fn export_dataset(dataset: &Dataset, k: usize, n_per_split: usize, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut episodes = Vec::new();
    for split in [Split::Base, Split::Novel] {
        for index in 0..n_per_split as u64 {
            let ep = dataset.sample_episode(split, k, index)?;
            let stem = format!("{split}_{index:04}");
            let mut supports = Vec::new();
            for (i, (img, mask)) in ep.supports.iter().enumerate() {
                let (ip, mp) = (format!("{stem}_support{i}.ppm"), format!("{stem}_support{i}_mask.pgm"));
                fs::write(out.join(&ip), encode_ppm(img)?)?;
                fs::write(out.join(&mp), encode_pgm(mask)?)?;
                supports.push((ip, mp));
            }
            let (qp, qm) = (format!("{stem}_query.ppm"), format!("{stem}_query_mask.pgm"));
            fs::write(out.join(&qp), encode_ppm(&ep.query_image)?)?;
            fs::write(out.join(&qm), encode_pgm(&ep.query_mask)?)?;
            episodes.push(EpisodeEntry {
                split,
                index,
                class_id: ep.class_id,
                distractor_ids: ep.distractor_ids,
                episode_seed: dataset.episode_seed(split, index),
                supports,
                query: (qp, qm),
            });
        }
    }
    let index = Index {
        config: &dataset.config,
        classes: &dataset.specs,
        base_ids: &dataset.base_ids,
        novel_ids: &dataset.novel_ids,
        episodes,
    };
    fs::write(out.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(())
}
