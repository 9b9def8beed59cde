//! Synthetic few-shot segmentation benchmark.
//!
//! Classes are (shape, pattern, colour) triples. The first `n_base` ids are
//! base classes used for training, the rest are novel. Every novel class
//! shares its shape or its pattern with at least two base classes but never
//! both with the same one, so novel semantics are mixtures of base semantics.
//!
//! Everything is a pure function of the dataset seed: sub-seeds are derived
//! with [`mix_seed`], a chained splitmix64 finaliser over `(seed, tag, ...)`.

pub mod export;
pub mod metrics;
pub mod render;

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{downsample_mask, DOWNSAMPLE};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
pub use metrics::{iou_metrics, IouAccumulator, IouReport};
pub use render::{flip_horizontal, render_scene, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
    Ring,
    Bar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    Stripes,
    Checker,
}

pub const SHAPES: [ShapeKind; 6] =
    [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross, ShapeKind::Ring, ShapeKind::Bar];
pub const PATTERNS: [Pattern; 3] = [Pattern::Solid, Pattern::Stripes, Pattern::Checker];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub class_id: usize,
    pub shape: ShapeKind,
    pub pattern: Pattern,
    pub base_color: [f64; 3],
}

impl ClassSpec {
    /// Number of attributes (shape, pattern) shared with `other`.
    pub fn shared_attributes(&self, other: &ClassSpec) -> usize {
        usize::from(self.shape == other.shape) + usize::from(self.pattern == other.pattern)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub n_classes: usize,
    pub n_base: usize,
    pub image_size: usize,
    pub max_objects_per_query: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { n_classes: 12, n_base: 8, image_size: 64, max_objects_per_query: 3, seed: 0 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.n_base == 0 || self.n_base >= self.n_classes {
            return err(format!("need 0 < n_base < n_classes, got {} / {}", self.n_base, self.n_classes));
        }
        if self.n_classes > SHAPES.len() * PATTERNS.len() {
            return err(format!("at most {} classes are supported", SHAPES.len() * PATTERNS.len()));
        }
        if self.image_size < 32 || self.image_size % 4 != 0 {
            return err(format!("image_size must be a multiple of 4 and >= 32, got {}", self.image_size));
        }
        if self.max_objects_per_query == 0 {
            return err("max_objects_per_query must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Base,
    Novel,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Base => 0xB45E,
            Split::Novel => 0x70E1,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Base => "base",
            Split::Novel => "novel",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Split::Base),
            "novel" => Ok(Split::Novel),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// splitmix64 finaliser.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Order-sensitive 64-bit mix of several values.
pub fn mix_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_0F_A5A5_u64, |h, &p| splitmix64(h ^ splitmix64(p)))
}

const TAG_SPECS: u64 = 0x5BEC;
const TAG_CLASS: u64 = 0xC1A5;
const TAG_SUPPORT: u64 = 0x5099;
const TAG_QUERY: u64 = 0x0E4E;
const TAG_DISTRACT: u64 = 0xD157;
const MAX_SUPPORT_ATTEMPTS: u64 = 100;

/// One few-shot task.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub class_id: usize,
    /// K (image, mask) pairs containing only `class_id`.
    pub supports: Vec<(Tensor, Tensor)>,
    pub query_image: Tensor,
    /// Marks `class_id` pixels only.
    pub query_mask: Tensor,
    /// Exact masks of every object in the query, target included.
    pub query_objects: Vec<(usize, Tensor)>,
    pub distractor_ids: Vec<usize>,
}

impl Episode {
    /// Per-pixel class labels of the query (`None` = background).
    pub fn query_labels(&self) -> Vec<Option<usize>> {
        let mut labels = vec![None; self.query_mask.numel()];
        for (class, mask) in &self.query_objects {
            for (l, &m) in labels.iter_mut().zip(mask.data()) {
                if m == 1.0 {
                    *l = Some(*class);
                }
            }
        }
        labels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub specs: Vec<ClassSpec>,
    pub base_ids: Vec<usize>,
    pub novel_ids: Vec<usize>,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - f * s), v * (1.0 - (1.0 - f) * s));
    match i as i64 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn novel_is_valid(novel: &(ShapeKind, Pattern), base: &[(ShapeKind, Pattern)]) -> bool {
    let sharing = base.iter().filter(|b| b.0 == novel.0 || b.1 == novel.1).count();
    sharing >= 2 && !base.contains(novel)
}

/// Builds class specs and the base/novel split from the config seed.
pub fn make_dataset(config: &DatasetConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[config.seed, TAG_SPECS]));
    let combos: Vec<(ShapeKind, Pattern)> =
        SHAPES.iter().flat_map(|&s| PATTERNS.iter().map(move |&p| (s, p))).collect();
    let n_novel = config.n_classes - config.n_base;
    let mut chosen = None;
    for _ in 0..1000 {
        let mut pool = combos.clone();
        pool.shuffle(&mut rng);
        let (base, rest) = pool.split_at(config.n_base);
        let novel: Vec<_> = rest.iter().filter(|c| novel_is_valid(c, base)).take(n_novel).copied().collect();
        if novel.len() == n_novel {
            chosen = Some((base.to_vec(), novel));
            break;
        }
    }
    let (base, novel) = chosen.ok_or_else(|| {
        Error::Config(format!("cannot build {} novel classes related to {} base classes", n_novel, config.n_base))
    })?;
    let hue0: f64 = rng.gen();
    let golden = 0.618_033_988_749_895;
    let specs: Vec<ClassSpec> = base
        .iter()
        .chain(&novel)
        .enumerate()
        .map(|(id, &(shape, pattern))| ClassSpec {
            class_id: id,
            shape,
            pattern,
            base_color: hsv_to_rgb((hue0 + id as f64 * golden).fract(), 0.75, 0.95),
        })
        .collect();
    Ok(Dataset {
        config: *config,
        specs,
        base_ids: (0..config.n_base).collect(),
        novel_ids: (config.n_base..config.n_classes).collect(),
    })
}

impl Dataset {
    pub fn new(config: &DatasetConfig) -> Result<Self> {
        make_dataset(config)
    }

    pub fn ids(&self, split: Split) -> &[usize] {
        match split {
            Split::Base => &self.base_ids,
            Split::Novel => &self.novel_ids,
        }
    }

    pub fn spec(&self, class_id: usize) -> &ClassSpec {
        &self.specs[class_id]
    }

    /// Index of a base class among the channel groups.
    pub fn base_index(&self, class_id: usize) -> Option<usize> {
        self.base_ids.iter().position(|&c| c == class_id)
    }

    pub fn render(&self, classes: &[usize], seed: u64) -> Result<Scene> {
        let specs: Vec<&ClassSpec> = classes.iter().map(|&c| self.spec(c)).collect();
        render_scene(&specs, seed, self.config.image_size, self.config.max_objects_per_query)
    }

    /// `k` single-object support pairs of `class_id`, seeded by `seed`. Every
    /// support object covers at least one pixel of the ×4 feature grid, also
    /// after a horizontal flip, so its mask survives downsampling.
    pub fn support_set(&self, class_id: usize, k: usize, seed: u64) -> Result<Vec<(Tensor, Tensor)>> {
        let grid = self.config.image_size / DOWNSAMPLE;
        (0..k as u64)
            .map(|i| {
                for attempt in 0..MAX_SUPPORT_ATTEMPTS {
                    let mut scene = self.render(&[class_id], mix_seed(&[seed, TAG_SUPPORT, i, attempt]))?;
                    let (_, mask) = scene.masks.pop().expect("one object rendered");
                    let covers = |m: &Tensor| downsample_mask(m, grid, grid).map(|d| d.data().contains(&1.0));
                    if covers(&mask)? && covers(&flip_horizontal(&mask))? {
                        return Ok((scene.image, mask));
                    }
                }
                Err(Error::Placement(format!("class {class_id} support never covers the feature grid")))
            })
            .collect()
    }

    /// Seed from which episode `index` of `split` is regenerated.
    pub fn episode_seed(&self, split: Split, index: u64) -> u64 {
        mix_seed(&[self.config.seed, split.tag(), index])
    }

    /// Deterministic episode `index` of `split`. Base episodes draw distractors
    /// from base classes only; novel episodes from every other class.
    pub fn sample_episode(&self, split: Split, k: usize, index: u64) -> Result<Episode> {
        self.episode_from_seed(split, k, self.episode_seed(split, index))
    }

    pub fn episode_from_seed(&self, split: Split, k: usize, seed: u64) -> Result<Episode> {
        if k == 0 {
            return Err(Error::Invalid("K must be at least 1".into()));
        }
        let ids = self.ids(split);
        if ids.is_empty() {
            return Err(Error::Invalid(format!("split {split} is empty")));
        }
        let class_id = ids[(mix_seed(&[seed, TAG_CLASS]) % ids.len() as u64) as usize];
        let supports = self.support_set(class_id, k, seed)?;

        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, TAG_DISTRACT]));
        let pool: Vec<usize> = match split {
            Split::Base => self.base_ids.iter().copied().filter(|&c| c != class_id).collect(),
            Split::Novel => (0..self.specs.len()).filter(|&c| c != class_id).collect(),
        };
        let max_extra = (self.config.max_objects_per_query - 1).min(pool.len());
        let n_extra = rng.gen_range(0..=max_extra);
        let distractor_ids: Vec<usize> = pool.choose_multiple(&mut rng, n_extra).copied().collect();

        let mut classes = vec![class_id];
        classes.extend(&distractor_ids);
        let scene = self.render(&classes, mix_seed(&[seed, TAG_QUERY]))?;
        let query_mask = scene.mask_of(class_id).expect("target rendered").clone();
        Ok(Episode {
            class_id,
            supports,
            query_image: scene.image,
            query_mask,
            query_objects: scene.masks,
            distractor_ids,
        })
    }
}
