//! Procedural scene rendering: smooth noise background plus patterned shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ClassSpec, Pattern, ShapeKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Background intensities lie in `[0, BACKGROUND_MAX]`.
pub const BACKGROUND_MAX: f64 = 0.4;
const NOISE_GRID: usize = 5;
const PLACEMENT_ATTEMPTS: usize = 100;
const DARK_SHADE: f64 = 0.45;

/// Rendered image with one exact mask per class present.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// S×S×3, values in [0, 1].
    pub image: Tensor,
    /// `(class_id, S×S binary mask)` in placement order.
    pub masks: Vec<(usize, Tensor)>,
}

impl Scene {
    pub fn mask_of(&self, class_id: usize) -> Option<&Tensor> {
        self.masks.iter().find(|(c, _)| *c == class_id).map(|(_, m)| m)
    }

    /// Per-pixel class label, `None` for background.
    pub fn label_map(&self) -> Vec<Option<usize>> {
        let n = self.image.shape()[0] * self.image.shape()[1];
        let mut labels = vec![None; n];
        for (class, mask) in &self.masks {
            for (l, &m) in labels.iter_mut().zip(mask.data()) {
                if m == 1.0 {
                    *l = Some(*class);
                }
            }
        }
        labels
    }
}

/// Inclusive range of object box sides for an image of side `size`.
pub fn object_size_range(size: usize) -> (usize, usize) {
    (size.div_ceil(6), size / 3)
}

fn smooth_noise(rng: &mut ChaCha8Rng, size: usize) -> Vec<f64> {
    let grid: Vec<f64> = (0..NOISE_GRID * NOISE_GRID * 3).map(|_| rng.gen_range(0.0..BACKGROUND_MAX)).collect();
    let scale = (NOISE_GRID - 1) as f64 / (size - 1).max(1) as f64;
    let mut out = vec![0.0; size * size * 3];
    for y in 0..size {
        let gy = y as f64 * scale;
        let y0 = (gy.floor() as usize).min(NOISE_GRID - 2);
        let fy = gy - y0 as f64;
        for x in 0..size {
            let gx = x as f64 * scale;
            let x0 = (gx.floor() as usize).min(NOISE_GRID - 2);
            let fx = gx - x0 as f64;
            for c in 0..3 {
                let at = |yy: usize, xx: usize| grid[(yy * NOISE_GRID + xx) * 3 + c];
                let v = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                    + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
                out[(y * size + x) * 3 + c] = v.clamp(0.0, BACKGROUND_MAX);
            }
        }
    }
    out
}

/// Whether local box pixel `(px, py)` of a side-`s` box lies inside `shape`.
pub fn shape_contains(shape: ShapeKind, s: usize, px: usize, py: usize) -> bool {
    let half = s as f64 / 2.0;
    let a = (px as f64 + 0.5 - half) / half;
    let b = (py as f64 + 0.5 - half) / half;
    let r2 = a * a + b * b;
    match shape {
        ShapeKind::Circle => r2 <= 1.0,
        ShapeKind::Square => true,
        ShapeKind::Triangle => a.abs() <= (b + 1.0) / 2.0,
        ShapeKind::Cross => a.abs() <= 1.0 / 3.0 || b.abs() <= 1.0 / 3.0,
        ShapeKind::Ring => (0.25..=1.0).contains(&r2),
        ShapeKind::Bar => b.abs() <= 1.0 / 3.0,
    }
}

fn shade(pattern: Pattern, x: usize, y: usize) -> f64 {
    let dark = match pattern {
        Pattern::Solid => false,
        Pattern::Stripes => ((x + y) / 3) % 2 == 1,
        Pattern::Checker => (x / 4 + y / 4) % 2 == 1,
    };
    if dark {
        DARK_SHADE
    } else {
        1.0
    }
}

#[derive(Debug, Clone, Copy)]
struct Placement {
    x: usize,
    y: usize,
    side: usize,
}

impl Placement {
    /// Boxes must keep at least one pixel of background between them.
    fn overlaps(&self, other: &Placement) -> bool {
        let sep_x = self.x + self.side < other.x || other.x + other.side < self.x;
        let sep_y = self.y + self.side < other.y || other.y + other.side < self.y;
        !(sep_x || sep_y)
    }
}

fn place_all(rng: &mut ChaCha8Rng, count: usize, size: usize) -> Result<Vec<Placement>> {
    let (lo, mut hi) = object_size_range(size);
    let mut placed: Vec<Placement> = Vec::with_capacity(count);
    while placed.len() < count {
        let mut found = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let side = rng.gen_range(lo..=hi);
            let p = Placement { x: rng.gen_range(0..=size - side), y: rng.gen_range(0..=size - side), side };
            if placed.iter().all(|q| !p.overlaps(q)) {
                found = Some(p);
                break;
            }
        }
        match found {
            Some(p) => placed.push(p),
            None if hi > lo => hi = (hi - 2).max(lo),
            None => {
                return Err(Error::Placement(format!(
                    "could not place {count} objects in a {size}×{size} image"
                )))
            }
        }
    }
    Ok(placed)
}

/// Renders the given classes (one object each) into a `size`×`size` scene.
pub fn render_scene(specs: &[&ClassSpec], seed: u64, size: usize, max_objects: usize) -> Result<Scene> {
    if specs.is_empty() || specs.len() > max_objects {
        return Err(Error::Invalid(format!("scene needs 1..={max_objects} objects, got {}", specs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pixels = smooth_noise(&mut rng, size);
    let placements = place_all(&mut rng, specs.len(), size)?;
    let mut masks = Vec::with_capacity(specs.len());
    for (spec, p) in specs.iter().zip(&placements) {
        let mut mask = vec![0.0; size * size];
        for ly in 0..p.side {
            for lx in 0..p.side {
                if !shape_contains(spec.shape, p.side, lx, ly) {
                    continue;
                }
                let (x, y) = (p.x + lx, p.y + ly);
                let k = shade(spec.pattern, x, y);
                for c in 0..3 {
                    pixels[(y * size + x) * 3 + c] = spec.base_color[c] * k;
                }
                mask[y * size + x] = 1.0;
            }
        }
        masks.push((spec.class_id, Tensor::from_parts(vec![size, size], mask)));
    }
    Ok(Scene { image: Tensor::from_parts(vec![size, size, 3], pixels), masks })
}

/// Mirrors an H×W×C image or H×W mask left to right.
pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    let (h, w) = (shape[0], shape[1]);
    let c: usize = shape[2..].iter().product();
    let d = t.data();
    let mut out = vec![0.0; d.len()];
    for y in 0..h {
        for x in 0..w {
            let (src, dst) = ((y * w + x) * c, (y * w + (w - 1 - x)) * c);
            out[dst..dst + c].copy_from_slice(&d[src..src + c]);
        }
    }
    Tensor::from_parts(shape, out)
}
