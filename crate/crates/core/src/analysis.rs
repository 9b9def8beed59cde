//! Two-basis reconstruction algebra and the diagnostic statistics reported
//! after evaluation: basis orthogonality, weight sparsity, confusion counts.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two unit bases at angle θ and two convex reconstructions
/// `u₁ = w11·v₁ + (1−w11)·v₂`, `u₂ = w21·v₁ + (1−w21)·v₂` (scaling constants 1).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconSpec2D {
    pub w11: f64,
    pub w21: f64,
    pub cos_theta: f64,
}

impl ReconSpec2D {
    pub fn new(w11: f64, w21: f64, cos_theta: f64) -> Result<Self> {
        let unit = 0.0..=1.0;
        if !unit.contains(&w11) || !unit.contains(&w21) || !(-1.0..=1.0).contains(&cos_theta) {
            return Err(Error::Invalid(format!("weights must lie in [0,1] and cos θ in [-1,1]: ({w11}, {w21}, {cos_theta})")));
        }
        Ok(ReconSpec2D { w11, w21, cos_theta })
    }
}

/// Closed form `1 + (w11 + w21 − 2·w11·w21)(cos θ − 1)`.
pub fn paper_cosine_identity(spec: &ReconSpec2D) -> f64 {
    let ReconSpec2D { w11, w21, cos_theta } = *spec;
    1.0 + (w11 + w21 - 2.0 * w11 * w21) * (cos_theta - 1.0)
}

/// Explicit 2-D construction: `(⟨u₁,u₂⟩, cos⟨u₁,u₂⟩)` for bases
/// `v₁ = (1, 0)`, `v₂ = (cos θ, sin θ)`. The cosine is `None` when either
/// reconstruction vanishes.
pub fn explicit_inner_and_cosine(w11: f64, w21: f64, theta: f64) -> (f64, Option<f64>) {
    let v1 = [1.0, 0.0];
    let v2 = [theta.cos(), theta.sin()];
    let combo = |w: f64| [w * v1[0] + (1.0 - w) * v2[0], w * v1[1] + (1.0 - w) * v2[1]];
    let (u1, u2) = (combo(w11), combo(w21));
    let inner = u1[0] * u2[0] + u1[1] * u2[1];
    let n1 = u1[0].hypot(u1[1]);
    let n2 = u2[0].hypot(u2[1]);
    let cos = (n1 > 1e-12 && n2 > 1e-12).then(|| inner / (n1 * n2));
    (inner, cos)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub samples: usize,
    /// Max |⟨u₁,u₂⟩ − identity|; the identity is exact for the inner product.
    pub max_abs_error: f64,
    /// Max |cos⟨u₁,u₂⟩ − identity| against the normalised cosine.
    pub max_normalized_gap: f64,
}

/// Samples `(w11, w21, θ)` uniformly from `[0,1]² × [0, π]` and compares the
/// closed form with the explicit construction.
pub fn verify_identity(n_samples: usize, seed: u64) -> Result<IdentityCheck> {
    if n_samples == 0 {
        return Err(Error::Invalid("verify_identity needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut check = IdentityCheck { samples: n_samples, max_abs_error: 0.0, max_normalized_gap: 0.0 };
    for _ in 0..n_samples {
        let (w11, w21, theta) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>() * PI);
        check.absorb(w11, w21, theta);
    }
    Ok(check)
}

impl IdentityCheck {
    /// Single-point check (used for hand-picked configurations).
    pub fn at(w11: f64, w21: f64, theta: f64) -> Self {
        let mut check = IdentityCheck { samples: 1, max_abs_error: 0.0, max_normalized_gap: 0.0 };
        check.absorb(w11, w21, theta);
        check
    }

    fn absorb(&mut self, w11: f64, w21: f64, theta: f64) {
        let spec = ReconSpec2D { w11, w21, cos_theta: theta.cos() };
        let closed = paper_cosine_identity(&spec);
        let (inner, cos) = explicit_inner_and_cosine(w11, w21, theta);
        self.max_abs_error = self.max_abs_error.max((inner - closed).abs());
        if let Some(c) = cos {
            self.max_normalized_gap = self.max_normalized_gap.max((c - closed).abs());
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Orthogonality {
    pub class_ids: Vec<usize>,
    /// |cos| between every pair of class vectors; unit diagonal.
    pub matrix: Vec<Vec<f64>>,
    pub mean_offdiag: f64,
}

/// Pairwise |cos| of unit class vectors.
pub fn orthogonality_matrix(class_vectors: &[(usize, Vec<f64>)]) -> Result<Orthogonality> {
    if class_vectors.len() < 2 {
        return Err(Error::Invalid("orthogonality needs at least two vectors".into()));
    }
    let dim = class_vectors[0].1.len();
    for (id, v) in class_vectors {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if v.len() != dim || (n - 1.0).abs() > 1e-6 {
            return Err(Error::Invalid(format!("class {id} vector is not unit length (norm {n})")));
        }
    }
    let n = class_vectors.len();
    let mut matrix = vec![vec![0.0; n]; n];
    let mut off = 0.0;
    for i in 0..n {
        matrix[i][i] = 1.0;
        for j in i + 1..n {
            let c: f64 = class_vectors[i].1.iter().zip(&class_vectors[j].1).map(|(a, b)| a * b).sum();
            let c = c.abs().min(1.0);
            matrix[i][j] = c;
            matrix[j][i] = c;
            off += 2.0 * c;
        }
    }
    Ok(Orthogonality {
        class_ids: class_vectors.iter().map(|(id, _)| *id).collect(),
        matrix,
        mean_offdiag: off / (n * (n - 1)) as f64,
    })
}

/// Shannon entropy in nats with `0·log 0 = 0`.
pub fn entropy(w: &[f64]) -> f64 {
    -w.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityEntry {
    pub class_id: usize,
    pub mean_weights: Vec<f64>,
    pub entropy: f64,
}

/// Mean support-weight vector per class and its entropy (lower = sparser).
pub fn sparsity_profile(per_class: &[(usize, Vec<Vec<f64>>)]) -> Result<Vec<SparsityEntry>> {
    per_class
        .iter()
        .map(|(class_id, vectors)| {
            let first = vectors
                .first()
                .ok_or_else(|| Error::Invalid(format!("no weight vectors for class {class_id}")))?;
            let mut mean = vec![0.0; first.len()];
            for w in vectors {
                let total: f64 = w.iter().sum();
                if w.len() != mean.len() || w.iter().any(|&x| x < -1e-9) || (total - 1.0).abs() > 1e-9 {
                    return Err(Error::Invalid(format!("weights of class {class_id} are off the simplex")));
                }
                mean.iter_mut().zip(w).for_each(|(m, x)| *m += x);
            }
            mean.iter_mut().for_each(|m| *m /= vectors.len() as f64);
            Ok(SparsityEntry { class_id: *class_id, entropy: entropy(&mean), mean_weights: mean })
        })
        .collect()
}

/// Foreground-pixel confusion counts. Rows are true classes; columns are
/// predicted classes followed by one background column, so every row sums to
/// the number of foreground pixels of that class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix { n_classes, counts: vec![vec![0; n_classes + 1]; n_classes] }
    }

    pub fn background_column(&self) -> usize {
        self.n_classes
    }

    /// Adds one image: per-pixel true class and predicted class (`None` = background).
    pub fn add(&mut self, truth: &[Option<usize>], predicted: &[Option<usize>]) -> Result<()> {
        if truth.len() != predicted.len() {
            return Err(Error::shape("confusion", format!("{} vs {} pixels", truth.len(), predicted.len())));
        }
        for (t, p) in truth.iter().zip(predicted) {
            let Some(t) = *t else { continue };
            let col = p.unwrap_or(self.n_classes);
            if t >= self.n_classes || col > self.n_classes {
                return Err(Error::Invalid(format!("class id out of range [0, {})", self.n_classes)));
            }
            self.counts[t][col] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn row_total(&self, class: usize) -> u64 {
        self.counts[class].iter().sum()
    }
}

pub fn confusion_matrix(
    n_classes: usize,
    records: &[(Vec<Option<usize>>, Vec<Option<usize>>)],
) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(n_classes);
    for (truth, pred) in records {
        m.add(truth, pred)?;
    }
    Ok(m)
}

/// Assigns every pixel to the candidate with the highest foreground
/// probability, or background when all candidates fall below 0.5.
pub fn assign_pixels(candidates: &[(usize, Vec<f64>)]) -> Vec<Option<usize>> {
    let n = candidates.first().map_or(0, |(_, p)| p.len());
    (0..n)
        .map(|i| {
            let mut best: Option<(usize, f64)> = None;
            for (class, probs) in candidates {
                let p = probs[i];
                if p >= 0.5 && best.is_none_or(|(_, q)| p > q) {
                    best = Some((*class, p));
                }
            }
            best.map(|(c, _)| c)
        })
        .collect()
}
