//! Decoupling, contrastive and segmentation losses and their gated sum.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var, DIV_EPS};
use crate::error::{Error, Result};
use crate::semantics::{SemanticVector, SupportWeights};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Fraction of training after which the contrastive term switches on.
    pub tau: f64,
    pub total_steps: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 1.0, gamma: 0.1, tau: 0.5, total_steps: 2000 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x >= 0.0;
        if !(ok(self.alpha) && ok(self.beta) && ok(self.gamma)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be positive".into()));
        }
        Ok(())
    }

    /// Whether the contrastive term is part of the objective at `step`.
    pub fn contrastive_active(&self, step: usize) -> bool {
        step as f64 >= self.tau * self.total_steps as f64
    }
}

/// `log(1 + exp(−w·y))` for the one-hot label `y` of `class_index`.
pub fn decoupling_loss(g: &mut Graph, w: SupportWeights, class_index: usize) -> Result<Var> {
    if class_index >= w.groups {
        return Err(Error::Invalid(format!("class index {class_index} out of range for {} groups", w.groups)));
    }
    let mut onehot = vec![0.0; w.groups];
    onehot[class_index] = 1.0;
    let y = g.constant(Tensor::from_parts(vec![w.groups], onehot));
    let picked = g.mul(w.values, y)?;
    let wc = g.sum_all(picked)?;
    let neg = g.scale(wc, -1.0)?;
    let e = g.exp(neg)?;
    let one_plus = g.add_scalar(e, 1.0)?;
    g.log(one_plus)
}

/// `exp(1 + S_off − S_diag)` where `S_off` sums `|cos|` between support
/// sub-vector `b` and query sub-vector `b'` over all `b ≠ b'`, and `S_diag`
/// sums the matched pairs.
pub fn contrastive_loss(g: &mut Graph, v_s: SemanticVector, v_q: SemanticVector) -> Result<Var> {
    if (v_s.groups, v_s.group_dim) != (v_q.groups, v_q.group_dim) {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{}×{} vs {}×{}", v_s.groups, v_s.group_dim, v_q.groups, v_q.group_dim),
        ));
    }
    for v in [v_s, v_q] {
        if let Some(b) = v.sub_vector_norms(g).iter().position(|&n| n < DIV_EPS) {
            return Err(Error::DegenerateSubvector(b));
        }
    }
    contrastive_loss_tolerant(g, v_s, v_q)
}

/// [`contrastive_loss`] with every cosine involving a dead sub-vector taken as 0.
pub fn contrastive_loss_tolerant(g: &mut Graph, v_s: SemanticVector, v_q: SemanticVector) -> Result<Var> {
    if (v_s.groups, v_s.group_dim) != (v_q.groups, v_q.group_dim) {
        return Err(Error::shape(
            "contrastive_loss",
            format!("{}×{} vs {}×{}", v_s.groups, v_s.group_dim, v_q.groups, v_q.group_dim),
        ));
    }
    let b = v_s.groups;
    let s = v_s.sub_vectors(g)?;
    let q = v_q.sub_vectors(g)?;
    let us = g.normalize_last(s)?;
    let uq = g.normalize_last(q)?;
    let uq_t = g.transpose(uq)?;
    let cos = g.matmul(us, uq_t)?;
    let abs = g.abs(cos)?;
    let signs: Vec<f64> = (0..b * b).map(|i| if i / b == i % b { -1.0 } else { 1.0 }).collect();
    let signs = g.constant(Tensor::from_parts(vec![b, b], signs));
    let signed = g.mul(abs, signs)?;
    let exponent = g.sum_all(signed)?;
    let exponent = g.add_scalar(exponent, 1.0)?;
    g.exp(exponent)
}

/// Mean two-class cross-entropy of H×W×2 logits against a binary H×W mask.
pub fn segmentation_loss(g: &mut Graph, logits: Var, mask: &Tensor) -> Result<Var> {
    let &[h, w, 2] = g.shape(logits) else {
        return Err(Error::shape("segmentation_loss", format!("expected H×W×2 logits, got {:?}", g.shape(logits))));
    };
    if mask.shape() != [h, w] {
        return Err(Error::shape("segmentation_loss", format!("mask {:?} vs logits {h}×{w}", mask.shape())));
    }
    let targets = mask
        .data()
        .iter()
        .map(|&m| match m {
            0.0 => Ok(0),
            1.0 => Ok(1),
            _ => Err(Error::domain("segmentation_loss", "mask must be binary")),
        })
        .collect::<Result<Vec<usize>>>()?;
    let flat = g.reshape(logits, &[h * w, 2])?;
    g.cross_entropy(flat, &targets)
}

/// `α·L_dec + β·L_seg (+ γ·L_con once step ≥ τ·T)`. `l_con` may be `None`
/// only while the contrastive term is gated off.
pub fn total_loss(
    g: &mut Graph,
    l_dec: Option<Var>,
    l_seg: Var,
    l_con: Option<Var>,
    weights: &LossWeights,
    step: usize,
) -> Result<Var> {
    if step >= weights.total_steps {
        return Err(Error::Invalid(format!("step {step} outside [0, {})", weights.total_steps)));
    }
    let mut total = g.scale(l_seg, weights.beta)?;
    if let Some(dec) = l_dec {
        let term = g.scale(dec, weights.alpha)?;
        total = g.add(term, total)?;
    }
    if weights.contrastive_active(step) {
        if let Some(con) = l_con {
            let term = g.scale(con, weights.gamma)?;
            total = g.add(total, term)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::semantics::support_weights;

    fn weights(g: &mut Graph, w: &[f64]) -> SupportWeights {
        let v = g.constant(Tensor::vector(w).unwrap());
        SupportWeights { values: v, groups: w.len() }
    }

    fn sv(g: &mut Graph, data: &[f64], groups: usize, dim: usize) -> SemanticVector {
        let v = g.constant(Tensor::vector(data).unwrap());
        SemanticVector::new(g, v, groups, dim).unwrap()
    }

    #[test]
    fn decoupling_examples() {
        let mut g = Graph::new();
        let w = weights(&mut g, &[1.0, 0.0]);
        let l = decoupling_loss(&mut g, w, 0).unwrap();
        assert!((g.value(l).item() - (1.0 + (-1f64).exp()).ln()).abs() < 1e-15);
        assert!((g.value(l).item() - 0.313262).abs() < 1e-6);
        let l = decoupling_loss(&mut g, w, 1).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);
        let w = weights(&mut g, &[0.2; 5]);
        let l = decoupling_loss(&mut g, w, 3).unwrap();
        assert!((g.value(l).item() - 0.598139).abs() < 1e-6);
        assert!(decoupling_loss(&mut g, w, 5).is_err());
    }

    #[test]
    fn decoupling_gradient() {
        // d/dw_c log(1+e^{-w_c}) = -e^{-w_c}/(1+e^{-w_c})
        for wc in [0.05, 0.4, 0.95] {
            let mut g = Graph::new();
            let v = g.param(Tensor::vector(&[wc, 1.0 - wc]).unwrap());
            let l = decoupling_loss(&mut g, SupportWeights { values: v, groups: 2 }, 0).unwrap();
            g.backward(l).unwrap();
            let grad = g.grad(v).unwrap();
            let expect = -(-wc).exp() / (1.0 + (-wc).exp());
            assert!((grad.data()[0] - expect).abs() < 1e-14);
            assert!(grad.data()[0] > -0.5 && grad.data()[0] < -0.268);
            assert_eq!(grad.data()[1], 0.0);
        }
        let f = |g: &mut Graph, p: &[Var]| -> Result<Var> {
            let v = SemanticVector::new(g, p[0], 3, 2)?;
            let w = support_weights(g, v)?;
            decoupling_loss(g, w, 1)
        };
        let p = Tensor::vector(&[0.3, -0.2, 1.1, 0.4, -0.5, 0.25]).unwrap();
        assert!(grad_check(&f, &[p], 6, 0).unwrap() <= 1e-4);
    }

    #[test]
    fn contrastive_closed_forms() {
        let mut g = Graph::new();
        let a = sv(&mut g, &[3.0, 4.0], 1, 2);
        let l = contrastive_loss(&mut g, a, a).unwrap();
        assert!((g.value(l).item() - 1.0).abs() < 1e-15);

        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let s = sv(&mut g, &eye, 4, 4);
        let l = contrastive_loss(&mut g, s, s).unwrap();
        assert!((g.value(l).item() - (-3f64).exp()).abs() < 1e-12);

        let aliased = sv(&mut g, &[1.0, 0.0, 1.0, 0.0], 2, 2);
        let l = contrastive_loss(&mut g, aliased, aliased).unwrap();
        assert!((g.value(l).item() - std::f64::consts::E).abs() < 1e-12);

        let zero = sv(&mut g, &[1.0, 0.0, 0.0, 0.0], 2, 2);
        assert_eq!(contrastive_loss(&mut g, aliased, zero), Err(Error::DegenerateSubvector(1)));
    }

    #[test]
    fn contrastive_gradient_check() {
        let f = |g: &mut Graph, p: &[Var]| -> Result<Var> {
            let s = SemanticVector::new(g, p[0], 3, 2)?;
            let q = SemanticVector::new(g, p[1], 3, 2)?;
            contrastive_loss(g, s, q)
        };
        let s = Tensor::vector(&[0.9, 0.1, -0.3, 1.2, 0.5, 0.5]).unwrap();
        let q = Tensor::vector(&[1.0, -0.2, 0.2, 0.8, -0.6, 0.4]).unwrap();
        assert!(grad_check(&f, &[s, q], 12, 3).unwrap() <= 1e-4);
    }

    #[test]
    fn segmentation_examples() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::full(&[2, 3, 2], 0.7));
        let mask = Tensor::new(vec![2, 3], vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        let l = segmentation_loss(&mut g, logits, &mask).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-15);

        let data: Vec<f64> = mask.data().iter().flat_map(|&m| if m == 1.0 { [0.0, 20.0] } else { [20.0, 0.0] }).collect();
        let logits = g.constant(Tensor::new(vec![2, 3, 2], data).unwrap());
        let l = segmentation_loss(&mut g, logits, &mask).unwrap();
        assert!(g.value(l).item() <= 1e-8);

        let logits = g.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 3f64.ln()]).unwrap());
        let l = segmentation_loss(&mut g, logits, &Tensor::full(&[1, 1], 1.0)).unwrap();
        assert!((g.value(l).item() + 0.75f64.ln()).abs() < 1e-15);
        assert!((g.value(l).item() - 0.287682).abs() < 1e-6);

        assert!(segmentation_loss(&mut g, logits, &Tensor::full(&[1, 2], 1.0)).is_err());
        assert!(segmentation_loss(&mut g, logits, &Tensor::full(&[1, 1], 0.5)).is_err());
    }

    #[test]
    fn total_loss_gating() {
        let lw = LossWeights { alpha: 1.0, beta: 2.0, gamma: 0.5, tau: 0.5, total_steps: 10 };
        let mut g = Graph::new();
        let dec = g.constant(Tensor::scalar(0.3).unwrap());
        let seg = g.constant(Tensor::scalar(0.7).unwrap());
        let con = g.constant(Tensor::scalar(0.05).unwrap());
        let early = total_loss(&mut g, Some(dec), seg, Some(con), &lw, 4).unwrap();
        assert!((g.value(early).item() - 1.7).abs() < 1e-15);
        let late = total_loss(&mut g, Some(dec), seg, Some(con), &lw, 5).unwrap();
        assert!((g.value(late).item() - 1.725).abs() < 1e-15);
        assert!(total_loss(&mut g, Some(dec), seg, Some(con), &lw, 10).is_err());

        let ones = LossWeights { alpha: 1.0, beta: 1.0, gamma: 1.0, tau: 0.0, total_steps: 3 };
        let sum = total_loss(&mut g, Some(dec), seg, Some(con), &ones, 0).unwrap();
        assert!((g.value(sum).item() - 1.05).abs() < 1e-15);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { tau: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { gamma: -0.1, ..Default::default() }.validate().is_err());
        assert!(LossWeights { total_steps: 0, ..Default::default() }.validate().is_err());
    }
}
