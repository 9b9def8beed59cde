//! Dataset-level IoU: TP/FP/FN are pooled per class across all records
//! before the ratio is taken (no per-image averaging).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_class: BTreeMap<usize, f64>,
    pub miou: f64,
    pub fb_iou: f64,
}

/// Commutative accumulator; records can be added in any order or merged.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IouAccumulator {
    per_class: BTreeMap<usize, Counts>,
    foreground: Counts,
    background: Counts,
}

fn binary(mask: &Tensor) -> Result<&[f64]> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::domain("iou", "masks must be binary"));
    }
    Ok(mask.data())
}

impl IouAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &Tensor, gt: &Tensor, class_id: usize) -> Result<()> {
        if pred.shape() != gt.shape() {
            return Err(Error::shape("iou", format!("{:?} vs {:?}", pred.shape(), gt.shape())));
        }
        let (p, g) = (binary(pred)?, binary(gt)?);
        let mut fg = Counts::default();
        let mut bg = Counts::default();
        for (&p, &g) in p.iter().zip(g) {
            match (p == 1.0, g == 1.0) {
                (true, true) => fg.tp += 1,
                (true, false) => {
                    fg.fp += 1;
                    bg.fn_ += 1;
                }
                (false, true) => {
                    fg.fn_ += 1;
                    bg.fp += 1;
                }
                (false, false) => bg.tp += 1,
            }
        }
        self.per_class.entry(class_id).or_default().add(fg);
        self.foreground.add(fg);
        self.background.add(bg);
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        for (c, counts) in &other.per_class {
            self.per_class.entry(*c).or_default().add(*counts);
        }
        self.foreground.add(other.foreground);
        self.background.add(other.background);
    }

    pub fn counts(&self, class_id: usize) -> Option<Counts> {
        self.per_class.get(&class_id).copied()
    }

    /// Classes with no TP, FP or FN are left out of the mean.
    pub fn finish(&self) -> IouReport {
        let per_class: BTreeMap<usize, f64> =
            self.per_class.iter().filter_map(|(c, k)| k.iou().map(|v| (*c, v))).collect();
        let miou = if per_class.is_empty() { 0.0 } else { per_class.values().sum::<f64>() / per_class.len() as f64 };
        let fb: Vec<f64> = [self.foreground.iou(), self.background.iou()].into_iter().flatten().collect();
        let fb_iou = if fb.is_empty() { 0.0 } else { fb.iter().sum::<f64>() / fb.len() as f64 };
        IouReport { per_class, miou, fb_iou }
    }
}

/// IoU statistics over `(prediction, ground truth, class)` records.
pub fn iou_metrics(records: &[(&Tensor, &Tensor, usize)]) -> Result<IouReport> {
    let mut acc = IouAccumulator::new();
    for (pred, gt, class) in records {
        acc.add(pred, gt, *class)?;
    }
    Ok(acc.finish())
}
