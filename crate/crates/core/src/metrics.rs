//! Pixel confusion counts and the metrics derived from them.

use std::ops::{Add, AddAssign};

use fino_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::data::is_binary;
use crate::error::{FinoError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl Add for Confusion {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl AddAssign for Confusion {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<Confusion> {
    if pred.shape() != gt.shape() {
        return Err(FinoError::Data(format!("prediction {:?} and ground truth {:?} differ", pred.shape(), gt.shape())));
    }
    if !is_binary(pred) || !is_binary(gt) {
        return Err(FinoError::Data("confusion inputs must be binary".into()));
    }
    let mut c = Confusion::default();
    for (&p, &t) in pred.data().iter().zip(gt.data()) {
        match (p == 1.0, t == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

/// 0/0 is 1 when nothing was predicted or present, 0 otherwise.
fn ratio(num: u64, den: u64, empty: bool) -> f64 {
    if den == 0 {
        if empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_counts(c: Confusion) -> Self {
        let empty = c.tp + c.fp + c.fn_ == 0;
        let precision = ratio(c.tp, c.tp + c.fp, empty);
        let recall = ratio(c.tp, c.tp + c.fn_, empty);
        let f1 = if empty {
            1.0
        } else if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
            precision,
            recall,
            f1,
            iou: ratio(c.tp, c.tp + c.fp + c.fn_, empty),
        }
    }

    pub fn counts(&self) -> Confusion {
        Confusion::new(self.tp, self.fp, self.fn_, self.tn)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Reference values reported for the full method on LEVIR-CD, in percent.
/// Kept as fixtures for the F1/IoU identity; nothing here reproduces them.
pub const REPORTED_LEVIR_F1: f64 = 92.41;
pub const REPORTED_LEVIR_IOU: f64 = 85.89;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn definition_arithmetic() {
        let r = MetricsReport::from_counts(Confusion::new(9, 1, 1, 100));
        assert!((r.precision - 0.9).abs() < 1e-15);
        assert!((r.recall - 0.9).abs() < 1e-15);
        assert!((r.f1 - 0.9).abs() < 1e-15);
        assert!((r.iou - 9.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_empty() {
        let r = MetricsReport::from_counts(Confusion::new(0, 0, 0, 50));
        assert_eq!([r.precision, r.recall, r.f1, r.iou], [1.0; 4]);
        let r = MetricsReport::from_counts(Confusion::new(0, 3, 0, 50));
        assert_eq!([r.precision, r.recall, r.f1, r.iou], [0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn json_keys() {
        let json = MetricsReport::from_counts(Confusion::new(1, 2, 3, 4)).to_json();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        let mut keys: Vec<&str> = v.as_object().unwrap().keys().map(|s| s.as_str()).collect();
        keys.sort();
        assert_eq!(keys, ["f1", "fn", "fp", "iou", "precision", "recall", "tn", "tp"]);
    }

    #[test]
    fn confusion_extremes() {
        let gt = Tensor::from_vec(&[4], vec![1.0, 0.0, 1.0, 0.0]).unwrap();
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let c = confusion(&gt.map(|v| 1.0 - v), &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&gt.map(|v| v * 0.5), &gt).is_err());
    }
}
