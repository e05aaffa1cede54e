//! Pixel confusion matrix and the metrics derived from it.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Result, TensorError};

/// `K × K` pixel counts; rows are reference classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, reference: usize, predicted: usize) -> u64 {
        self.counts[reference * self.num_classes + predicted]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[u8], reference: &[u8], ignore: Option<u8>) -> Result<()> {
        if pred.len() != reference.len() {
            return Err(TensorError::shape(
                "confusion",
                format!(
                    "{} predictions vs {} reference labels",
                    pred.len(),
                    reference.len()
                ),
            ));
        }
        let k = self.num_classes;
        for (i, (&p, &r)) in pred.iter().zip(reference).enumerate() {
            if Some(r) == ignore {
                continue;
            }
            let (p, r) = (p as usize, r as usize);
            if p >= k || r >= k {
                return Err(TensorError::invalid(
                    "confusion",
                    format!("pixel {i}: reference {r}, prediction {p}, classes 0..{k}"),
                ));
            }
            self.counts[r * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(TensorError::shape(
                "confusion merge",
                format!("{} vs {} classes", self.num_classes, other.num_classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn compute(&self) -> Result<MetricsReport> {
        self.compute_masked(&vec![true; self.num_classes])
    }

    /// Metrics where only classes with `include[k]` enter the means. OA is
    /// always over all pixels.
    pub fn compute_masked(&self, include: &[bool]) -> Result<MetricsReport> {
        let k = self.num_classes;
        if include.len() != k {
            return Err(TensorError::shape(
                "metrics",
                format!("class mask has {} entries for {k} classes", include.len()),
            ));
        }
        let total = self.total();
        if total == 0 {
            return Err(TensorError::invalid("metrics", "confusion matrix is empty"));
        }
        let trace: u64 = (0..k).map(|c| self.get(c, c)).sum();
        let mut f1 = Vec::with_capacity(k);
        let mut iou = Vec::with_capacity(k);
        for c in 0..k {
            let tp = self.get(c, c);
            let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
            let col: u64 = (0..k).map(|r| self.get(r, c)).sum();
            let (fp, fn_) = (col - tp, row - tp);
            if tp + fp + fn_ == 0 {
                f1.push(None);
                iou.push(None);
            } else {
                let tp = tp as f64;
                f1.push(Some(2.0 * tp / (2.0 * tp + fp as f64 + fn_ as f64)));
                iou.push(Some(tp / (tp + fp as f64 + fn_ as f64)));
            }
        }
        let mean = |v: &[Option<f64>]| {
            let vals: Vec<f64> = v
                .iter()
                .zip(include)
                .filter_map(|(x, &inc)| if inc { *x } else { None })
                .collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        };
        Ok(MetricsReport {
            oa: trace as f64 / total as f64,
            mean_f1: mean(&f1),
            miou: mean(&iou),
            f1,
            iou,
        })
    }
}

/// Overall accuracy, per-class F1/IoU (`None` for classes absent from both
/// prediction and reference) and their means.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub oa: f64,
    pub mean_f1: Option<f64>,
    pub miou: Option<f64>,
    pub f1: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
}

impl MetricsReport {
    /// Flat object with keys `oa`, `mean_f1`, `miou`, `f1.<class>`,
    /// `iou.<class>`. Classes are named by index when `names` is too short.
    pub fn to_json(&self, names: &[String]) -> Value {
        let name = |i: usize| names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let num = |v: Option<f64>| v.map_or(Value::Null, Value::from);
        let mut m = Map::new();
        m.insert("oa".into(), Value::from(self.oa));
        m.insert("mean_f1".into(), num(self.mean_f1));
        m.insert("miou".into(), num(self.miou));
        for (i, v) in self.f1.iter().enumerate() {
            m.insert(format!("f1.{}", name(i)), num(*v));
        }
        for (i, v) in self.iou.iter().enumerate() {
            m.insert(format!("iou.{}", name(i)), num(*v));
        }
        Value::Object(m)
    }
}
