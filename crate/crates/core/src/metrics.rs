//! Confusion-matrix segmentation metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

/// Square count matrix; entry `[label][pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, label: usize, pred: usize) -> u64 {
        self.counts[label * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, preds: &[usize], labels: &[usize]) -> Result<()> {
        if preds.len() != labels.len() {
            return Err(CoreError::Config(format!(
                "{} predictions for {} labels",
                preds.len(),
                labels.len()
            )));
        }
        for (what, values) in [("prediction", preds), ("label", labels)] {
            if let Some(index) = values.iter().position(|&v| v >= self.classes) {
                return Err(CoreError::Index {
                    what,
                    index,
                    value: values[index],
                    classes: self.classes,
                });
            }
        }
        for (&p, &l) in preds.iter().zip(labels) {
            self.counts[l * self.classes + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(CoreError::Config(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    fn tp_fp_fn(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.classes).map(|l| self.get(l, c)).sum();
        let row: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    let mut m = ConfusionMatrix::new(classes);
    m.add(preds, labels)?;
    Ok(m)
}

fn check_foreground(m: &ConfusionMatrix, foreground: &[usize]) -> Result<()> {
    match foreground.iter().find(|&&c| c >= m.classes) {
        Some(&c) => Err(CoreError::Index {
            what: "foreground class",
            index: 0,
            value: c,
            classes: m.classes,
        }),
        None => Ok(()),
    }
}

/// Per-class IoU over the foreground classes present in either labels or
/// predictions, and their mean.
pub fn miou(m: &ConfusionMatrix, foreground: &[usize]) -> Result<(BTreeMap<usize, f64>, f64)> {
    check_foreground(m, foreground)?;
    let mut per_class = BTreeMap::new();
    for &c in foreground {
        let (tp, fp, fn_) = m.tp_fp_fn(c);
        let denom = tp + fp + fn_;
        if denom > 0 {
            per_class.insert(c, tp as f64 / denom as f64);
        }
    }
    if per_class.is_empty() {
        return Err(CoreError::UndefinedMetric(
            "no foreground class occurs in labels or predictions".into(),
        ));
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok((per_class, mean))
}

/// Mean recall over the foreground classes that occur in the labels.
pub fn macc(m: &ConfusionMatrix, foreground: &[usize]) -> Result<f64> {
    check_foreground(m, foreground)?;
    let recalls: Vec<f64> = foreground
        .iter()
        .filter_map(|&c| {
            let (tp, _, fn_) = m.tp_fp_fn(c);
            (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64)
        })
        .collect();
    if recalls.is_empty() {
        return Err(CoreError::UndefinedMetric(
            "no foreground class occurs in the labels".into(),
        ));
    }
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class_iou: BTreeMap<usize, f64>,
    pub miou: f64,
    pub macc: f64,
    pub episode_count: usize,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    pub fn from_matrix(
        m: &ConfusionMatrix,
        episode_count: usize,
        config_hash: &str,
        seed: u64,
    ) -> Result<Self> {
        let foreground: Vec<usize> = (1..m.classes).collect();
        let (per_class_iou, miou) = miou(m, &foreground)?;
        Ok(Self {
            per_class_iou,
            miou,
            macc: macc(m, &foreground)?,
            episode_count,
            config_hash: config_hash.to_string(),
            seed,
        })
    }
}
