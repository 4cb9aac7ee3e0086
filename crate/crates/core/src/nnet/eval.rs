//! Top-1 / top-5 evaluation and per-class summaries.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::train::{input_tensor, LabeledImage};
use super::{argmax, Model, Scalar};
use crate::error::{Error, Result};

/// Per-image result.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub path: String,
    pub label: usize,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn pred(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn conf_true(&self) -> f64 {
        self.probs[self.label]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassStats {
    pub count: usize,
    pub top1: f64,
    pub top5: f64,
    pub mean_confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub num_classes: usize,
    pub predictions: Vec<Prediction>,
    pub top1: f64,
    pub top5: f64,
    /// Classes absent from the test set are omitted.
    pub per_class: BTreeMap<usize, ClassStats>,
}

/// True when `label` is among the `k` highest entries. Ties rank the lower
/// index first.
pub fn topk_hit(probs: &[f64], label: usize, k: usize) -> bool {
    let target = probs[label];
    let ahead = probs
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p > target || (p == target && i < label))
        .count();
    ahead < k
}

impl EvalResult {
    pub fn from_predictions(num_classes: usize, predictions: Vec<Prediction>) -> Result<Self> {
        if predictions.is_empty() {
            return Err(Error::Input("test set is empty".into()));
        }
        for p in &predictions {
            if p.probs.len() != num_classes || p.label >= num_classes {
                return Err(Error::Input(format!(
                    "{}: expected {num_classes} probabilities and a label below it",
                    p.path
                )));
            }
        }
        let k5 = num_classes.min(5);
        let mut acc: BTreeMap<usize, (usize, usize, usize, f64)> = BTreeMap::new();
        for p in &predictions {
            let e = acc.entry(p.label).or_default();
            e.0 += 1;
            e.1 += topk_hit(&p.probs, p.label, 1) as usize;
            e.2 += topk_hit(&p.probs, p.label, k5) as usize;
            e.3 += p.conf_true();
        }
        for c in 0..num_classes {
            if !acc.contains_key(&c) {
                log::warn!("class={c} has no test images; omitted from per-class table");
            }
        }
        let n = predictions.len() as f64;
        let top1 = acc.values().map(|e| e.1).sum::<usize>() as f64 / n;
        let top5 = acc.values().map(|e| e.2).sum::<usize>() as f64 / n;
        let per_class = acc
            .into_iter()
            .map(|(c, (count, h1, h5, conf))| {
                let m = count as f64;
                (
                    c,
                    ClassStats {
                        count,
                        top1: h1 as f64 / m,
                        top5: h5 as f64 / m,
                        mean_confidence: conf / m,
                    },
                )
            })
            .collect();
        Ok(Self {
            num_classes,
            predictions,
            top1,
            top5,
            per_class,
        })
    }

    /// Writes `image_path,label,pred,conf_true_label`; labels are mapped
    /// through `class_ids`.
    pub fn write_predictions_csv(&self, path: &Path, class_ids: &[u32]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image_path", "label", "pred", "conf_true_label"])?;
        for p in &self.predictions {
            w.write_record([
                p.path.clone(),
                class_ids[p.label].to_string(),
                class_ids[p.pred()].to_string(),
                p.conf_true().to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_summary_csv(&self, path: &Path, class_ids: &[u32]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["segment_id", "count", "top1", "top5", "mean_confidence"])?;
        for (c, s) in &self.per_class {
            w.write_record([
                class_ids[*c].to_string(),
                s.count.to_string(),
                s.top1.to_string(),
                s.top5.to_string(),
                s.mean_confidence.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub fn evaluate<T: Scalar>(model: &Model<T>, test: &[LabeledImage]) -> Result<EvalResult> {
    let n = model.config().input_size;
    let predictions = test
        .iter()
        .map(|item| {
            let out = model.forward(&input_tensor::<T>(&item.image, n))?;
            Ok(Prediction {
                path: item.path.clone(),
                label: item.label,
                probs: out.probs,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalResult::from_predictions(model.num_classes(), predictions)
}
