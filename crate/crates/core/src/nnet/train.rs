//! Mini-batch SGD with cross-entropy loss.

use std::time::Instant;

use image::imageops::{self, FilterType};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::eval::evaluate;
use super::{softmax, Model, Scalar, Tensor};
use crate::corpus::augment;
use crate::error::{Error, Result};

/// One image with its class index in `0..num_classes`.
#[derive(Clone, Debug)]
pub struct LabeledImage {
    pub path: String,
    pub image: RgbImage,
    pub label: usize,
}

impl LabeledImage {
    pub fn new(path: impl Into<String>, image: RgbImage, label: usize) -> Self {
        Self {
            path: path.into(),
            image,
            label,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub augment: bool,
    /// First epoch to run; a resumed run passes the checkpoint's epoch.
    pub start_epoch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
            augment: true,
            start_epoch: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub test_top1: Option<f64>,
    pub test_top5: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// `-ln p_label` computed from logits.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    let p = softmax(logits)?;
    Ok(-p[label].max(f64::MIN_POSITIVE).ln())
}

/// Converts an image to a network input, resizing when needed.
pub(crate) fn input_tensor<T: Scalar>(img: &RgbImage, size: usize) -> Tensor<T> {
    if img.width() as usize == size && img.height() as usize == size {
        Tensor::from_rgb(img)
    } else {
        let resized = imageops::resize(img, size as u32, size as u32, FilterType::Triangle);
        Tensor::from_rgb(&resized)
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Runs one batch: forward, loss and accumulated mean gradient.
fn batch_step<T: Scalar>(
    model: &Model<T>,
    grad: &mut Model<T>,
    batch: &[usize],
    data: &[LabeledImage],
    rng: &mut ChaCha8Rng,
    do_augment: bool,
) -> Result<f64> {
    let n = model.config().input_size;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    for &i in batch {
        let item = &data[i];
        let x = if do_augment {
            input_tensor::<T>(&augment(&item.image, rng), n)
        } else {
            input_tensor::<T>(&item.image, n)
        };
        let (logits, trace) = model.forward_trace(&x)?;
        let logits: Vec<f64> = logits.into_iter().map(Scalar::as_f64).collect();
        let probs = softmax(&logits)?;
        loss += -probs[item.label].max(f64::MIN_POSITIVE).ln();
        let g: Vec<T> = probs
            .iter()
            .enumerate()
            .map(|(c, p)| T::from_f64_lossy((p - if c == item.label { 1.0 } else { 0.0 }) * scale))
            .collect();
        model.backward(&trace, &g, grad);
    }
    Ok(loss * scale)
}

/// Trains in place. Each epoch draws its shuffle and augmentations from a
/// stream keyed by `(seed, epoch)`, so resuming at `start_epoch` reproduces
/// the uninterrupted run exactly.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    data: &[LabeledImage],
    test: Option<&[LabeledImage]>,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if !(config.lr >= 0.0 && config.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be finite and non-negative, got {}", config.lr)));
    }
    if config.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let s = model.num_classes();
    if let Some(bad) = data.iter().find(|d| d.label >= s) {
        return Err(Error::Input(format!("{}: label {} out of range for {s} classes", bad.path, bad.label)));
    }
    let start = Instant::now();
    let mut report = TrainReport::default();
    let neg_lr = T::from_f64_lossy(-config.lr);
    for epoch in config.start_epoch..config.epochs {
        let t0 = Instant::now();
        let mut rng = epoch_rng(config.seed, epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut grad = model.zeros_like();
            let loss = batch_step(model, &mut grad, batch, data, &mut rng, config.augment).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {b}: {m}")),
                e => e,
            })?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {loss} at epoch {epoch}, batch {b}")));
            }
            total += loss * batch.len() as f64;
            model.add_scaled(&grad, neg_lr);
            if !model.all_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite parameters after epoch {epoch}, batch {b}"
                )));
            }
        }
        let (test_top1, test_top5) = match test {
            Some(t) if !t.is_empty() => {
                let r = evaluate(model, t)?;
                (Some(r.top1), Some(r.top5))
            }
            _ => (None, None),
        };
        let stats = EpochStats {
            epoch,
            train_loss: total / data.len() as f64,
            test_top1,
            test_top5,
            seconds: t0.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch={} train_loss={:.6} test_top1={:?} test_top5={:?} seconds={:.2}",
            stats.epoch,
            stats.train_loss,
            stats.test_top1,
            stats.test_top5,
            stats.seconds
        );
        report.epochs.push(stats);
    }
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}
