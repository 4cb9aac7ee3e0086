//! Miniature residual CNN written from scratch.
//!
//! Architecture: a 3x3 stem convolution, then stages of identity-skip
//! residual blocks (`relu(x + conv(relu(conv(x))))`). Every stage after the
//! first opens with a stride-2 transition convolution that changes the
//! channel count. The last block's output is the feature map stack used for
//! class activation maps; it is globally average pooled and fed to a linear
//! head whose weight matrix is `num_classes x K`.

mod checkpoint;
mod eval;
mod gradcheck;
mod layers;
mod tensor;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use eval::{evaluate, topk_hit, ClassStats, EvalResult, Prediction};
pub use gradcheck::{grad_check, GradCheckReport, Probe, ProbeScope};
pub use layers::Conv;
pub use tensor::{Scalar, Tensor};
pub use train::{cross_entropy, train, EpochStats, LabeledImage, TrainConfig, TrainReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub input_size: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub num_classes: usize,
    /// Adds a bias to the linear head. Class activation maps ignore it.
    pub head_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: 224,
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            num_classes: 2,
            head_bias: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be at least 2".into()));
        }
        if self.input_size == 0 {
            return Err(Error::Config("input_size must be positive".into()));
        }
        if self.stage_channels.is_empty() || self.stage_channels.len() != self.blocks_per_stage.len() {
            return Err(Error::Config(format!(
                "stage_channels ({}) and blocks_per_stage ({}) must be non-empty and of equal length",
                self.stage_channels.len(),
                self.blocks_per_stage.len()
            )));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("stage channel counts must be positive".into()));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::Config(
                "every stage needs at least one identity-skip residual block".into(),
            ));
        }
        Ok(())
    }

    /// Spatial side of the last feature maps.
    pub fn feature_size(&self) -> usize {
        let mut n = self.input_size;
        for _ in 1..self.stage_channels.len() {
            n = n.div_ceil(2);
        }
        n
    }

    /// Channel count `K` of the last feature maps.
    pub fn feature_channels(&self) -> usize {
        *self.stage_channels.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub conv1: Conv<T>,
    pub conv2: Conv<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage<T> {
    pub transition: Option<Conv<T>>,
    pub blocks: Vec<Block<T>>,
}

/// Network parameters. A zeroed `Model` also serves as a gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub stem: Conv<T>,
    pub stages: Vec<Stage<T>>,
    /// Row-major `num_classes x K` head weights.
    pub head_weight: Vec<T>,
    pub head_bias: Option<Vec<T>>,
}

/// Output of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardResult {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    /// Last-stage feature maps, `K x h x w`.
    pub features: Tensor<f64>,
}

/// Numerically stable softmax. Rejects non-finite logits.
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::Numeric("softmax of an empty vector".into()));
    }
    if let Some(bad) = logits.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit {bad}")));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Intermediate activations kept for the backward pass.
pub(crate) struct Trace<T> {
    input: Tensor<T>,
    stem_pre: Tensor<T>,
    stages: Vec<StageTrace<T>>,
    features: Tensor<T>,
    gap: Vec<T>,
}

struct StageTrace<T> {
    transition: Option<(Tensor<T>, Tensor<T>)>,
    blocks: Vec<BlockTrace<T>>,
}

struct BlockTrace<T> {
    input: Tensor<T>,
    pre1: Tensor<T>,
    act1: Tensor<T>,
    sum_pre: Tensor<T>,
}

fn relu_of<T: Scalar>(pre: &Tensor<T>) -> Tensor<T> {
    let mut t = pre.clone();
    t.relu_inplace();
    t
}

fn mask_grad<T: Scalar>(g: &mut Tensor<T>, pre: &Tensor<T>) {
    for (gv, p) in g.data.iter_mut().zip(&pre.data) {
        if *p <= T::zero() {
            *gv = T::zero();
        }
    }
}

impl<T: Scalar> Model<T> {
    /// Seeded He initialization. The second convolution of every residual
    /// branch starts at half scale and the head at a small scale.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv::he(3, config.stage_channels[0], 1, 1.0, &mut rng);
        let mut stages = Vec::with_capacity(config.stage_channels.len());
        let mut prev = config.stage_channels[0];
        for (s, (&ch, &nb)) in config.stage_channels.iter().zip(&config.blocks_per_stage).enumerate() {
            let transition = (s > 0).then(|| Conv::he(prev, ch, 2, 1.0, &mut rng));
            let blocks = (0..nb)
                .map(|_| Block {
                    conv1: Conv::he(ch, ch, 1, 1.0, &mut rng),
                    conv2: Conv::he(ch, ch, 1, 0.5, &mut rng),
                })
                .collect();
            stages.push(Stage { transition, blocks });
            prev = ch;
        }
        let k = config.feature_channels();
        let head_std = 1.0 / (k as f64).sqrt() * 0.1;
        let head_weight = (0..config.num_classes * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                T::from_f64_lossy(z * head_std)
            })
            .collect();
        let head_bias = config.head_bias.then(|| vec![T::zero(); config.num_classes]);
        Ok(Self {
            config,
            stem,
            stages,
            head_weight,
            head_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    /// Row `c` of the head weight matrix.
    pub fn head_row(&self, c: usize) -> &[T] {
        let k = self.config.feature_channels();
        &self.head_weight[c * k..(c + 1) * k]
    }

    pub fn zero_head(&mut self) {
        self.head_weight.iter_mut().for_each(|v| *v = T::zero());
        if let Some(b) = &mut self.head_bias {
            b.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Same architecture with every parameter set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut m = self.clone();
        for t in m.tensors_mut() {
            t.iter_mut().for_each(|v| *v = T::zero());
        }
        m
    }

    /// Parameter tensors in declaration order.
    pub fn tensors(&self) -> Vec<&[T]> {
        let mut out: Vec<&[T]> = vec![&self.stem.weight, &self.stem.bias];
        for st in &self.stages {
            if let Some(t) = &st.transition {
                out.push(&t.weight);
                out.push(&t.bias);
            }
            for b in &st.blocks {
                out.extend([&b.conv1.weight[..], &b.conv1.bias, &b.conv2.weight, &b.conv2.bias]);
            }
        }
        out.push(&self.head_weight);
        if let Some(b) = &self.head_bias {
            out.push(b);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = vec![&mut self.stem.weight, &mut self.stem.bias];
        for st in &mut self.stages {
            if let Some(t) = &mut st.transition {
                out.push(&mut t.weight);
                out.push(&mut t.bias);
            }
            for b in &mut st.blocks {
                out.push(&mut b.conv1.weight);
                out.push(&mut b.conv1.bias);
                out.push(&mut b.conv2.weight);
                out.push(&mut b.conv2.bias);
            }
        }
        out.push(&mut self.head_weight);
        if let Some(b) = &mut self.head_bias {
            out.push(b);
        }
        out
    }

    /// Names matching [`Model::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = vec!["stem.weight".to_string(), "stem.bias".to_string()];
        for (s, st) in self.stages.iter().enumerate() {
            if st.transition.is_some() {
                out.push(format!("stage{s}.transition.weight"));
                out.push(format!("stage{s}.transition.bias"));
            }
            for b in 0..st.blocks.len() {
                for p in ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"] {
                    out.push(format!("stage{s}.block{b}.{p}"));
                }
            }
        }
        out.push("head.weight".into());
        if self.head_bias.is_some() {
            out.push("head.bias".into());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Model<T>, scale: T) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * *s;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let conv = |c: &Conv<T>| c.cast::<U>();
        Model {
            config: self.config.clone(),
            stem: conv(&self.stem),
            stages: self
                .stages
                .iter()
                .map(|st| Stage {
                    transition: st.transition.as_ref().map(conv),
                    blocks: st
                        .blocks
                        .iter()
                        .map(|b| Block {
                            conv1: conv(&b.conv1),
                            conv2: conv(&b.conv2),
                        })
                        .collect(),
                })
                .collect(),
            head_weight: self.head_weight.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
            head_bias: self
                .head_bias
                .as_ref()
                .map(|b| b.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect()),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let n = self.config.input_size;
        if x.channels != 3 || x.height != n || x.width != n {
            return Err(Error::Input(format!(
                "expected 3x{n}x{n} input, got {}x{}x{}",
                x.channels, x.height, x.width
            )));
        }
        Ok(())
    }

    pub(crate) fn forward_trace(&self, x: &Tensor<T>) -> Result<(Vec<T>, Trace<T>)> {
        self.check_input(x)?;
        let stem_pre = self.stem.forward(x);
        let mut cur = relu_of(&stem_pre);
        let mut stages = Vec::with_capacity(self.stages.len());
        for st in &self.stages {
            let transition = st.transition.as_ref().map(|t| {
                let pre = t.forward(&cur);
                let input = std::mem::replace(&mut cur, relu_of(&pre));
                (input, pre)
            });
            let mut blocks = Vec::with_capacity(st.blocks.len());
            for b in &st.blocks {
                let pre1 = b.conv1.forward(&cur);
                let act1 = relu_of(&pre1);
                let mut sum_pre = b.conv2.forward(&act1);
                for (s, x) in sum_pre.data.iter_mut().zip(&cur.data) {
                    *s += *x;
                }
                let out = relu_of(&sum_pre);
                let input = std::mem::replace(&mut cur, out);
                blocks.push(BlockTrace {
                    input,
                    pre1,
                    act1,
                    sum_pre,
                });
            }
            stages.push(StageTrace { transition, blocks });
        }
        let features = cur;
        let area = T::from_usize(features.height * features.width).unwrap();
        let gap: Vec<T> = (0..features.channels)
            .map(|k| features.plane(k).iter().copied().sum::<T>() / area)
            .collect();
        let k = gap.len();
        let logits = (0..self.config.num_classes)
            .map(|c| {
                let row = &self.head_weight[c * k..(c + 1) * k];
                let mut z = row.iter().zip(&gap).map(|(w, g)| *w * *g).sum::<T>();
                if let Some(b) = &self.head_bias {
                    z += b[c];
                }
                z
            })
            .collect();
        Ok((
            logits,
            Trace {
                input: x.clone(),
                stem_pre,
                stages,
                features,
                gap,
            },
        ))
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<ForwardResult> {
        let (logits, trace) = self.forward_trace(x)?;
        let logits: Vec<f64> = logits.into_iter().map(Scalar::as_f64).collect();
        let probs = softmax(&logits)?;
        Ok(ForwardResult {
            logits,
            probs,
            features: trace.features.cast(),
        })
    }

    /// Sign pattern of every ReLU input; used to detect finite-difference
    /// probes that straddle a kink.
    pub(crate) fn activation_pattern(trace: &Trace<T>) -> Vec<bool> {
        let mut out = Vec::new();
        let mut push = |t: &Tensor<T>| out.extend(t.data.iter().map(|v| *v > T::zero()));
        push(&trace.stem_pre);
        for st in &trace.stages {
            if let Some((_, pre)) = &st.transition {
                push(pre);
            }
            for b in &st.blocks {
                push(&b.pre1);
                push(&b.sum_pre);
            }
        }
        out
    }

    /// Backpropagates `d loss / d logits` through a recorded trace,
    /// accumulating into `grad`.
    pub(crate) fn backward(&self, trace: &Trace<T>, g_logits: &[T], grad: &mut Model<T>) {
        let k = trace.gap.len();
        let mut g_gap = vec![T::zero(); k];
        for (c, &gz) in g_logits.iter().enumerate() {
            let row = &self.head_weight[c * k..(c + 1) * k];
            let grow = &mut grad.head_weight[c * k..(c + 1) * k];
            for j in 0..k {
                grow[j] += gz * trace.gap[j];
                g_gap[j] += gz * row[j];
            }
            if let Some(b) = &mut grad.head_bias {
                b[c] += gz;
            }
        }
        let f = &trace.features;
        let area = T::from_usize(f.height * f.width).unwrap();
        let mut g = Tensor::zeros(f.channels, f.height, f.width);
        for j in 0..k {
            let v = g_gap[j] / area;
            g.plane_mut(j).iter_mut().for_each(|x| *x = v);
        }
        for (s, st) in self.stages.iter().enumerate().rev() {
            let st_trace = &trace.stages[s];
            for (b, blk) in st.blocks.iter().enumerate().rev() {
                let bt = &st_trace.blocks[b];
                mask_grad(&mut g, &bt.sum_pre);
                let gblk = &mut grad.stages[s].blocks[b];
                let mut g_a1 = blk.conv2.backward(&bt.act1, &g, &mut gblk.conv2);
                mask_grad(&mut g_a1, &bt.pre1);
                let g_x = blk.conv1.backward(&bt.input, &g_a1, &mut gblk.conv1);
                for (a, b) in g.data.iter_mut().zip(&g_x.data) {
                    *a += *b;
                }
            }
            if let (Some(t), Some((input, pre))) = (&st.transition, &st_trace.transition) {
                mask_grad(&mut g, pre);
                g = t.backward(input, &g, grad.stages[s].transition.as_mut().unwrap());
            }
        }
        mask_grad(&mut g, &trace.stem_pre);
        self.stem.backward(&trace.input, &g, &mut grad.stem);
    }
}
