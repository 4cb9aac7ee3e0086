//! Finite-difference verification of the backward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{softmax, Model, Tensor};
use crate::error::{Error, Result};

const STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared in absolute terms.
const FLOOR: f64 = 1e-6;

/// Which parameters a check may probe.
#[derive(Clone, Debug, PartialEq)]
pub enum ProbeScope {
    All,
    HeadOnly,
    /// Tensors whose name starts with the given prefix.
    Prefix(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<Probe>,
    /// Draws rejected because the two perturbed evaluations saw different
    /// ReLU activation patterns.
    pub skipped_kinks: usize,
    pub max_rel_error: f64,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn loss_and_pattern(model: &Model<f64>, x: &Tensor<f64>, label: usize) -> Result<(f64, Vec<bool>)> {
    let (logits, trace) = model.forward_trace(x)?;
    let p = softmax(&logits)?;
    Ok((-p[label].ln(), Model::activation_pattern(&trace)))
}

/// Compares analytic cross-entropy gradients with central differences at
/// `num_probes` randomly drawn parameters. A tensor is drawn uniformly
/// among those in scope, then an element uniformly within it.
pub fn grad_check(
    model: &Model<f64>,
    x: &Tensor<f64>,
    label: usize,
    num_probes: usize,
    scope: &ProbeScope,
    seed: u64,
) -> Result<GradCheckReport> {
    if label >= model.num_classes() {
        return Err(Error::Input(format!("label {label} out of range")));
    }
    let (logits, trace) = model.forward_trace(x)?;
    let probs = softmax(&logits)?;
    let g: Vec<f64> = probs
        .iter()
        .enumerate()
        .map(|(c, p)| p - if c == label { 1.0 } else { 0.0 })
        .collect();
    let mut grad = model.zeros_like();
    model.backward(&trace, &g, &mut grad);

    let names = model.tensor_names();
    let candidates: Vec<usize> = names
        .iter()
        .enumerate()
        .filter(|(_, n)| match scope {
            ProbeScope::All => true,
            ProbeScope::HeadOnly => n.starts_with("head."),
            ProbeScope::Prefix(p) => n.starts_with(p.as_str()),
        })
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(Error::Config(format!("no parameters match {scope:?}")));
    }
    let analytic = grad.tensors();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probes = Vec::with_capacity(num_probes);
    let mut skipped_kinks = 0;
    let max_draws = num_probes * 50 + 100;
    let mut draws = 0;
    while probes.len() < num_probes {
        draws += 1;
        if draws > max_draws {
            return Err(Error::Numeric(format!(
                "only {} of {num_probes} probes avoided activation kinks",
                probes.len()
            )));
        }
        let t = candidates[rng.random_range(0..candidates.len())];
        let len = analytic[t].len();
        let index = rng.random_range(0..len);
        let mut plus = model.clone();
        plus.tensors_mut()[t][index] += STEP;
        let mut minus = model.clone();
        minus.tensors_mut()[t][index] -= STEP;
        let (lp, pat_p) = loss_and_pattern(&plus, x, label)?;
        let (lm, pat_m) = loss_and_pattern(&minus, x, label)?;
        if pat_p != pat_m {
            skipped_kinks += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * STEP);
        let a = analytic[t][index];
        probes.push(Probe {
            tensor: names[t].clone(),
            index,
            analytic: a,
            numeric,
            rel_error: relative_error(a, numeric),
        });
    }
    let max_rel_error = probes.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes,
        skipped_kinks,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::ModelConfig;

    fn input(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(3, n, n, (0..3 * n * n).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn config(channels: Vec<usize>, blocks: Vec<usize>, n: usize, bias: bool) -> ModelConfig {
        ModelConfig {
            input_size: n,
            stage_channels: channels,
            blocks_per_stage: blocks,
            num_classes: 4,
            head_bias: bias,
        }
    }

    #[test]
    fn head_only_is_tight() {
        let m = Model::<f64>::new(config(vec![4, 6], vec![1, 1], 8, true), 3).unwrap();
        let r = grad_check(&m, &input(8, 1), 2, 30, &ProbeScope::HeadOnly, 0).unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
        assert!(r.probes.iter().all(|p| p.tensor.starts_with("head.")));
    }

    #[test]
    fn architecture_matrix() {
        let cases = [
            config(vec![4], vec![1], 6, false),
            config(vec![3, 5], vec![2, 1], 9, false),
            config(vec![4, 4, 6], vec![1, 1, 2], 12, true),
        ];
        for (i, c) in cases.into_iter().enumerate() {
            let n = c.input_size;
            let m = Model::<f64>::new(c, i as u64).unwrap();
            let r = grad_check(&m, &input(n, 10 + i as u64), i % 4, 60, &ProbeScope::All, i as u64).unwrap();
            assert!(r.max_rel_error < 1e-4, "case {i}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn zero_image_stem_bias() {
        // Freshly initialized biases are zero, which would put every stem
        // unit exactly on its ReLU kink for a zero image.
        let mut m = Model::<f64>::new(config(vec![4, 6], vec![1, 1], 8, false), 5).unwrap();
        m.stem.bias = vec![0.3, -0.2, 0.1, 0.25];
        let zero = Tensor::zeros(3, 8, 8);
        let r = grad_check(&m, &zero, 1, 8, &ProbeScope::Prefix("stem.bias".into()), 2).unwrap();
        assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-3).abs() < 1e-15);
    }
}
