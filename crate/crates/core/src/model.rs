//! Multilayer perceptron with ReLU hidden layers, softmax output and exact
//! backpropagation of the per-sample cross-entropy loss.
//!
//! Parameters are laid out layer by layer: the weight matrix in row-major
//! order (`out x in`) followed by the bias vector.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot_slices, ParamVector};
use crate::rng::{self, Purpose};

/// Smallest probability fed to `ln` in the loss.
pub const PROB_FLOOR: f64 = 1e-15;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    layer_sizes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Example { features, label }
    }
}

impl MlpSpec {
    /// `layer_sizes` runs from the input dimension to the number of classes.
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidSpec(format!(
                "need at least 2 layers, got {}",
                layer_sizes.len()
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::InvalidSpec("layer sizes must be positive".into()));
        }
        if *layer_sizes.last().unwrap() < 2 {
            return Err(Error::InvalidSpec("need at least 2 classes".into()));
        }
        Ok(MlpSpec { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(weight_offset, bias_offset, fan_in, fan_out)` for each layer.
    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize, usize)> + '_ {
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let weights = offset;
            let biases = weights + fan_in * fan_out;
            offset = biases + fan_out;
            (weights, biases, fan_in, fan_out)
        })
    }

    fn check_params(&self, w: &ParamVector) -> Result<()> {
        if w.len() != self.num_params() {
            return Err(Error::DimensionMismatch {
                left: w.len(),
                right: self.num_params(),
            });
        }
        Ok(())
    }

    fn check_features(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                left: x.len(),
                right: self.input_dim(),
            });
        }
        Ok(())
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.num_classes() {
            return Err(Error::ClassOutOfRange {
                class: label,
                num_classes: self.num_classes(),
            });
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(spec: &MlpSpec, seed: u64) -> ParamVector {
    let mut rng = rng::stream(seed, Purpose::Init, &[]);
    let mut w = vec![0.0; spec.num_params()];
    for (weights, biases, fan_in, fan_out) in spec.layers() {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut w[weights..biases] {
            *v = rng.random_range(-a..=a);
        }
    }
    ParamVector::from(w)
}

pub(crate) fn softmax_in_place(logits: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    for z in logits.iter_mut() {
        *z /= sum;
    }
}

/// Activations of every layer; the last entry holds the softmax output.
fn forward_trace(spec: &MlpSpec, w: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
    let n_layers = spec.layer_sizes.len() - 1;
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
    acts.push(x.to_vec());
    for (l, (weights, biases, fan_in, fan_out)) in spec.layers().enumerate() {
        let input = &acts[l];
        let mut out = Vec::with_capacity(fan_out);
        for o in 0..fan_out {
            let row = &w[weights + o * fan_in..weights + (o + 1) * fan_in];
            out.push(dot_slices(row, input) + w[biases + o]);
        }
        if l + 1 == n_layers {
            softmax_in_place(&mut out);
        } else {
            for v in &mut out {
                *v = v.max(0.0);
            }
        }
        acts.push(out);
    }
    acts
}

/// Class probabilities for one input.
pub fn forward(spec: &MlpSpec, w: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    spec.check_params(w)?;
    spec.check_features(x)?;
    Ok(forward_trace(spec, w.as_slice(), x).pop().unwrap())
}

fn example_loss(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Mean cross-entropy over a batch.
pub fn loss(spec: &MlpSpec, w: &ParamVector, batch: &[Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("loss needs at least one example"));
    }
    let mut total = 0.0;
    for ex in batch {
        spec.check_label(ex.label)?;
        let probs = forward(spec, w, &ex.features)?;
        total += example_loss(&probs, ex.label);
    }
    Ok(total / batch.len() as f64)
}

/// Loss and gradient of one example's cross-entropy.
pub fn loss_and_gradient(
    spec: &MlpSpec,
    w: &ParamVector,
    ex: &Example,
) -> Result<(f64, ParamVector)> {
    spec.check_params(w)?;
    spec.check_features(&ex.features)?;
    spec.check_label(ex.label)?;
    let w = w.as_slice();
    let acts = forward_trace(spec, w, &ex.features);
    let probs = acts.last().unwrap();
    let loss = example_loss(probs, ex.label);

    let mut grad = vec![0.0; w.len()];
    // Fused softmax + cross-entropy: dL/dz = p - onehot(label).
    let mut delta = probs.clone();
    delta[ex.label] -= 1.0;

    let layers: Vec<_> = spec.layers().collect();
    for (l, &(weights, biases, fan_in, fan_out)) in layers.iter().enumerate().rev() {
        let input = &acts[l];
        for o in 0..fan_out {
            let d = delta[o];
            grad[biases + o] = d;
            if d != 0.0 {
                let row = &mut grad[weights + o * fan_in..weights + (o + 1) * fan_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g = d * a;
                }
            }
        }
        if l == 0 {
            break;
        }
        let mut prev = vec![0.0; fan_in];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &w[weights + o * fan_in..weights + (o + 1) * fan_in];
            for (p, wv) in prev.iter_mut().zip(row) {
                *p += wv * d;
            }
        }
        // ReLU derivative, taken as 0 at the kink.
        for (p, a) in prev.iter_mut().zip(input) {
            if *a <= 0.0 {
                *p = 0.0;
            }
        }
        delta = prev;
    }
    Ok((loss, ParamVector::from(grad)))
}

pub fn per_sample_gradient(spec: &MlpSpec, w: &ParamVector, ex: &Example) -> Result<ParamVector> {
    loss_and_gradient(spec, w, ex).map(|(_, g)| g)
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

pub fn predict(spec: &MlpSpec, w: &ParamVector, x: &[f64]) -> Result<usize> {
    forward(spec, w, x).map(|p| argmax(&p))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_params(spec: &MlpSpec, rng: &mut ChaCha8Rng) -> ParamVector {
        ParamVector::from(
            (0..spec.num_params())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect::<Vec<_>>(),
        )
    }

    fn random_example(spec: &MlpSpec, rng: &mut ChaCha8Rng) -> Example {
        Example::new(
            (0..spec.input_dim())
                .map(|_| rng.random_range(0.0..1.0))
                .collect(),
            rng.random_range(0..spec.num_classes()),
        )
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![4]).is_err());
        assert!(MlpSpec::new(vec![4, 1]).is_err());
        assert!(MlpSpec::new(vec![4, 0, 2]).is_err());
        assert_eq!(MlpSpec::new(vec![4, 3, 2]).unwrap().num_params(), 23);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let spec = MlpSpec::new(vec![4, 3, 2]).unwrap();
        let a = init_params(&spec, 11);
        let b = init_params(&spec, 11);
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(a.len(), 23);
        for (_, biases, _, fan_out) in spec.layers() {
            assert!(a.as_slice()[biases..biases + fan_out]
                .iter()
                .all(|&v| v == 0.0));
        }
        let bound = (6.0f64 / 7.0).sqrt();
        assert!(a.as_slice()[..12].iter().all(|v| v.abs() <= bound));
        assert_ne!(a.to_bits(), init_params(&spec, 12).to_bits());
    }

    #[test]
    fn zero_weights_give_uniform_output_and_class_zero() {
        let spec = MlpSpec::new(vec![3, 4, 5]).unwrap();
        let w = ParamVector::zeros(spec.num_params());
        let p = forward(&spec, &w, &[0.2, 0.9, 0.4]).unwrap();
        for v in &p {
            assert!((v - 0.2).abs() < 1e-15);
        }
        assert_eq!(predict(&spec, &w, &[0.5, 0.5, 0.5]).unwrap(), 0);
    }

    #[test]
    fn outputs_sum_to_one() {
        let spec = MlpSpec::new(vec![6, 5, 4]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let w = random_params(&spec, &mut rng);
            let ex = random_example(&spec, &mut rng);
            let p = forward(&spec, &w, &ex.features).unwrap();
            let s: f64 = p.iter().sum();
            assert!((s - 1.0).abs() <= 1e-12);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn softmax_survives_large_logits() {
        let mut logits = vec![1000.0, 0.0];
        softmax_in_place(&mut logits);
        assert!(logits.iter().all(|v| v.is_finite()));
        assert!((logits[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn final_bias_shift_leaves_probabilities_unchanged() {
        let spec = MlpSpec::new(vec![5, 4, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = random_params(&spec, &mut rng);
        let x = random_example(&spec, &mut rng).features;
        let (_, biases, _, fan_out) = spec.layers().last().unwrap();
        let mut shifted = w.clone();
        for b in &mut shifted.as_mut_slice()[biases..biases + fan_out] {
            *b += 3.25;
        }
        let p = forward(&spec, &w, &x).unwrap();
        let q = forward(&spec, &shifted, &x).unwrap();
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let spec = MlpSpec::new(vec![2, 10]).unwrap();
        let w = ParamVector::zeros(spec.num_params());
        let batch = vec![Example::new(vec![0.1, 0.2], 3)];
        assert!((loss(&spec, &w, &batch).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((loss(&spec, &w, &batch).unwrap() - std::f64::consts::LN_10).abs() < 1e-9);
        assert!(matches!(loss(&spec, &w, &[]), Err(Error::EmptyBatch(_))));

        // ŷ[label] saturates to 1 with a huge bias on the label's logit.
        let spec2 = MlpSpec::new(vec![1, 2]).unwrap();
        let w2 = ParamVector::from(vec![0.0, 0.0, 800.0, 0.0]);
        assert_eq!(
            loss(&spec2, &w2, &[Example::new(vec![0.0], 0)]).unwrap(),
            0.0
        );
        // And the floor keeps the wrong-label loss finite.
        let l = loss(&spec2, &w2, &[Example::new(vec![0.0], 1)]).unwrap();
        assert!((l - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn batch_loss_is_mean_of_single_losses() {
        let spec = MlpSpec::new(vec![6, 5, 3]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let w = random_params(&spec, &mut rng);
        let batch: Vec<_> = (0..7).map(|_| random_example(&spec, &mut rng)).collect();
        let singles: f64 = batch
            .iter()
            .map(|ex| loss(&spec, &w, std::slice::from_ref(ex)).unwrap())
            .sum::<f64>()
            / batch.len() as f64;
        assert!((loss(&spec, &w, &batch).unwrap() - singles).abs() <= 1e-12);
        let pair = &batch[..2];
        let l1 = loss(&spec, &w, &pair[..1]).unwrap();
        let l2 = loss(&spec, &w, &pair[1..]).unwrap();
        assert!((loss(&spec, &w, pair).unwrap() - (l1 + l2) / 2.0).abs() <= 1e-12);
    }

    #[test]
    fn zero_net_output_delta_is_closed_form() {
        let spec = MlpSpec::new(vec![3, 4]).unwrap();
        let w = ParamVector::zeros(spec.num_params());
        let ex = Example::new(vec![0.5, 0.25, 1.0], 2);
        let g = per_sample_gradient(&spec, &w, &ex).unwrap();
        assert_eq!(g.len(), spec.num_params());
        let bias_grad = &g.as_slice()[12..16];
        for (k, &b) in bias_grad.iter().enumerate() {
            let expected = 0.25 - if k == 2 { 1.0 } else { 0.0 };
            assert!((b - expected).abs() < 1e-15);
        }
        // Weight gradient is the outer product of the delta with the input.
        assert!((g[2 * 3 + 2] - (0.25 - 1.0) * 1.0).abs() < 1e-15);
    }

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(argmax(&[0.1, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn dimension_errors() {
        let spec = MlpSpec::new(vec![3, 2]).unwrap();
        let w = ParamVector::zeros(spec.num_params());
        assert!(forward(&spec, &w, &[0.0; 4]).is_err());
        assert!(forward(&spec, &ParamVector::zeros(3), &[0.0; 3]).is_err());
        assert!(per_sample_gradient(&spec, &w, &Example::new(vec![0.0; 3], 2)).is_err());
    }
}
