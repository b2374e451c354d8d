//! Fully-connected multi-label classifier.
//!
//! Hidden layers are `affine + ReLU`, the output layer is `affine + sigmoid`
//! with one unit per active label. The head can grow as new labels arrive;
//! growing it never touches existing parameters.
//!
//! Weights are stored row-major with shape `(outputs, inputs)`.

use std::ops::Deref;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, streams, Rng};

/// Probability clamp applied inside every cross-entropy term.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    fn xavier(inputs: usize, outputs: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Dense {
            inputs,
            outputs,
            weights,
            biases: vec![0.0; outputs],
        }
    }

    fn affine(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(
            self.weights
                .chunks_exact(self.inputs)
                .zip(&self.biases)
                .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b),
        );
    }
}

/// Parameters of the classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    layers: Vec<Dense>,
}

/// Sigmoid outputs for the active labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionVector(pub Vec<f64>);

impl Deref for PredictionVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Per-label targets with a known mask. Entries outside the mask are ignored
/// by every loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetVector {
    pub values: Vec<f64>,
    pub known: Vec<bool>,
}

impl TargetVector {
    pub fn new(values: Vec<f64>, known: Vec<bool>) -> Result<Self> {
        if values.len() != known.len() {
            return Err(Error::DimensionMismatch {
                context: "target mask",
                expected: values.len(),
                got: known.len(),
            });
        }
        Ok(TargetVector { values, known })
    }

    /// Hard 0/1 targets, all known.
    pub fn from_labels(labels: &[bool]) -> Self {
        TargetVector {
            values: labels.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect(),
            known: vec![true; labels.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn known_count(&self) -> usize {
        self.known.iter().filter(|&&k| k).count()
    }

    /// First `n` entries. Used to match a target to the current head size.
    pub fn truncated(&self, n: usize) -> TargetVector {
        let n = n.min(self.len());
        TargetVector {
            values: self.values[..n].to_vec(),
            known: self.known[..n].to_vec(),
        }
    }

    /// Union of two masks over the same labels. Where both are known the
    /// value of `self` wins; the values agree when both come from ground truth.
    pub fn union(&self, other: &TargetVector) -> Result<TargetVector> {
        if self.len() != other.len() {
            return Err(Error::DimensionMismatch {
                context: "target union",
                expected: self.len(),
                got: other.len(),
            });
        }
        let mut out = self.clone();
        for i in 0..out.len() {
            if !out.known[i] && other.known[i] {
                out.known[i] = true;
                out.values[i] = other.values[i];
            }
        }
        Ok(out)
    }
}

/// Gradients congruent with a [`ModelState`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(model: &ModelState) -> Self {
        GradientSet {
            weights: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.weights.len()])
                .collect(),
            biases: model
                .layers
                .iter()
                .map(|l| vec![0.0; l.biases.len()])
                .collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }

    fn congruent_with(&self, model: &ModelState) -> bool {
        self.weights.len() == model.layers.len()
            && self.biases.len() == model.layers.len()
            && model
                .layers
                .iter()
                .zip(self.weights.iter().zip(&self.biases))
                .all(|(l, (w, b))| l.weights.len() == w.len() && l.biases.len() == b.len())
    }
}

/// One training example as seen by the loss.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub target: &'a TargetVector,
    /// Whether the distillation term applies to this example.
    pub distill: bool,
}

/// Which objective [`loss_and_gradients`] evaluates.
#[derive(Clone, Copy, Debug)]
pub enum LossSpec<'a> {
    MaskedBce,
    /// Masked BCE plus `weight` times the distillation loss against the
    /// teacher's probabilities on its own (old) labels.
    WithDistillation {
        teacher: &'a ModelState,
        weight: f64,
    },
}

/// Batch-mean loss split into its parts; `total = base + weight * distillation`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Loss {
    pub total: f64,
    pub base: f64,
    pub distillation: f64,
}

impl ModelState {
    /// Xavier-uniform weights, zero biases.
    pub fn new(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Shape(format!(
                "need at least an input and an output layer, got {} sizes",
                layer_sizes.len()
            )));
        }
        if let Some(pos) = layer_sizes.iter().position(|&s| s == 0) {
            return Err(Error::Shape(format!("layer {pos} has size 0")));
        }
        let mut rng = rng_for(seed, streams::MODEL_INIT);
        let layers = layer_sizes
            .windows(2)
            .map(|w| Dense::xavier(w[0], w[1], &mut rng))
            .collect();
        Ok(ModelState { layers })
    }

    /// Builds a model from explicit layers, checking that they chain.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("no layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.inputs == 0 || l.outputs == 0 {
                return Err(Error::Shape(format!("layer {i} has a zero dimension")));
            }
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::Shape(format!("layer {i} parameter count mismatch")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].outputs != w[1].inputs {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} values but layer {} expects {}",
                    w[0].outputs,
                    i + 1,
                    w[1].inputs
                )));
            }
        }
        Ok(ModelState { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_outputs(&self) -> usize {
        self.layers.last().map_or(0, |l| l.outputs)
    }

    pub fn num_parameters(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    pub fn parameters(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.biases.iter()).copied())
    }

    pub fn forward(&self, features: &[f64]) -> Result<PredictionVector> {
        self.check_input(features)?;
        let mut current = features.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.affine(&current, &mut next);
            if i == last {
                next.iter_mut().for_each(|z| *z = sigmoid(*z));
            } else {
                next.iter_mut().for_each(|z| *z = z.max(0.0));
            }
            std::mem::swap(&mut current, &mut next);
        }
        Ok(PredictionVector(current))
    }

    /// Adds `k_new` output units. Existing parameters are copied bit for bit.
    pub fn expand_output_head(&self, k_new: usize, seed: u64) -> Result<Self> {
        if k_new == 0 {
            return Err(Error::Shape(
                "head expansion needs at least one new unit".into(),
            ));
        }
        let mut out = self.clone();
        let head = out.layers.last_mut().expect("model has layers");
        let bound = (6.0 / (head.inputs + head.outputs + k_new) as f64).sqrt();
        let mut rng = rng_for(seed, streams::HEAD_EXPANSION + head.outputs as u64);
        head.weights
            .extend((0..k_new * head.inputs).map(|_| rng.random_range(-bound..bound)));
        head.biases.extend(std::iter::repeat_n(0.0, k_new));
        head.outputs += k_new;
        Ok(out)
    }

    /// Frozen copy used as a teacher.
    pub fn snapshot(&self) -> ModelState {
        self.clone()
    }

    /// `param -= learning_rate * grad` for every parameter.
    pub fn sgd_step(&mut self, grads: &GradientSet, learning_rate: f64) -> Result<()> {
        if !grads.congruent_with(self) {
            return Err(Error::Shape("gradient set does not match model".into()));
        }
        if !(learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        for (layer, (gw, gb)) in self
            .layers
            .iter_mut()
            .zip(grads.weights.iter().zip(&grads.biases))
        {
            layer
                .weights
                .iter_mut()
                .zip(gw)
                .for_each(|(w, g)| *w -= learning_rate * g);
            layer
                .biases
                .iter_mut()
                .zip(gb)
                .for_each(|(b, g)| *b -= learning_rate * g);
        }
        Ok(())
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                context: "model input",
                expected: self.input_dim(),
                got: features.len(),
            });
        }
        Ok(())
    }

    /// Post-activation values of every layer, input first.
    fn activations(&self, features: &[f64]) -> Vec<Vec<f64>> {
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(features.to_vec());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = Vec::with_capacity(layer.outputs);
            layer.affine(&acts[i], &mut z);
            if i == last {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            } else {
                z.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(z);
        }
        acts
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn cross_entropy(p: f64, target: f64) -> f64 {
    let p = clamp_prob(p);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// d/dz of the clamped cross-entropy through a sigmoid output. Zero on the
/// clamped plateau.
fn cross_entropy_logit_grad(p: f64, target: f64) -> f64 {
    if !(PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
        0.0
    } else {
        p - target
    }
}

/// Mean binary cross-entropy over the known entries; 0 if none are known.
pub fn masked_bce_loss(pred: &[f64], target: &TargetVector) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            context: "masked BCE",
            expected: target.len(),
            got: pred.len(),
        });
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&p, &y), &k) in pred.iter().zip(&target.values).zip(&target.known) {
        if k {
            sum += cross_entropy(p, y);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Cross-entropy of the student against the teacher's probabilities as soft
/// targets, averaged over the old labels. No temperature.
pub fn distillation_loss(student_old: &[f64], teacher_old: &[f64]) -> Result<f64> {
    if student_old.len() != teacher_old.len() {
        return Err(Error::DimensionMismatch {
            context: "distillation",
            expected: teacher_old.len(),
            got: student_old.len(),
        });
    }
    if teacher_old.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = student_old
        .iter()
        .zip(teacher_old)
        .map(|(&s, &t)| cross_entropy(s, t))
        .sum();
    Ok(sum / teacher_old.len() as f64)
}

/// Batch-mean loss and its gradient by hand-written backpropagation.
pub fn loss_and_gradients(
    model: &ModelState,
    batch: &[Example<'_>],
    spec: LossSpec<'_>,
) -> Result<(Loss, GradientSet)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let outputs = model.num_outputs();
    let (teacher, weight) = match spec {
        LossSpec::MaskedBce => (None, 0.0),
        LossSpec::WithDistillation { teacher, weight } => {
            if teacher.num_outputs() > outputs {
                return Err(Error::Shape(format!(
                    "teacher has {} outputs, student only {outputs}",
                    teacher.num_outputs()
                )));
            }
            if teacher.input_dim() != model.input_dim() {
                return Err(Error::DimensionMismatch {
                    context: "teacher input",
                    expected: model.input_dim(),
                    got: teacher.input_dim(),
                });
            }
            (Some(teacher), weight)
        }
    };

    let inv_batch = 1.0 / batch.len() as f64;
    let mut grads = GradientSet::zeros_like(model);
    let mut base_sum = 0.0;
    let mut distill_sum = 0.0;
    let mut delta = vec![0.0; outputs];
    let last = model.layers.len() - 1;

    for ex in batch {
        model.check_input(ex.features)?;
        if ex.target.len() != outputs {
            return Err(Error::DimensionMismatch {
                context: "target length",
                expected: outputs,
                got: ex.target.len(),
            });
        }
        let acts = model.activations(ex.features);
        let probs = &acts[last + 1];

        let known = ex.target.known_count();
        base_sum += masked_bce_loss(probs, ex.target)?;
        delta.iter_mut().for_each(|d| *d = 0.0);
        if known > 0 {
            let scale = inv_batch / known as f64;
            for j in 0..outputs {
                if ex.target.known[j] {
                    delta[j] = scale * cross_entropy_logit_grad(probs[j], ex.target.values[j]);
                }
            }
        }

        if let Some(teacher) = teacher.filter(|_| ex.distill) {
            let soft = teacher.forward(ex.features)?;
            let k_old = soft.len();
            distill_sum += distillation_loss(&probs[..k_old], &soft)?;
            if weight != 0.0 && k_old > 0 {
                let scale = weight * inv_batch / k_old as f64;
                for j in 0..k_old {
                    delta[j] += scale * cross_entropy_logit_grad(probs[j], soft[j]);
                }
            }
        }

        backprop(model, &acts, delta.clone(), &mut grads);
    }

    let base = base_sum * inv_batch;
    let distillation = distill_sum * inv_batch;
    let total = if teacher.is_some() {
        base + weight * distillation
    } else {
        base
    };
    Ok((
        Loss {
            total,
            base,
            distillation,
        },
        grads,
    ))
}

/// Accumulates parameter gradients for one example given the output-logit
/// gradient `delta`.
fn backprop(model: &ModelState, acts: &[Vec<f64>], mut delta: Vec<f64>, grads: &mut GradientSet) {
    for l in (0..model.layers.len()).rev() {
        let layer = &model.layers[l];
        let input = &acts[l];
        let gw = &mut grads.weights[l];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grads.biases[l][o] += d;
            let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
            row.iter_mut().zip(input).for_each(|(g, x)| *g += d * x);
        }
        if l == 0 {
            break;
        }
        let mut prev = vec![0.0; layer.inputs];
        for (o, &d) in delta.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
            prev.iter_mut().zip(row).for_each(|(p, w)| *p += d * w);
        }
        // ReLU: the post-activation is positive exactly where the unit was active.
        prev.iter_mut().zip(input).for_each(|(p, &a)| {
            if a <= 0.0 {
                *p = 0.0
            }
        });
        delta = prev;
    }
}
