//! Independent oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use faircl::datastream::{AgeGroup, Sex, Split, StreamSample};
use faircl::model::{loss_and_gradients, Example, LossSpec, ModelState};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Pairwise Mann-Whitney count: 1 per correctly ordered pair, 1/2 per tie.
pub fn brute_auc(scores: &[f64], truths: &[bool]) -> f64 {
    let (mut doubled, mut pairs) = (0u64, 0u64);
    for (i, &ti) in truths.iter().enumerate() {
        if !ti {
            continue;
        }
        for (j, &tj) in truths.iter().enumerate() {
            if tj {
                continue;
            }
            pairs += 1;
            if scores[i] > scores[j] {
                doubled += 2;
            } else if scores[i] == scores[j] {
                doubled += 1;
            }
        }
    }
    doubled as f64 / (2 * pairs) as f64
}

/// F1 from raw counts of the rule `score >= t`.
pub fn brute_f1(scores: &[f64], truths: &[bool], t: f64) -> f64 {
    let tp = scores
        .iter()
        .zip(truths)
        .filter(|(s, y)| **s >= t && **y)
        .count();
    let fp = scores
        .iter()
        .zip(truths)
        .filter(|(s, y)| **s >= t && !**y)
        .count();
    let fn_ = scores
        .iter()
        .zip(truths)
        .filter(|(s, y)| **s < t && **y)
        .count();
    if tp + fp + fn_ == 0 {
        0.0
    } else {
        (2 * tp) as f64 / (2 * tp + fp + fn_) as f64
    }
}

/// Every candidate threshold: 0, 1 and each midpoint between neighbours in
/// the sorted distinct scores.
pub fn brute_candidates(scores: &[f64]) -> Vec<f64> {
    let mut s: Vec<f64> = scores.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    s.dedup();
    let mut c = vec![0.0, 1.0];
    for k in 1..s.len() {
        c.push(s[k - 1] + (s[k] - s[k - 1]) / 2.0);
    }
    c.sort_by(|a, b| a.partial_cmp(b).unwrap());
    c.dedup();
    c
}

/// Exhaustive scan; the smallest threshold wins ties.
pub fn brute_best_f1(scores: &[f64], truths: &[bool]) -> (f64, f64) {
    let mut best = (f64::NAN, -1.0);
    for t in brute_candidates(scores) {
        let f = brute_f1(scores, truths, t);
        if f > best.1 {
            best = (t, f);
        }
    }
    best
}

pub fn brute_tpr(scores: &[f64], truths: &[bool], mask: &[bool], t: f64) -> Option<f64> {
    let pos: Vec<usize> = (0..scores.len())
        .filter(|&i| truths[i] && mask[i])
        .collect();
    if pos.is_empty() {
        return None;
    }
    let hit = pos.iter().filter(|&&i| scores[i] >= t).count();
    Some(hit as f64 / pos.len() as f64)
}

/// Central-difference gradient of the batch loss, flattened in the same
/// order as [`faircl::model::GradientSet::iter`].
pub fn numeric_gradient(
    model: &ModelState,
    batch: &[Example<'_>],
    spec: LossSpec<'_>,
    eps: f64,
) -> Vec<f64> {
    let mut probe = model.clone();
    let loss = |m: &ModelState| loss_and_gradients(m, batch, spec).unwrap().0.total;
    let mut out = Vec::new();
    for l in 0..model.layers().len() {
        for k in 0..model.layers()[l].weights.len() {
            let w = model.layers()[l].weights[k];
            probe.layers_mut()[l].weights[k] = w + eps;
            let up = loss(&probe);
            probe.layers_mut()[l].weights[k] = w - eps;
            let down = loss(&probe);
            probe.layers_mut()[l].weights[k] = w;
            out.push((up - down) / (2.0 * eps));
        }
        for k in 0..model.layers()[l].biases.len() {
            let b = model.layers()[l].biases[k];
            probe.layers_mut()[l].biases[k] = b + eps;
            let up = loss(&probe);
            probe.layers_mut()[l].biases[k] = b - eps;
            let down = loss(&probe);
            probe.layers_mut()[l].biases[k] = b;
            out.push((up - down) / (2.0 * eps));
        }
    }
    out
}

/// Largest relative error; entries where both sides are below `floor` are
/// compared absolutely against it.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Test-set samples with the given sexes, ages and single-label truth.
pub fn samples(groups: &[(Sex, AgeGroup, bool)]) -> Vec<StreamSample> {
    groups
        .iter()
        .enumerate()
        .map(|(i, &(sex, age_group, y))| StreamSample {
            sample_id: format!("s{i}"),
            patient_id: format!("p{i}"),
            features: vec![0.0],
            truth: vec![y],
            sex,
            age_group,
            split: Split::Test,
        })
        .collect()
}

/// Random single-label fixture: scores quantized to force ties, random
/// demographics. Guarantees a positive in male, female, 0-20 and 60-80.
pub fn random_group_fixture(seed: u64, n: usize) -> (Vec<StreamSample>, Vec<f64>) {
    let mut r = rng(seed);
    let mut groups: Vec<(Sex, AgeGroup, bool)> = (0..n)
        .map(|_| {
            let sex = if r.random_bool(0.5) {
                Sex::Male
            } else {
                Sex::Female
            };
            let age = AgeGroup::ALL[r.random_range(0..4)];
            (sex, age, r.random_bool(0.4))
        })
        .collect();
    groups.extend([
        (Sex::Male, AgeGroup::Age0To20, true),
        (Sex::Female, AgeGroup::Age60To80, true),
    ]);
    let scores = (0..groups.len())
        .map(|_| (r.random_range(0..20) as f64) / 20.0)
        .collect();
    (samples(&groups), scores)
}

/// Smallest |pre-activation| over every hidden unit and input; finite
/// differences are only meaningful away from the ReLU kink.
pub fn min_hidden_margin(model: &ModelState, inputs: &[&[f64]]) -> f64 {
    let layers = model.layers();
    let mut margin = f64::INFINITY;
    for x in inputs {
        let mut act = x.to_vec();
        for layer in &layers[..layers.len() - 1] {
            let z: Vec<f64> = (0..layer.outputs)
                .map(|o| {
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    layer.biases[o] + row.iter().zip(&act).map(|(w, a)| w * a).sum::<f64>()
                })
                .collect();
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            act = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    margin
}
