//! Browser demo for faircl.
//!
//! Two operations are exported to JavaScript, each returning JSON:
//! [`explore_threshold`] trains a joint model on synthetic data with a chosen
//! female signal scale and reports group ROC curves and the EO gap at a
//! threshold; [`compare_strategies`] runs several strategies over a short
//! task stream and returns per-task AUC and EO series.

use faircl::datastream::{generate_synthetic, GroupSignalScales, Sex, SyntheticConfig};
use faircl::metrics::{evaluate_checkpoint, roc_auc, tpr_for_group};
use faircl::runner::prepare_stream;
use faircl::strategies::{train_sequence, StrategyConfig, StrategyKind};
use faircl::{Error, Result};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    /// Infinite (null in JSON) for the opening point.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupCurve {
    pub group: String,
    pub positives: usize,
    pub negatives: usize,
    pub auc: Option<f64>,
    /// TPR at the requested threshold.
    pub tpr: Option<f64>,
    pub points: Vec<RocPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Exploration {
    pub pathology: String,
    pub threshold: f64,
    /// F1-maximizing threshold from the validation set.
    pub calibrated_threshold: f64,
    /// Male TPR minus female TPR at `threshold`.
    pub gender_eo: Option<f64>,
    pub curves: Vec<GroupCurve>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrategySeries {
    pub strategy: String,
    pub auc: Vec<Option<f64>>,
    pub gender_eo: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub tasks: usize,
    pub series: Vec<StrategySeries>,
}

/// ROC curve from the highest threshold down, starting at (0, 0) and ending
/// at (1, 1).
pub fn roc_curve(scores: &[f64], truths: &[bool]) -> Vec<RocPoint> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let p = truths.iter().filter(|&&t| t).count().max(1) as f64;
    let n = truths.iter().filter(|&&t| !t).count().max(1) as f64;
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            if truths[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / n,
            tpr: tp as f64 / p,
        });
    }
    points
}

fn group_curve(name: &str, scores: &[f64], truths: &[bool], threshold: f64) -> GroupCurve {
    let all = vec![true; scores.len()];
    GroupCurve {
        group: name.to_string(),
        positives: truths.iter().filter(|&&t| t).count(),
        negatives: truths.iter().filter(|&&t| !t).count(),
        auc: roc_auc(scores, truths).ok(),
        tpr: tpr_for_group(scores, truths, &all, threshold, name).ok(),
        points: roc_curve(scores, truths),
    }
}

/// Trains a joint model on one two-label task and inspects the first label
/// on its test set.
pub fn explore(female_scale: f64, threshold: f64, seed: u64) -> Result<Exploration> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "threshold {threshold} outside [0, 1]"
        )));
    }
    let data = SyntheticConfig {
        num_labels: 2,
        tasks: 1,
        samples_per_label: 500,
        feature_dim: 8,
        signal: 2.0,
        noise: 1.0,
        group_signal_scales: GroupSignalScales {
            female: female_scale,
            ..Default::default()
        },
        label_correlations: 0.2,
        seed,
        ..Default::default()
    };
    let dataset = generate_synthetic(&data)?;
    let stream = prepare_stream(&dataset, &data.task_specs(), Default::default(), seed)?;
    let config = StrategyConfig {
        learning_rate: 0.3,
        epochs: 30,
        hidden_layers: vec![8],
        seed,
        ..StrategyConfig::new(StrategyKind::Joint)
    };
    let outcome = train_sequence(&config, &stream)?;
    let model = &outcome.final_model;

    let test: Vec<_> = stream.tasks[0]
        .test
        .iter()
        .map(|e| &stream.samples[e.sample])
        .collect();
    let scores = test
        .iter()
        .map(|s| model.forward(&s.features).map(|p| p[0]))
        .collect::<Result<Vec<f64>>>()?;
    let truths: Vec<bool> = test.iter().map(|s| s.truth[0]).collect();
    let subset = |sex: Option<Sex>| -> (Vec<f64>, Vec<bool>) {
        test.iter()
            .zip(scores.iter().zip(&truths))
            .filter(|(s, _)| sex.is_none_or(|x| s.sex == x))
            .map(|(_, (&p, &t))| (p, t))
            .unzip()
    };
    let curves: Vec<GroupCurve> = [
        ("all", None),
        ("male", Some(Sex::Male)),
        ("female", Some(Sex::Female)),
    ]
    .into_iter()
    .map(|(name, sex)| {
        let (s, t) = subset(sex);
        group_curve(name, &s, &t, threshold)
    })
    .collect();
    let gender_eo = match (curves[1].tpr, curves[2].tpr) {
        (Some(m), Some(f)) => Some(m - f),
        _ => None,
    };
    Ok(Exploration {
        pathology: stream.label_registry[0].clone(),
        threshold,
        calibrated_threshold: outcome.thresholds[0].entries[0].threshold,
        gender_eo,
        curves,
    })
}

/// Runs each named strategy over a three-task stream.
pub fn compare(strategies: &str, female_scale: f64, seed: u64) -> Result<Comparison> {
    let kinds = strategies
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect::<Result<Vec<StrategyKind>>>()?;
    if kinds.is_empty() {
        return Err(Error::Config("no strategies selected".into()));
    }
    let data = SyntheticConfig {
        num_labels: 6,
        tasks: 3,
        samples_per_label: 80,
        feature_dim: 12,
        label_correlations: 0.4,
        group_signal_scales: GroupSignalScales {
            female: female_scale,
            ..Default::default()
        },
        seed,
        ..Default::default()
    };
    let dataset = generate_synthetic(&data)?;
    let stream = prepare_stream(&dataset, &data.task_specs(), Default::default(), seed)?;
    let mut series = Vec::new();
    for kind in kinds {
        let config = StrategyConfig {
            learning_rate: 0.3,
            epochs: 30,
            hidden_layers: vec![8],
            seed,
            ..StrategyConfig::new(kind)
        };
        let outcome = train_sequence(&config, &stream)?;
        let reports = (0..stream.tasks.len())
            .map(|j| {
                evaluate_checkpoint(&outcome.checkpoints[j], &stream, j, &outcome.thresholds[j])
            })
            .collect::<Result<Vec<_>>>()?;
        series.push(StrategySeries {
            strategy: kind.to_string(),
            auc: reports.iter().map(|r| r.mean_auc).collect(),
            gender_eo: reports.iter().map(|r| r.mean_gender_eo).collect(),
        });
    }
    Ok(Comparison {
        tasks: stream.tasks.len(),
        series,
    })
}

fn to_json<T: Serialize>(value: Result<T>) -> std::result::Result<String, String> {
    value
        .map_err(|e| e.to_string())
        .and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string()))
}

/// JSON [`Exploration`].
#[wasm_bindgen]
pub fn explore_threshold(
    female_scale: f64,
    threshold: f64,
    seed: u32,
) -> std::result::Result<String, String> {
    to_json(explore(female_scale, threshold, seed as u64))
}

/// JSON [`Comparison`] for a comma-separated strategy list.
#[wasm_bindgen]
pub fn compare_strategies(
    strategies: &str,
    female_scale: f64,
    seed: u32,
) -> std::result::Result<String, String> {
    to_json(compare(strategies, female_scale, seed as u64))
}
