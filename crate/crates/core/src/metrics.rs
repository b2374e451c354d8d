//! Classification and fairness metrics.
//!
//! ROC AUC is the Mann-Whitney rank statistic with average ranks for ties.
//! Equality of opportunity is the TPR gap between an advantaged and a
//! disadvantaged group at a fixed decision threshold: men versus women, and
//! the youngest versus the oldest age bin.

use serde::{Deserialize, Serialize};

use crate::datastream::{AgeGroup, Sex, StreamSample, TaskStream};
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::strategies::ThresholdTable;

fn check_lengths(scores: &[f64], truths: &[bool]) -> Result<()> {
    if scores.len() != truths.len() {
        return Err(Error::DimensionMismatch {
            context: "scores vs truths",
            expected: truths.len(),
            got: scores.len(),
        });
    }
    Ok(())
}

/// Area under the ROC curve.
///
/// Equal to `(#(pos, neg) pairs with pos > neg + 0.5 * #ties) / (P * N)`.
pub fn roc_auc(scores: &[f64], truths: &[bool]) -> Result<f64> {
    check_lengths(scores, truths)?;
    let positives = truths.iter().filter(|&&t| t).count();
    let negatives = truths.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ROC AUC needs both classes ({positives} positives, {negatives} negatives)"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("ROC AUC over NaN scores".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Sum of (doubled) average ranks of the positives keeps everything integral.
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j, average doubled = i + 1 + j
        let doubled_avg = (i + 1 + j) as u128;
        let pos_in_group = order[i..j].iter().filter(|&&k| truths[k]).count() as u128;
        doubled_rank_sum += doubled_avg * pos_in_group;
        i = j;
    }
    let p = positives as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    Ok(doubled_u as f64 / (2.0 * positives as f64 * negatives as f64))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn at_threshold(scores: &[f64], truths: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &t) in scores.iter().zip(truths) {
            match (s >= threshold, t) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// F1 of the rule `score >= threshold`; 0 when there are no predicted and no
/// actual positives.
pub fn f1_at_threshold(scores: &[f64], truths: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(scores, truths)?;
    Ok(Confusion::at_threshold(scores, truths, threshold).f1())
}

/// Candidate thresholds: 0, 1, and the midpoint between every pair of
/// consecutive distinct scores. Sorted ascending.
pub fn threshold_candidates(scores: &[f64]) -> Vec<f64> {
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut out = vec![0.0, 1.0];
    out.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// F1-maximizing threshold over [`threshold_candidates`]. Ties go to the
/// smallest threshold.
pub fn best_f1_threshold(scores: &[f64], truths: &[bool]) -> Result<(f64, f64)> {
    check_lengths(scores, truths)?;
    let positives = truths.iter().filter(|&&t| t).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "F1 threshold search needs at least one positive".into(),
        ));
    }

    // Sweep candidates from high to low while admitting samples in
    // descending score order.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let candidates = threshold_candidates(scores);

    let mut best = (f64::NAN, -1.0);
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut next = 0;
    for &t in candidates.iter().rev() {
        while next < order.len() && scores[order[next]] >= t {
            if truths[order[next]] {
                tp += 1;
            } else {
                fp += 1;
            }
            next += 1;
        }
        let f1 = Confusion {
            tp,
            fp,
            fn_: positives - tp,
            tn: 0,
        }
        .f1();
        // Walking downward, `>=` moves ties to the smaller threshold.
        if f1 >= best.1 {
            best = (t, f1);
        }
    }
    Ok(best)
}

/// Fraction of the group's positives scored at or above `threshold`.
pub fn tpr_for_group(
    scores: &[f64],
    truths: &[bool],
    group_mask: &[bool],
    threshold: f64,
    group_name: &str,
) -> Result<f64> {
    check_lengths(scores, truths)?;
    check_lengths(scores, group_mask)?;
    let (mut hits, mut positives) = (0usize, 0usize);
    for ((&s, &t), &g) in scores.iter().zip(truths).zip(group_mask) {
        if g && t {
            positives += 1;
            hits += (s >= threshold) as usize;
        }
    }
    if positives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "group {group_name} has no positives"
        )));
    }
    Ok(hits as f64 / positives as f64)
}

/// Protected attribute used for an EO gap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    /// Men advantaged, women disadvantaged.
    Gender,
    /// Ages 0-20 advantaged, 60-80 disadvantaged.
    Age,
}

/// A named subset of samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Sex(Sex),
    Age(AgeGroup),
}

impl Group {
    pub const ALL: [Group; 6] = [
        Group::Sex(Sex::Male),
        Group::Sex(Sex::Female),
        Group::Age(AgeGroup::Age0To20),
        Group::Age(AgeGroup::Age20To40),
        Group::Age(AgeGroup::Age40To60),
        Group::Age(AgeGroup::Age60To80),
    ];

    pub fn contains(self, sample: &StreamSample) -> bool {
        match self {
            Group::Sex(s) => sample.sex == s,
            Group::Age(a) => sample.age_group == a,
        }
    }

    pub fn name(self) -> String {
        match self {
            Group::Sex(Sex::Male) => "male".into(),
            Group::Sex(Sex::Female) => "female".into(),
            Group::Age(a) => format!("age_{}", a.token().replace('-', "_")),
        }
    }
}

impl Grouping {
    pub fn advantaged(self) -> Group {
        match self {
            Grouping::Gender => Group::Sex(Sex::Male),
            Grouping::Age => Group::Age(AgeGroup::Age0To20),
        }
    }

    pub fn disadvantaged(self) -> Group {
        match self {
            Grouping::Gender => Group::Sex(Sex::Female),
            Grouping::Age => Group::Age(AgeGroup::Age60To80),
        }
    }
}

/// `TPR(advantaged) - TPR(disadvantaged)`.
pub fn eo_gap(
    scores: &[f64],
    truths: &[bool],
    advantaged: &[bool],
    disadvantaged: &[bool],
    threshold: f64,
) -> Result<f64> {
    let a = tpr_for_group(scores, truths, advantaged, threshold, "advantaged")?;
    let d = tpr_for_group(scores, truths, disadvantaged, threshold, "disadvantaged")?;
    Ok(a - d)
}

/// EO for one pathology on a test set.
pub fn eo_for_pathology(
    samples: &[&StreamSample],
    scores: &[f64],
    label: usize,
    threshold: f64,
    grouping: Grouping,
) -> Result<f64> {
    let truths: Vec<bool> = samples.iter().map(|s| s.truth[label]).collect();
    let mask = |g: Group| samples.iter().map(|s| g.contains(s)).collect::<Vec<_>>();
    let (adv, dis) = (grouping.advantaged(), grouping.disadvantaged());
    let a = tpr_for_group(scores, &truths, &mask(adv), threshold, &adv.name())?;
    let d = tpr_for_group(scores, &truths, &mask(dis), threshold, &dis.name())?;
    Ok(a - d)
}

/// TPR per reporting group; `None` where the group has no positives.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroupTprs {
    pub male: Option<f64>,
    pub female: Option<f64>,
    /// Indexed like [`AgeGroup::ALL`].
    pub age: [Option<f64>; 4],
}

impl GroupTprs {
    pub fn get(&self, group: Group) -> Option<f64> {
        match group {
            Group::Sex(Sex::Male) => self.male,
            Group::Sex(Sex::Female) => self.female,
            Group::Age(a) => self.age[a.index()],
        }
    }

    fn set(&mut self, group: Group, value: Option<f64>) {
        match group {
            Group::Sex(Sex::Male) => self.male = value,
            Group::Sex(Sex::Female) => self.female = value,
            Group::Age(a) => self.age[a.index()] = value,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathologyMetrics {
    pub label_index: usize,
    pub name: String,
    pub origin_task: usize,
    pub test_size: usize,
    pub threshold: f64,
    pub threshold_fallback: bool,
    pub auc: Option<f64>,
    pub gender_eo: Option<f64>,
    pub age_eo: Option<f64>,
    pub tpr: GroupTprs,
    /// Why any of the values above is missing.
    pub flags: Vec<String>,
}

/// Metrics after learning tasks `0..=task_index`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task_index: usize,
    pub pathologies: Vec<PathologyMetrics>,
    pub mean_auc: Option<f64>,
    pub mean_gender_eo: Option<f64>,
    pub mean_age_eo: Option<f64>,
    pub mean_tpr: GroupTprs,
    pub threshold_rule: String,
    /// Pathologies left out of each average.
    pub excluded: Vec<String>,
}

pub const THRESHOLD_RULE: &str =
    "per-pathology F1-maximizing threshold on origin-task validation set";

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Model scores for every stream sample.
pub fn predict_all(model: &ModelState, stream: &TaskStream) -> Result<Vec<Vec<f64>>> {
    stream
        .samples
        .iter()
        .map(|s| model.forward(&s.features).map(|p| p.0))
        .collect()
}

/// Evaluates every pathology of tasks `0..=upto` on its origin task's test
/// set, with full ground truth.
pub fn evaluate_checkpoint(
    model: &ModelState,
    stream: &TaskStream,
    upto: usize,
    thresholds: &ThresholdTable,
) -> Result<MetricReport> {
    if upto >= stream.tasks.len() {
        return Err(Error::Stream(format!("no task {upto}")));
    }
    let needed = stream.labels_through(upto);
    if model.num_outputs() < needed {
        return Err(Error::Shape(format!(
            "model has {} outputs but tasks 0..={upto} need {needed}",
            model.num_outputs()
        )));
    }
    let predictions = predict_all(model, stream)?;

    let mut pathologies = Vec::new();
    for (k, task) in stream.tasks[..=upto].iter().enumerate() {
        let test: Vec<&StreamSample> = task
            .test
            .iter()
            .map(|e| &stream.samples[e.sample])
            .collect();
        for &label in &task.label_indices {
            let name = stream.label_registry[label].clone();
            let entry = thresholds
                .get(label)
                .ok_or_else(|| Error::Strategy(format!("no threshold for pathology {name:?}")))?;
            let scores: Vec<f64> = task
                .test
                .iter()
                .map(|e| predictions[e.sample][label])
                .collect();
            let truths: Vec<bool> = test.iter().map(|s| s.truth[label]).collect();
            let mut flags = Vec::new();
            if entry.fallback {
                flags.push("threshold fallback 0.5 (no validation positives)".to_string());
            }
            let auc = roc_auc(&scores, &truths)
                .map_err(|e| flags.push(format!("auc: {e}")))
                .ok();
            let mut tpr = GroupTprs::default();
            for g in Group::ALL {
                let mask: Vec<bool> = test.iter().map(|s| g.contains(s)).collect();
                tpr.set(
                    g,
                    tpr_for_group(&scores, &truths, &mask, entry.threshold, &g.name()).ok(),
                );
            }
            let mut eo = |grouping: Grouping, label_name: &str| {
                eo_for_pathology(&test, &scores, label, entry.threshold, grouping)
                    .map_err(|e| flags.push(format!("{label_name}: {e}")))
                    .ok()
            };
            let gender_eo = eo(Grouping::Gender, "gender_eo");
            let age_eo = eo(Grouping::Age, "age_eo");
            pathologies.push(PathologyMetrics {
                label_index: label,
                name,
                origin_task: k,
                test_size: test.len(),
                threshold: entry.threshold,
                threshold_fallback: entry.fallback,
                auc,
                gender_eo,
                age_eo,
                tpr,
                flags,
            });
        }
    }

    let mut mean_tpr = GroupTprs::default();
    for g in Group::ALL {
        mean_tpr.set(g, mean(pathologies.iter().map(|p| p.tpr.get(g))));
    }
    let excluded = pathologies
        .iter()
        .filter(|p| p.auc.is_none() || p.gender_eo.is_none() || p.age_eo.is_none())
        .map(|p| p.name.clone())
        .collect();
    Ok(MetricReport {
        task_index: upto,
        mean_auc: mean(pathologies.iter().map(|p| p.auc)),
        mean_gender_eo: mean(pathologies.iter().map(|p| p.gender_eo)),
        mean_age_eo: mean(pathologies.iter().map(|p| p.age_eo)),
        mean_tpr,
        pathologies,
        threshold_rule: THRESHOLD_RULE.to_string(),
        excluded,
    })
}
