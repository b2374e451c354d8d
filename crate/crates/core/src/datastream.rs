//! Datasets and class-incremental task streams.
//!
//! A [`Dataset`] is a flat list of labeled samples. [`build_task_stream`]
//! turns it into an ordered list of tasks where each task only sees the
//! labels it introduces: every other label, even if present on the sample,
//! is hidden behind the target mask. Ground truth is kept on the stream for
//! evaluation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TargetVector;
use crate::rng::{rng_for, streams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sex {
    #[serde(rename = "M")]
    Male,
    #[serde(rename = "F")]
    Female,
}

impl Sex {
    pub const ALL: [Sex; 2] = [Sex::Male, Sex::Female];

    pub fn token(self) -> &'static str {
        match self {
            Sex::Male => "M",
            Sex::Female => "F",
        }
    }
}

impl FromStr for Sex {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim() {
            "M" => Ok(Sex::Male),
            "F" => Ok(Sex::Female),
            other => Err(format!("unknown sex token {other:?} (expected M or F)")),
        }
    }
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

/// The four age bins used for grouping.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AgeGroup {
    #[serde(rename = "0-20")]
    Age0To20,
    #[serde(rename = "20-40")]
    Age20To40,
    #[serde(rename = "40-60")]
    Age40To60,
    #[serde(rename = "60-80")]
    Age60To80,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 4] = [
        AgeGroup::Age0To20,
        AgeGroup::Age20To40,
        AgeGroup::Age40To60,
        AgeGroup::Age60To80,
    ];

    pub fn token(self) -> &'static str {
        match self {
            AgeGroup::Age0To20 => "0-20",
            AgeGroup::Age20To40 => "20-40",
            AgeGroup::Age40To60 => "40-60",
            AgeGroup::Age60To80 => "60-80",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for AgeGroup {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        AgeGroup::ALL
            .into_iter()
            .find(|g| g.token() == s.trim())
            .ok_or_else(|| {
                format!("unknown age group {s:?} (expected one of 0-20, 20-40, 40-60, 60-80)")
            })
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub patient_id: String,
    pub features: Vec<f64>,
    /// Ground-truth label values, indexed like [`Dataset::label_names`].
    /// Every entry is known at ingestion.
    pub labels: Vec<bool>,
    pub sex: Sex,
    pub age_group: AgeGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub label_names: Vec<String>,
    pub feature_dim: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

const LABEL_PREFIX: &str = "L:";

/// Reads a manifest CSV: `sample_id, patient_id, sex, age_group, f0..f{D-1},
/// L:<name>...`. Column order is free; the header is required.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest_err = |message: String| Error::Manifest {
        path: path.to_path_buf(),
        message,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader.headers()?.clone();

    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| manifest_err(format!("missing column {name:?}")))
    };
    let id_col = column("sample_id")?;
    let patient_col = column("patient_id")?;
    let sex_col = column("sex")?;
    let age_col = column("age_group")?;

    let feature_dim = headers
        .iter()
        .filter(|h| {
            h.strip_prefix('f')
                .is_some_and(|n| n.parse::<usize>().is_ok())
        })
        .count();
    if feature_dim == 0 {
        return Err(manifest_err("no feature columns (f0, f1, ...)".into()));
    }
    let feature_cols = (0..feature_dim)
        .map(|i| column(&format!("f{i}")))
        .collect::<Result<Vec<_>>>()?;

    let (label_cols, label_names): (Vec<usize>, Vec<String>) = headers
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix(LABEL_PREFIX).map(|n| (i, n.to_string())))
        .unzip();
    if label_names.is_empty() {
        return Err(manifest_err("no label columns (L:<name>)".into()));
    }
    if label_names.iter().collect::<HashSet<_>>().len() != label_names.len() {
        return Err(manifest_err("duplicate label column".into()));
    }

    let mut seen_ids = HashSet::new();
    let mut samples = Vec::new();
    for (row_index, record) in reader.records().enumerate() {
        let record = record?;
        // Header is line 1.
        let row = row_index + 2;
        let field = |col: usize| record.get(col).unwrap_or("");
        let sample_id = field(id_col).to_string();
        if sample_id.is_empty() {
            return Err(manifest_err(format!("row {row}: empty sample_id")));
        }
        if !seen_ids.insert(sample_id.clone()) {
            return Err(manifest_err(format!(
                "row {row}: duplicate sample_id {sample_id:?}"
            )));
        }
        let sex = field(sex_col)
            .parse::<Sex>()
            .map_err(|e| manifest_err(format!("row {row}: {e}")))?;
        let age_group = field(age_col)
            .parse::<AgeGroup>()
            .map_err(|e| manifest_err(format!("row {row}: {e}")))?;
        let features = feature_cols
            .iter()
            .map(|&c| {
                field(c)
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| {
                        manifest_err(format!("row {row}: bad feature value {:?}", field(c)))
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let labels = label_cols
            .iter()
            .zip(&label_names)
            .map(|(&c, name)| match field(c) {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(manifest_err(format!(
                    "row {row}: label {name:?} must be 0 or 1, got {other:?}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(Sample {
            sample_id,
            patient_id: field(patient_col).to_string(),
            features,
            labels,
            sex,
            age_group,
        });
    }

    Ok(Dataset {
        label_names,
        feature_dim,
        samples,
    })
}

/// Writes a dataset in the manifest format read by [`load_manifest`].
pub fn write_manifest(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = csv::Writer::from_writer(file);
    let mut header = vec![
        "sample_id".to_string(),
        "patient_id".to_string(),
        "sex".to_string(),
        "age_group".to_string(),
    ];
    header.extend((0..dataset.feature_dim).map(|i| format!("f{i}")));
    header.extend(
        dataset
            .label_names
            .iter()
            .map(|n| format!("{LABEL_PREFIX}{n}")),
    );
    writer.write_record(&header)?;
    for s in &dataset.samples {
        let mut row = vec![
            s.sample_id.clone(),
            s.patient_id.clone(),
            s.sex.token().to_string(),
            s.age_group.token().to_string(),
        ];
        row.extend(s.features.iter().map(|v| v.to_string()));
        row.extend(
            s.labels
                .iter()
                .map(|&l| if l { "1" } else { "0" }.to_string()),
        );
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Parses a task-spec file: one task per line, label names comma-separated.
/// Blank lines and `#` comments are skipped.
pub fn parse_task_specs(text: &str) -> Result<Vec<TaskSpec>> {
    let specs: Vec<TaskSpec> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(task_index, line)| TaskSpec {
            task_index,
            pathologies: line
                .split(',')
                .map(|n| n.trim().to_string())
                .filter(|n| !n.is_empty())
                .collect(),
        })
        .collect();
    if specs.is_empty() {
        return Err(Error::Stream("task-spec file lists no tasks".into()));
    }
    Ok(specs)
}

pub fn load_task_specs(path: impl AsRef<Path>) -> Result<Vec<TaskSpec>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_task_specs(&text)
}

pub fn render_task_specs(specs: &[TaskSpec]) -> String {
    specs
        .iter()
        .map(|s| s.pathologies.join(",") + "\n")
        .collect()
}

/// Keeps one sample per patient, picked uniformly at random. Retained
/// samples stay in input order.
pub fn keep_one_image_per_patient(dataset: &Dataset, seed: u64) -> Dataset {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut by_patient: HashMap<&str, usize> = HashMap::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        let g = *by_patient.entry(s.patient_id.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(i);
    }
    let mut rng = rng_for(seed, streams::PATIENT_DEDUP);
    let mut keep: Vec<usize> = groups
        .iter()
        .map(|g| {
            if g.len() == 1 {
                g[0]
            } else {
                g[rng.random_range(0..g.len())]
            }
        })
        .collect();
    keep.sort_unstable();
    Dataset {
        label_names: dataset.label_names.clone(),
        feature_dim: dataset.feature_dim,
        samples: keep
            .into_iter()
            .map(|i| dataset.samples[i].clone())
            .collect(),
    }
}

/// Drops samples with no positive label.
pub fn exclude_no_finding(dataset: &Dataset) -> Dataset {
    Dataset {
        label_names: dataset.label_names.clone(),
        feature_dim: dataset.feature_dim,
        samples: dataset
            .samples
            .iter()
            .filter(|s| s.labels.iter().any(|&l| l))
            .cloned()
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_index: usize,
    pub pathologies: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(0.0..=1.0).contains(r))
            || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "split ratios must be in [0,1] and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// A sample as stored on a stream. `truth` is indexed by output index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StreamSample {
    pub sample_id: String,
    pub patient_id: String,
    pub features: Vec<f64>,
    pub truth: Vec<bool>,
    pub sex: Sex,
    pub age_group: AgeGroup,
    pub split: Split,
}

/// One sample as it appears inside one task, with that task's label mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub sample: usize,
    pub task: usize,
    pub target: TargetVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub spec: TaskSpec,
    /// Output indices of this task's labels.
    pub label_indices: Vec<usize>,
    pub train: Vec<TaskEntry>,
    pub val: Vec<TaskEntry>,
    pub test: Vec<TaskEntry>,
}

impl Task {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entries(&self) -> impl Iterator<Item = &TaskEntry> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    /// Label names in output-index order: task 0's labels first, then task 1's, ...
    pub label_registry: Vec<String>,
    pub samples: Vec<StreamSample>,
    pub tasks: Vec<Task>,
}

impl TaskStream {
    pub fn feature_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn num_labels(&self) -> usize {
        self.label_registry.len()
    }

    /// Size of the preprocessed dataset the stream was built from.
    pub fn dataset_size(&self) -> usize {
        self.samples.len()
    }

    pub fn label_index(&self, name: &str) -> Option<usize> {
        self.label_registry.iter().position(|n| n == name)
    }

    /// Task in which a label is introduced.
    pub fn origin_task(&self, label: usize) -> Option<usize> {
        self.tasks
            .iter()
            .position(|t| t.label_indices.contains(&label))
    }

    /// Number of outputs after learning tasks `0..=task`.
    pub fn labels_through(&self, task: usize) -> usize {
        self.tasks[..=task]
            .iter()
            .map(|t| t.label_indices.len())
            .sum()
    }
}

/// Builds the class-incremental stream.
///
/// Each patient gets one split for the whole stream, so a test patient is a
/// test patient in every task it appears in. Patients are stratified by their
/// rarest positive label before splitting.
pub fn build_task_stream(
    dataset: &Dataset,
    task_specs: &[TaskSpec],
    ratios: SplitRatios,
    seed: u64,
) -> Result<TaskStream> {
    ratios.validate()?;
    if task_specs.is_empty() {
        return Err(Error::Stream("no tasks".into()));
    }
    let name_to_dataset: HashMap<&str, usize> = dataset
        .label_names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();

    let mut label_registry = Vec::new();
    let mut dataset_index_of_output = Vec::new();
    let mut seen = HashSet::new();
    let mut task_labels = Vec::new();
    for (t, spec) in task_specs.iter().enumerate() {
        if spec.pathologies.is_empty() {
            return Err(Error::Stream(format!("task {t} has no pathologies")));
        }
        let mut indices = Vec::new();
        for name in &spec.pathologies {
            let &di = name_to_dataset
                .get(name.as_str())
                .ok_or_else(|| Error::Stream(format!("task {t}: unknown pathology {name:?}")))?;
            if !seen.insert(name.as_str()) {
                return Err(Error::Stream(format!(
                    "pathology {name:?} is assigned to more than one task"
                )));
            }
            indices.push(label_registry.len());
            label_registry.push(name.clone());
            dataset_index_of_output.push(di);
        }
        task_labels.push(indices);
    }
    if let Some(missing) = dataset
        .label_names
        .iter()
        .find(|n| !seen.contains(n.as_str()))
    {
        return Err(Error::Stream(format!(
            "pathology {missing:?} is not assigned to any task"
        )));
    }

    let splits = assign_patient_splits(dataset, ratios, seed);
    let samples: Vec<StreamSample> = dataset
        .samples
        .iter()
        .map(|s| StreamSample {
            sample_id: s.sample_id.clone(),
            patient_id: s.patient_id.clone(),
            features: s.features.clone(),
            truth: dataset_index_of_output
                .iter()
                .map(|&di| s.labels[di])
                .collect(),
            sex: s.sex,
            age_group: s.age_group,
            split: splits[&s.patient_id],
        })
        .collect();

    let num_labels = label_registry.len();
    let mut tasks = Vec::with_capacity(task_specs.len());
    for (t, (spec, labels)) in task_specs.iter().zip(task_labels).enumerate() {
        let mut known = vec![false; num_labels];
        labels.iter().for_each(|&l| known[l] = true);
        let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
        for (i, s) in samples.iter().enumerate() {
            if !labels.iter().any(|&l| s.truth[l]) {
                continue;
            }
            let entry = TaskEntry {
                sample: i,
                task: t,
                target: TargetVector {
                    values: s.truth.iter().map(|&y| if y { 1.0 } else { 0.0 }).collect(),
                    known: known.clone(),
                },
            };
            match s.split {
                Split::Train => train.push(entry),
                Split::Val => val.push(entry),
                Split::Test => test.push(entry),
            }
        }
        if train.is_empty() && val.is_empty() && test.is_empty() {
            return Err(Error::Stream(format!(
                "task {t} ({}) has no eligible samples",
                spec.pathologies.join(",")
            )));
        }
        tasks.push(Task {
            spec: TaskSpec {
                task_index: t,
                pathologies: spec.pathologies.clone(),
            },
            label_indices: labels,
            train,
            val,
            test,
        });
    }

    Ok(TaskStream {
        label_registry,
        samples,
        tasks,
    })
}

fn assign_patient_splits(
    dataset: &Dataset,
    ratios: SplitRatios,
    seed: u64,
) -> HashMap<String, Split> {
    let num_labels = dataset.label_names.len();
    let mut label_counts = vec![0usize; num_labels];
    for s in &dataset.samples {
        for (c, &l) in label_counts.iter_mut().zip(&s.labels) {
            *c += l as usize;
        }
    }

    // Patient -> union of positive labels, in first-appearance order.
    let mut order: Vec<&str> = Vec::new();
    let mut positives: HashMap<&str, Vec<bool>> = HashMap::new();
    for s in &dataset.samples {
        let entry = positives.entry(s.patient_id.as_str()).or_insert_with(|| {
            order.push(s.patient_id.as_str());
            vec![false; num_labels]
        });
        entry.iter_mut().zip(&s.labels).for_each(|(p, &l)| *p |= l);
    }

    // Stratum = rarest positive label (ties to the lower index); usize::MAX if none.
    let mut strata: BTreeMap<usize, Vec<&str>> = BTreeMap::new();
    for &p in &order {
        let key = positives[p]
            .iter()
            .enumerate()
            .filter(|(_, &on)| on)
            .min_by_key(|&(i, _)| (label_counts[i], i))
            .map_or(usize::MAX, |(i, _)| i);
        strata.entry(key).or_default().push(p);
    }

    let mut rng = rng_for(seed, streams::SPLIT);
    let mut out = HashMap::new();
    for patients in strata.values_mut() {
        patients.shuffle(&mut rng);
        let n = patients.len() as f64;
        let train_end = (n * ratios.train).round() as usize;
        let val_end = ((n * (ratios.train + ratios.val)).round() as usize).max(train_end);
        for (i, p) in patients.iter().enumerate() {
            let split = if i < train_end {
                Split::Train
            } else if i < val_end {
                Split::Val
            } else {
                Split::Test
            };
            out.insert(p.to_string(), split);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathologyCount {
    pub name: String,
    pub visible: usize,
    pub hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskFrequency {
    pub task_index: usize,
    pub size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub pathologies: Vec<PathologyCount>,
    pub male: usize,
    pub female: usize,
    /// Indexed like [`AgeGroup::ALL`].
    pub age: [usize; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyReport {
    pub tasks: Vec<TaskFrequency>,
}

/// Per-task counts of task-visible and hidden positives and of each group,
/// over all three splits.
pub fn task_frequency_report(stream: &TaskStream) -> FrequencyReport {
    let tasks = stream
        .tasks
        .iter()
        .map(|task| {
            let mut pathologies: Vec<PathologyCount> = stream
                .label_registry
                .iter()
                .map(|name| PathologyCount {
                    name: name.clone(),
                    visible: 0,
                    hidden: 0,
                })
                .collect();
            let (mut male, mut female, mut age) = (0, 0, [0usize; 4]);
            for entry in task.entries() {
                let s = &stream.samples[entry.sample];
                for (l, count) in pathologies.iter_mut().enumerate() {
                    if s.truth[l] {
                        if entry.target.known[l] {
                            count.visible += 1;
                        } else {
                            count.hidden += 1;
                        }
                    }
                }
                match s.sex {
                    Sex::Male => male += 1,
                    Sex::Female => female += 1,
                }
                age[s.age_group.index()] += 1;
            }
            TaskFrequency {
                task_index: task.spec.task_index,
                size: task.len(),
                train: task.train.len(),
                val: task.val.len(),
                test: task.test.len(),
                pathologies,
                male,
                female,
                age,
            }
        })
        .collect();
    FrequencyReport { tasks }
}

impl FrequencyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,kind,name,visible,hidden\n");
        for t in &self.tasks {
            for p in &t.pathologies {
                out += &format!(
                    "{},pathology,{},{},{}\n",
                    t.task_index, p.name, p.visible, p.hidden
                );
            }
            out += &format!("{},sex,M,{},0\n", t.task_index, t.male);
            out += &format!("{},sex,F,{},0\n", t.task_index, t.female);
            for (g, c) in AgeGroup::ALL.iter().zip(t.age) {
                out += &format!("{},age,{},{},0\n", t.task_index, g, c);
            }
        }
        out
    }
}

impl fmt::Display for FrequencyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.tasks {
            writeln!(
                f,
                "task {}: {} samples (train {}, val {}, test {}), M {} / F {}, age {}",
                t.task_index,
                t.size,
                t.train,
                t.val,
                t.test,
                t.male,
                t.female,
                AgeGroup::ALL
                    .iter()
                    .zip(t.age)
                    .map(|(g, c)| format!("{g}:{c}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            )?;
            for p in t.pathologies.iter().filter(|p| p.visible + p.hidden > 0) {
                let tag = if p.visible > 0 { "visible" } else { "hidden" };
                writeln!(f, "  {:<24} {:>6} {}", p.name, p.visible + p.hidden, tag)?;
            }
        }
        Ok(())
    }
}

/// Group multipliers on the label signal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupSignalScales {
    pub male: f64,
    pub female: f64,
    /// Indexed like [`AgeGroup::ALL`].
    pub age: [f64; 4],
}

impl Default for GroupSignalScales {
    fn default() -> Self {
        GroupSignalScales {
            male: 1.0,
            female: 1.0,
            age: [1.0; 4],
        }
    }
}

impl GroupSignalScales {
    pub fn multiplier(&self, sex: Sex, age: AgeGroup) -> f64 {
        let s = match sex {
            Sex::Male => self.male,
            Sex::Female => self.female,
        };
        s * self.age[age.index()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub num_labels: usize,
    pub tasks: usize,
    pub samples_per_label: usize,
    pub feature_dim: usize,
    /// Signal amplitude along each label direction.
    pub signal: f64,
    /// Standard deviation of the isotropic Gaussian noise.
    pub noise: f64,
    pub group_signal_scales: GroupSignalScales,
    /// Probability that each other label is also positive on a sample.
    pub label_correlations: f64,
    pub female_fraction: f64,
    /// Indexed like [`AgeGroup::ALL`]; normalized before use.
    pub age_frequencies: [f64; 4],
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_labels: 10,
            tasks: 5,
            samples_per_label: 120,
            feature_dim: 20,
            signal: 3.0,
            noise: 1.0,
            group_signal_scales: GroupSignalScales::default(),
            label_correlations: 0.1,
            female_fraction: 0.5,
            age_frequencies: [0.25; 4],
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn label_names(&self) -> Vec<String> {
        (0..self.num_labels)
            .map(|i| format!("label{i:02}"))
            .collect()
    }

    /// Contiguous partition of the labels into `tasks` nearly equal groups.
    pub fn task_specs(&self) -> Vec<TaskSpec> {
        let names = self.label_names();
        let tasks = self.tasks.max(1);
        let (base, extra) = (self.num_labels / tasks, self.num_labels % tasks);
        let mut start = 0;
        (0..tasks)
            .map(|t| {
                let len = base + usize::from(t < extra);
                let spec = TaskSpec {
                    task_index: t,
                    pathologies: names[start..start + len].to_vec(),
                };
                start += len;
                spec
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_labels == 0 || self.samples_per_label == 0 {
            return bad("synthetic generator needs labels and samples".into());
        }
        if self.feature_dim < self.num_labels {
            return bad(format!(
                "feature_dim ({}) must be at least num_labels ({})",
                self.feature_dim, self.num_labels
            ));
        }
        if self.tasks == 0 || self.tasks > self.num_labels {
            return bad(format!(
                "cannot split {} labels into {} tasks",
                self.num_labels, self.tasks
            ));
        }
        if !(0.0..=1.0).contains(&self.label_correlations)
            || !(0.0..=1.0).contains(&self.female_fraction)
        {
            return bad("probabilities must lie in [0,1]".into());
        }
        if self.age_frequencies.iter().any(|&f| f < 0.0)
            || self.age_frequencies.iter().sum::<f64>() <= 0.0
        {
            return bad("age frequencies must be nonnegative with a positive sum".into());
        }
        if !(self.noise >= 0.0) || !self.signal.is_finite() {
            return bad("noise must be nonnegative and signal finite".into());
        }
        Ok(())
    }
}

/// Orthonormal label directions from Gram-Schmidt on Gaussian draws.
fn label_directions(num_labels: usize, dim: usize, rng: &mut crate::rng::Rng) -> Vec<Vec<f64>> {
    let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_labels);
    while dirs.len() < num_labels {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for d in &dirs {
            let dot: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(d).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-6 {
            v.iter_mut().for_each(|a| *a /= norm);
            dirs.push(v);
        }
    }
    dirs
}

/// Bias-controllable synthetic dataset.
///
/// For each label, `samples_per_label` samples are generated with that label
/// positive; every other label is switched on independently with probability
/// `label_correlations`. A sample's features are
/// `sum over positive labels of signal * g * d_label + noise * N(0, I)`,
/// where `g` is the group multiplier of its sex and age group.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = rng_for(config.seed, streams::SYNTHETIC);
    let dirs = label_directions(config.num_labels, config.feature_dim, &mut rng);
    let age_total: f64 = config.age_frequencies.iter().sum();

    let mut samples = Vec::with_capacity(config.num_labels * config.samples_per_label);
    for primary in 0..config.num_labels {
        for _ in 0..config.samples_per_label {
            let n = samples.len();
            let labels: Vec<bool> = (0..config.num_labels)
                .map(|l| l == primary || rng.random_bool(config.label_correlations))
                .collect();
            let sex = if rng.random_bool(config.female_fraction) {
                Sex::Female
            } else {
                Sex::Male
            };
            let mut u = rng.random::<f64>() * age_total;
            let mut age_group = AgeGroup::Age60To80;
            for (g, &f) in AgeGroup::ALL.iter().zip(&config.age_frequencies) {
                if u < f {
                    age_group = *g;
                    break;
                }
                u -= f;
            }
            let amp = config.signal * config.group_signal_scales.multiplier(sex, age_group);
            let mut features: Vec<f64> = (0..config.feature_dim)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    config.noise * z
                })
                .collect();
            for (d, _) in dirs.iter().zip(&labels).filter(|(_, &on)| on) {
                features
                    .iter_mut()
                    .zip(d)
                    .for_each(|(f, di)| *f += amp * di);
            }
            samples.push(Sample {
                sample_id: format!("s{n:06}"),
                patient_id: format!("p{n:06}"),
                features,
                labels,
                sex,
                age_group,
            });
        }
    }

    Ok(Dataset {
        label_names: config.label_names(),
        feature_dim: config.feature_dim,
        samples,
    })
}
