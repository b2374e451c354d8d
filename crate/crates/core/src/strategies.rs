//! Continual-learning training regimes.
//!
//! All regimes share one minibatch SGD loop ([`run_task`]) and differ only in
//! what they feed it: replayed entries from a [`ReplayBuffer`], a frozen
//! teacher for distillation, or teacher-binarized targets on old labels.
//!
//! Output index `i` always refers to the same label, and labels are numbered
//! in task order, so the old labels before task `j` are exactly the teacher's
//! outputs `0..teacher.num_outputs()`.

use std::collections::{BTreeSet, HashMap};

use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::datastream::{TaskEntry, TaskStream};
use crate::error::{Error, Result};
use crate::metrics::best_f1_threshold;
use crate::model::{loss_and_gradients, Example, LossSpec, ModelState, TargetVector};
use crate::rng::{rng_for, streams, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    FineTune,
    Replay,
    Lwf,
    PseudoLabel,
    LwfReplay,
    Joint,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 6] = [
        StrategyKind::FineTune,
        StrategyKind::Replay,
        StrategyKind::Lwf,
        StrategyKind::PseudoLabel,
        StrategyKind::LwfReplay,
        StrategyKind::Joint,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::FineTune => "fine_tune",
            StrategyKind::Replay => "replay",
            StrategyKind::Lwf => "lwf",
            StrategyKind::PseudoLabel => "pseudo_label",
            StrategyKind::LwfReplay => "lwf_replay",
            StrategyKind::Joint => "joint",
        }
    }

    pub fn uses_teacher(self) -> bool {
        matches!(
            self,
            StrategyKind::Lwf | StrategyKind::PseudoLabel | StrategyKind::LwfReplay
        )
    }

    pub fn uses_buffer(self) -> bool {
        matches!(self, StrategyKind::Replay | StrategyKind::LwfReplay)
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub name: StrategyKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the distillation term.
    pub tau_lwf: f64,
    /// Fraction of each batch drawn from the replay buffer.
    pub mix_ratio: f64,
    /// Buffer capacity as a fraction of the dataset size.
    pub buffer_fraction: f64,
    pub hidden_layers: Vec<usize>,
    #[serde(skip)]
    pub seed: u64,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        StrategyConfig {
            name: StrategyKind::FineTune,
            learning_rate: 0.05,
            epochs: 20,
            batch_size: 32,
            tau_lwf: 2.0,
            mix_ratio: 0.5,
            buffer_fraction: 0.03,
            hidden_layers: vec![32],
            seed: 0,
        }
    }
}

impl StrategyConfig {
    pub fn new(name: StrategyKind) -> Self {
        StrategyConfig {
            name,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("strategy {}: {m}", self.name)));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.mix_ratio) {
            return bad(format!(
                "mix_ratio must lie in [0,1], got {}",
                self.mix_ratio
            ));
        }
        if !(self.tau_lwf >= 0.0) || !self.tau_lwf.is_finite() {
            return bad(format!("tau_lwf must be nonnegative, got {}", self.tau_lwf));
        }
        if !(self.buffer_fraction > 0.0 && self.buffer_fraction <= 1.0) {
            return bad(format!(
                "buffer_fraction must lie in (0,1], got {}",
                self.buffer_fraction
            ));
        }
        if self.hidden_layers.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub label_index: usize,
    pub name: String,
    pub origin_task: usize,
    pub threshold: f64,
    /// Validation F1 at the threshold; `None` on fallback.
    pub f1: Option<f64>,
    /// Set when the origin validation set had no positives and 0.5 was used.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub calibrated_after_task: usize,
    pub entries: Vec<ThresholdEntry>,
}

impl ThresholdTable {
    pub fn get(&self, label: usize) -> Option<&ThresholdEntry> {
        self.entries.iter().find(|e| e.label_index == label)
    }
}

pub const FALLBACK_THRESHOLD: f64 = 0.5;

/// Per-label F1-maximizing thresholds on each label's origin-task validation set.
pub fn calibrate_thresholds(
    model: &ModelState,
    stream: &TaskStream,
    upto: usize,
) -> Result<ThresholdTable> {
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
    let mut entries = Vec::with_capacity(needed);
    for (k, task) in stream.tasks[..=upto].iter().enumerate() {
        let preds = task
            .val
            .iter()
            .map(|e| {
                model
                    .forward(&stream.samples[e.sample].features)
                    .map(|p| p.0)
            })
            .collect::<Result<Vec<_>>>()?;
        for &label in &task.label_indices {
            let scores: Vec<f64> = preds.iter().map(|p| p[label]).collect();
            let truths: Vec<bool> = task
                .val
                .iter()
                .map(|e| stream.samples[e.sample].truth[label])
                .collect();
            let (threshold, f1, fallback) = if truths.iter().any(|&t| t) {
                let (t, f1) = best_f1_threshold(&scores, &truths)?;
                (t, Some(f1), false)
            } else {
                (FALLBACK_THRESHOLD, None, true)
            };
            entries.push(ThresholdEntry {
                label_index: label,
                name: stream.label_registry[label].clone(),
                origin_task: k,
                threshold,
                f1,
                fallback,
            });
        }
    }
    Ok(ThresholdTable {
        calibrated_after_task: upto,
        entries,
    })
}

/// Fixed-capacity uniform sample of every train entry offered so far.
///
/// Maintained by reservoir sampling, so after any number of updates the
/// contents are a uniform subset, without replacement, of the union of all
/// offered entries. Entries keep the label mask of the task they came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    seen: usize,
    entries: Vec<TaskEntry>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity,
            seen: 0,
            entries: Vec::with_capacity(capacity),
        }
    }

    /// Capacity `ceil(fraction * dataset_size)`.
    pub fn for_dataset(dataset_size: usize, fraction: f64) -> Self {
        ReplayBuffer::new((fraction * dataset_size as f64).ceil() as usize)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries offered so far.
    pub fn seen(&self) -> usize {
        self.seen
    }

    pub fn entries(&self) -> &[TaskEntry] {
        &self.entries
    }

    /// Offers a task's train set to the buffer.
    pub fn update(&mut self, train_set: &[TaskEntry], rng: &mut Rng) {
        for entry in train_set {
            self.seen += 1;
            if self.entries.len() < self.capacity {
                self.entries.push(entry.clone());
            } else {
                let slot = rng.random_range(0..self.seen);
                if slot < self.capacity {
                    self.entries[slot] = entry.clone();
                }
            }
        }
    }
}

/// Buffer update after a task, with the task's own random stream.
pub fn update_buffer(
    buffer: &mut ReplayBuffer,
    task_train_set: &[TaskEntry],
    seed: u64,
    task_index: usize,
) {
    let mut rng = rng_for(seed, streams::BUFFER_UPDATE + task_index as u64);
    buffer.update(task_train_set, &mut rng);
}

/// Number of replayed entries in a batch: `ceil(mix * batch_size)` when the
/// buffer has anything in it, else 0.
pub fn replay_share(batch_size: usize, mix_ratio: f64, buffer_len: usize) -> usize {
    if buffer_len == 0 {
        0
    } else {
        ((mix_ratio * batch_size as f64).ceil() as usize).min(batch_size)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BatchItem<'a> {
    pub entry: &'a TaskEntry,
    pub from_buffer: bool,
}

/// Buffer draws followed by current-task entries. Draws are without
/// replacement unless the buffer is smaller than its share.
pub fn compose_replay_batch<'a>(
    current: &[&'a TaskEntry],
    buffer: &'a ReplayBuffer,
    batch_size: usize,
    mix_ratio: f64,
    rng: &mut Rng,
) -> Result<Vec<BatchItem<'a>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&mix_ratio) {
        return Err(Error::Config(format!(
            "mix_ratio must lie in [0,1], got {mix_ratio}"
        )));
    }
    let share = replay_share(batch_size, mix_ratio, buffer.len());
    let mut batch = Vec::with_capacity(batch_size);
    if share > 0 {
        if buffer.len() >= share {
            for i in index::sample(rng, buffer.len(), share) {
                batch.push(BatchItem {
                    entry: &buffer.entries[i],
                    from_buffer: true,
                });
            }
        } else {
            for _ in 0..share {
                batch.push(BatchItem {
                    entry: &buffer.entries[rng.random_range(0..buffer.len())],
                    from_buffer: true,
                });
            }
        }
    }
    batch.extend(
        current
            .iter()
            .take(batch_size - share)
            .map(|&entry| BatchItem {
                entry,
                from_buffer: false,
            }),
    );
    Ok(batch)
}

/// Hard targets for one sample: the teacher's old-label probabilities
/// binarized per label (`p >= threshold` gives 1), merged with the sample's
/// current-task targets.
pub fn pseudo_label_targets(
    teacher: &ModelState,
    thresholds: &ThresholdTable,
    batch: &[(&[f64], &TargetVector)],
    old_labels: usize,
) -> Result<Vec<TargetVector>> {
    let cutoffs = (0..old_labels)
        .map(|l| {
            thresholds
                .get(l)
                .map(|e| e.threshold)
                .ok_or_else(|| Error::Strategy(format!("no threshold for old label {l}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if old_labels > teacher.num_outputs() {
        return Err(Error::Shape(format!(
            "teacher covers {} labels, asked for {old_labels}",
            teacher.num_outputs()
        )));
    }
    batch
        .iter()
        .map(|&(features, target)| {
            let mut out = target.clone();
            if old_labels == 0 {
                return Ok(out);
            }
            if out.len() < old_labels {
                return Err(Error::DimensionMismatch {
                    context: "pseudo-label target",
                    expected: old_labels,
                    got: out.len(),
                });
            }
            let probs = teacher.forward(features)?;
            for (l, &cut) in cutoffs.iter().enumerate() {
                out.values[l] = if probs[l] >= cut { 1.0 } else { 0.0 };
                out.known[l] = true;
            }
            Ok(out)
        })
        .collect()
}

/// What happened while training on one task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskLog {
    /// Mean batch loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Entries drawn from the replay buffer.
    pub buffer_draws: usize,
    /// Stream sample indices that contributed a gradient.
    pub samples_used: BTreeSet<usize>,
}

/// The shared SGD loop. `rng_task` selects the random streams.
fn run_task(
    model: &mut ModelState,
    stream: &TaskStream,
    current: &[TaskEntry],
    config: &StrategyConfig,
    rng_task: usize,
    buffer: Option<&ReplayBuffer>,
    teacher: Option<&ModelState>,
) -> Result<TaskLog> {
    config.validate()?;
    let batch_size = config.batch_size;
    let buffer = buffer.filter(|b| !b.is_empty());
    let share = buffer.map_or(0, |b| replay_share(batch_size, config.mix_ratio, b.len()));
    let chunk = if share < batch_size {
        batch_size - share
    } else {
        batch_size
    };
    let spec = match teacher {
        Some(teacher) if config.tau_lwf != 0.0 => LossSpec::WithDistillation {
            teacher,
            weight: config.tau_lwf,
        },
        _ => LossSpec::MaskedBce,
    };

    let mut order_rng = rng_for(config.seed, streams::BATCH_ORDER + rng_task as u64);
    let mut draw_rng = rng_for(config.seed, streams::REPLAY_DRAW + rng_task as u64);
    let head = model.num_outputs();
    let mut order: Vec<usize> = (0..current.len()).collect();
    let mut log = TaskLog::default();

    for _ in 0..config.epochs {
        order.shuffle(&mut order_rng);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for idx in order.chunks(chunk) {
            let cur: Vec<&TaskEntry> = if share >= batch_size {
                Vec::new()
            } else {
                idx.iter().map(|&i| &current[i]).collect()
            };
            let items = match buffer {
                Some(b) => {
                    compose_replay_batch(&cur, b, batch_size, config.mix_ratio, &mut draw_rng)?
                }
                None => cur
                    .iter()
                    .map(|&entry| BatchItem {
                        entry,
                        from_buffer: false,
                    })
                    .collect(),
            };
            let targets: Vec<TargetVector> = items
                .iter()
                .map(|it| it.entry.target.truncated(head))
                .collect();
            let examples: Vec<Example<'_>> = items
                .iter()
                .zip(&targets)
                .map(|(it, target)| Example {
                    features: &stream.samples[it.entry.sample].features,
                    target,
                    distill: !it.from_buffer,
                })
                .collect();
            let (loss, grads) = loss_and_gradients(model, &examples, spec)?;
            if !loss.total.is_finite() {
                return Err(Error::Strategy(format!("loss diverged ({})", loss.total)));
            }
            model.sgd_step(&grads, config.learning_rate)?;
            loss_sum += loss.total;
            batches += 1;
            log.steps += 1;
            for it in &items {
                log.buffer_draws += it.from_buffer as usize;
                log.samples_used.insert(it.entry.sample);
            }
        }
        if batches > 0 {
            log.epoch_losses.push(loss_sum / batches as f64);
        }
    }
    Ok(log)
}

fn check_head(model: &ModelState, stream: &TaskStream, task: usize) -> Result<()> {
    if task >= stream.tasks.len() {
        return Err(Error::Stream(format!("no task {task}")));
    }
    let needed = stream.labels_through(task);
    if model.num_outputs() != needed {
        return Err(Error::Shape(format!(
            "task {task} needs a head of {needed} outputs, model has {}",
            model.num_outputs()
        )));
    }
    Ok(())
}

/// Plain SGD on the task's visible labels.
pub fn fine_tune_task(
    model: &mut ModelState,
    stream: &TaskStream,
    task: usize,
    config: &StrategyConfig,
) -> Result<TaskLog> {
    check_head(model, stream, task)?;
    run_task(
        model,
        stream,
        &stream.tasks[task].train,
        config,
        task,
        None,
        None,
    )
}

/// Current-task batches mixed with replayed entries.
pub fn replay_task(
    model: &mut ModelState,
    buffer: &ReplayBuffer,
    stream: &TaskStream,
    task: usize,
    config: &StrategyConfig,
) -> Result<TaskLog> {
    check_head(model, stream, task)?;
    run_task(
        model,
        stream,
        &stream.tasks[task].train,
        config,
        task,
        Some(buffer),
        None,
    )
}

/// Masked BCE on current labels plus `tau_lwf` times distillation toward the
/// teacher on the old labels.
pub fn lwf_task(
    model: &mut ModelState,
    teacher: &ModelState,
    stream: &TaskStream,
    task: usize,
    config: &StrategyConfig,
) -> Result<TaskLog> {
    check_head(model, stream, task)?;
    check_teacher(teacher, stream, task)?;
    run_task(
        model,
        stream,
        &stream.tasks[task].train,
        config,
        task,
        None,
        Some(teacher),
    )
}

/// LwF with replayed entries mixed in. Replayed entries are supervised on
/// their own stored masks and get no distillation term.
pub fn lwf_replay_task(
    model: &mut ModelState,
    teacher: Option<&ModelState>,
    buffer: &ReplayBuffer,
    stream: &TaskStream,
    task: usize,
    config: &StrategyConfig,
) -> Result<TaskLog> {
    check_head(model, stream, task)?;
    if let Some(t) = teacher {
        check_teacher(t, stream, task)?;
    } else if task > 0 {
        return Err(Error::Strategy(format!(
            "lwf_replay on task {task} needs a teacher"
        )));
    }
    run_task(
        model,
        stream,
        &stream.tasks[task].train,
        config,
        task,
        Some(buffer),
        teacher,
    )
}

/// SGD against pseudo-labeled old labels together with the current labels.
pub fn pseudo_label_task(
    model: &mut ModelState,
    teacher: Option<&ModelState>,
    thresholds: Option<&ThresholdTable>,
    stream: &TaskStream,
    task: usize,
    config: &StrategyConfig,
) -> Result<TaskLog> {
    check_head(model, stream, task)?;
    let train = &stream.tasks[task].train;
    let augmented: Vec<TaskEntry> = match (teacher, thresholds) {
        (Some(teacher), Some(table)) => {
            check_teacher(teacher, stream, task)?;
            let old = teacher.num_outputs();
            let pairs: Vec<(&[f64], &TargetVector)> = train
                .iter()
                .map(|e| (stream.samples[e.sample].features.as_slice(), &e.target))
                .collect();
            pseudo_label_targets(teacher, table, &pairs, old)?
                .into_iter()
                .zip(train)
                .map(|(target, e)| TaskEntry {
                    sample: e.sample,
                    task: e.task,
                    target,
                })
                .collect()
        }
        (None, _) if task == 0 => train.clone(),
        _ => {
            return Err(Error::Strategy(format!(
                "pseudo_label on task {task} needs a teacher and thresholds"
            )))
        }
    };
    run_task(model, stream, &augmented, config, task, None, None)
}

fn check_teacher(teacher: &ModelState, stream: &TaskStream, task: usize) -> Result<()> {
    let old = if task == 0 {
        0
    } else {
        stream.labels_through(task - 1)
    };
    if teacher.num_outputs() != old {
        return Err(Error::Shape(format!(
            "teacher for task {task} must cover the {old} old labels, has {}",
            teacher.num_outputs()
        )));
    }
    Ok(())
}

/// Every task's train entries merged per sample, masks unioned, in order of
/// first appearance.
pub fn joint_entries(stream: &TaskStream) -> Result<Vec<TaskEntry>> {
    let mut merged: Vec<TaskEntry> = Vec::new();
    let mut position: HashMap<usize, usize> = HashMap::new();
    for task in &stream.tasks {
        for e in &task.train {
            match position.get(&e.sample) {
                Some(&i) => merged[i].target = merged[i].target.union(&e.target)?,
                None => {
                    position.insert(e.sample, merged.len());
                    merged.push(e.clone());
                }
            }
        }
    }
    Ok(merged)
}

/// One training phase over all tasks with the full head.
pub fn joint_train(
    model: &mut ModelState,
    stream: &TaskStream,
    config: &StrategyConfig,
) -> Result<TaskLog> {
    if model.num_outputs() != stream.num_labels() {
        return Err(Error::Shape(format!(
            "joint training needs {} outputs, model has {}",
            stream.num_labels(),
            model.num_outputs()
        )));
    }
    let entries = joint_entries(stream)?;
    run_task(model, stream, &entries, config, 0, None, None)
}

#[derive(Clone, Debug)]
pub struct TrainingOutcome {
    pub final_model: ModelState,
    /// Model after each task. Joint training repeats its single model.
    pub checkpoints: Vec<ModelState>,
    /// Thresholds calibrated after each task.
    pub thresholds: Vec<ThresholdTable>,
    pub logs: Vec<TaskLog>,
    pub teacher_snapshots: usize,
}

/// Runs one strategy over the whole stream.
pub fn train_sequence(config: &StrategyConfig, stream: &TaskStream) -> Result<TrainingOutcome> {
    config.validate()?;
    if stream.tasks.is_empty() {
        return Err(Error::Stream("empty stream".into()));
    }
    let mut sizes = vec![stream.feature_dim()];
    sizes.extend(&config.hidden_layers);

    if config.name == StrategyKind::Joint {
        sizes.push(stream.num_labels());
        let mut model = ModelState::new(&sizes, config.seed)?;
        let log = joint_train(&mut model, stream, config)?;
        let table = calibrate_thresholds(&model, stream, stream.tasks.len() - 1)?;
        let n = stream.tasks.len();
        return Ok(TrainingOutcome {
            checkpoints: vec![model.clone(); n],
            thresholds: vec![table; n],
            final_model: model,
            logs: vec![log],
            teacher_snapshots: 0,
        });
    }

    sizes.push(stream.tasks[0].label_indices.len());
    let mut model = ModelState::new(&sizes, config.seed)?;
    let mut buffer = ReplayBuffer::for_dataset(stream.dataset_size(), config.buffer_fraction);
    let mut checkpoints = Vec::with_capacity(stream.tasks.len());
    let mut thresholds: Vec<ThresholdTable> = Vec::with_capacity(stream.tasks.len());
    let mut logs = Vec::with_capacity(stream.tasks.len());
    let mut teacher_snapshots = 0;

    for (j, task) in stream.tasks.iter().enumerate() {
        let mut teacher = None;
        if j > 0 {
            if config.name.uses_teacher() {
                teacher = Some(model.snapshot());
                teacher_snapshots += 1;
            }
            model = model.expand_output_head(task.label_indices.len(), config.seed)?;
        }
        let log = match config.name {
            StrategyKind::FineTune => fine_tune_task(&mut model, stream, j, config)?,
            StrategyKind::Replay => replay_task(&mut model, &buffer, stream, j, config)?,
            StrategyKind::Lwf => match &teacher {
                Some(t) => lwf_task(&mut model, t, stream, j, config)?,
                None => fine_tune_task(&mut model, stream, j, config)?,
            },
            StrategyKind::PseudoLabel => pseudo_label_task(
                &mut model,
                teacher.as_ref(),
                thresholds.last(),
                stream,
                j,
                config,
            )?,
            StrategyKind::LwfReplay => {
                lwf_replay_task(&mut model, teacher.as_ref(), &buffer, stream, j, config)?
            }
            StrategyKind::Joint => unreachable!("handled above"),
        };
        if config.name.uses_buffer() {
            update_buffer(&mut buffer, &task.train, config.seed, j);
        }
        thresholds.push(calibrate_thresholds(&model, stream, j)?);
        checkpoints.push(model.clone());
        logs.push(log);
    }

    Ok(TrainingOutcome {
        final_model: model,
        checkpoints,
        thresholds,
        logs,
        teacher_snapshots,
    })
}
