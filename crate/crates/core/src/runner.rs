//! Seeded experiments and their outputs.
//!
//! An experiment is a grid of (strategy, seed) cells. Each cell trains a fresh
//! model over the seed's task stream and is evaluated after every task. The
//! resulting [`ResultsRecord`] is written as `record.json`; tables and plot
//! series are derived from it and can be regenerated from the file alone.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datastream::{
    build_task_stream, exclude_no_finding, generate_synthetic, keep_one_image_per_patient,
    load_manifest, load_task_specs, Dataset, SplitRatios, SyntheticConfig, TaskSpec, TaskStream,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_checkpoint, Group, MetricReport};
use crate::strategies::{train_sequence, StrategyConfig, StrategyKind};

pub const RECORD_FILE: &str = "record.json";
pub const OUT_ENV: &str = "FAIRCL_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Manifest { path: PathBuf },
    Synthetic(SyntheticConfig),
}

fn default_name() -> String {
    "synthetic".into()
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Dataset label used in table headers.
    #[serde(default = "default_name")]
    pub name: String,
    pub data: DataSource,
    /// Required for manifests; synthetic data falls back to a contiguous
    /// partition of its labels.
    #[serde(default)]
    pub task_spec: Option<PathBuf>,
    #[serde(default)]
    pub split_ratios: SplitRatios,
    pub strategies: Vec<StrategyConfig>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads TOML, or JSON when the extension is `.json`. Relative paths are
    /// resolved against the config file's directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::Manifest { path } = &mut config.data {
            resolve(path);
        }
        if let Some(p) = &mut config.task_spec {
            resolve(p);
        }
        if let Some(p) = &mut config.output_dir {
            resolve(p);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.split_ratios.validate()?;
        let mut names = std::collections::HashSet::new();
        for s in &self.strategies {
            s.validate()?;
            if !names.insert(s.name) {
                return Err(Error::Config(format!("strategy {} listed twice", s.name)));
            }
        }
        if let DataSource::Manifest { path } = &self.data {
            if !path.is_file() {
                return Err(Error::Config(format!(
                    "manifest {} does not exist",
                    path.display()
                )));
            }
            if self.task_spec.is_none() {
                return Err(Error::Config(
                    "a manifest data source needs task_spec".into(),
                ));
            }
        }
        if let Some(p) = &self.task_spec {
            if !p.is_file() {
                return Err(Error::Config(format!(
                    "task spec {} does not exist",
                    p.display()
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSource::Manifest { path } => load_manifest(path),
            DataSource::Synthetic(cfg) => generate_synthetic(cfg),
        }
    }

    pub fn task_specs(&self) -> Result<Vec<TaskSpec>> {
        match (&self.task_spec, &self.data) {
            (Some(p), _) => load_task_specs(p),
            (None, DataSource::Synthetic(cfg)) => Ok(cfg.task_specs()),
            (None, DataSource::Manifest { .. }) => Err(Error::Config(
                "a manifest data source needs task_spec".into(),
            )),
        }
    }
}

/// Preprocessing shared by every cell of a seed: one image per patient,
/// "no finding" samples dropped, then the task stream.
pub fn prepare_stream(
    dataset: &Dataset,
    specs: &[TaskSpec],
    ratios: SplitRatios,
    seed: u64,
) -> Result<TaskStream> {
    let dataset = exclude_no_finding(&keep_one_image_per_patient(dataset, seed));
    build_task_stream(&dataset, specs, ratios, seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// One report per task checkpoint.
    pub reports: Vec<MetricReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedMeanPoint {
    pub strategy: StrategyKind,
    pub task_index: usize,
    pub seeds: usize,
    pub mean_auc: Option<f64>,
    pub mean_gender_eo: Option<f64>,
    pub mean_age_eo: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub name: String,
    pub config_hash: String,
    pub crate_version: String,
    pub num_tasks: usize,
    pub labels: Vec<String>,
    pub joint_label_masks: String,
    pub started_at: u64,
    pub finished_at: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRecord {
    pub metadata: Metadata,
    pub config: ExperimentConfig,
    pub cells: Vec<Cell>,
    pub seed_means: Vec<SeedMeanPoint>,
}

impl ResultsRecord {
    /// Record with timestamps zeroed, for comparing runs.
    pub fn without_timestamps(&self) -> ResultsRecord {
        let mut r = self.clone();
        r.metadata.started_at = 0;
        r.metadata.finished_at = 0;
        r
    }

    pub fn strategies(&self) -> Vec<StrategyKind> {
        let mut out: Vec<StrategyKind> = Vec::new();
        for c in &self.cells {
            if !out.contains(&c.strategy) {
                out.push(c.strategy);
            }
        }
        out
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Writes `record.json` into `dir` via a temporary file and rename.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RECORD_FILE);
        let tmp = dir.join(format!(".{RECORD_FILE}.tmp"));
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(&tmp, json).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

/// Trains one strategy on one seed's stream and evaluates every checkpoint.
pub fn run_cell(
    strategy: &StrategyConfig,
    seed: u64,
    stream: &TaskStream,
) -> Result<Vec<MetricReport>> {
    let config = StrategyConfig {
        seed,
        ..strategy.clone()
    };
    let outcome = train_sequence(&config, stream)?;
    outcome
        .checkpoints
        .iter()
        .zip(&outcome.thresholds)
        .enumerate()
        .map(|(j, (model, table))| evaluate_checkpoint(model, stream, j, table))
        .collect()
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = values
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn seed_means(cells: &[Cell], num_tasks: usize) -> Vec<SeedMeanPoint> {
    let mut order: Vec<StrategyKind> = Vec::new();
    let mut by_strategy: BTreeMap<StrategyKind, Vec<&Cell>> = BTreeMap::new();
    for c in cells.iter().filter(|c| c.status == CellStatus::Completed) {
        if !order.contains(&c.strategy) {
            order.push(c.strategy);
        }
        by_strategy.entry(c.strategy).or_default().push(c);
    }
    let mut out = Vec::new();
    for s in order {
        let group = &by_strategy[&s];
        for j in 0..num_tasks {
            let reports: Vec<&MetricReport> =
                group.iter().filter_map(|c| c.reports.get(j)).collect();
            out.push(SeedMeanPoint {
                strategy: s,
                task_index: j,
                seeds: reports.len(),
                mean_auc: mean(reports.iter().map(|r| r.mean_auc)),
                mean_gender_eo: mean(reports.iter().map(|r| r.mean_gender_eo)),
                mean_age_eo: mean(reports.iter().map(|r| r.mean_age_eo)),
            });
        }
    }
    out
}

/// Runs every (strategy, seed) cell. A failing cell is recorded and the rest
/// continue; data loading and config errors abort before any training.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ResultsRecord> {
    run_experiment_with(config, run_cell)
}

/// [`run_experiment`] with a custom per-cell trainer and evaluator.
pub fn run_experiment_with<F>(config: &ExperimentConfig, mut cell_fn: F) -> Result<ResultsRecord>
where
    F: FnMut(&StrategyConfig, u64, &TaskStream) -> Result<Vec<MetricReport>>,
{
    config.validate()?;
    let started_at = unix_now();
    let dataset = config.load_dataset()?;
    let specs = config.task_specs()?;

    let streams: Vec<Result<TaskStream>> = config
        .seeds
        .iter()
        .map(|&seed| prepare_stream(&dataset, &specs, config.split_ratios, seed))
        .collect();
    if let Some(Err(e)) = streams.iter().find(|s| s.is_err()) {
        // Stream construction only depends on data and specs up to the split
        // seed, so a failure here is a configuration problem.
        return Err(Error::Stream(e.to_string()));
    }
    let streams: Vec<TaskStream> = streams.into_iter().map(|s| s.expect("checked")).collect();

    let mut cells = Vec::with_capacity(config.strategies.len() * config.seeds.len());
    for strategy in &config.strategies {
        for (&seed, stream) in config.seeds.iter().zip(&streams) {
            let cell = match cell_fn(strategy, seed, stream) {
                Ok(reports) => Cell {
                    strategy: strategy.name,
                    seed,
                    status: CellStatus::Completed,
                    error: None,
                    reports,
                },
                Err(e) => Cell {
                    strategy: strategy.name,
                    seed,
                    status: CellStatus::Failed,
                    error: Some(e.to_string()),
                    reports: Vec::new(),
                },
            };
            cells.push(cell);
        }
    }

    let num_tasks = specs.len();
    let seed_means = seed_means(&cells, num_tasks);
    Ok(ResultsRecord {
        metadata: Metadata {
            name: config.name.clone(),
            config_hash: config.hash(),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            num_tasks,
            labels: streams[0].label_registry.clone(),
            joint_label_masks: "union of task masks per sample".into(),
            started_at,
            finished_at: unix_now(),
        },
        config: config.clone(),
        cells,
        seed_means,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub strategy: StrategyKind,
    pub seeds: usize,
    pub auc: Option<f64>,
    pub gender_eo: Option<f64>,
    pub age_eo: Option<f64>,
}

/// Final-checkpoint, seed-averaged comparison of strategies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub dataset: String,
    pub rows: Vec<TableRow>,
    /// Row index of the best value per column: highest AUC, smallest |EO|.
    pub best_auc: Option<usize>,
    pub best_gender_eo: Option<usize>,
    pub best_age_eo: Option<usize>,
}

fn best_by(rows: &[TableRow], key: impl Fn(&TableRow) -> Option<f64>) -> Option<usize> {
    rows.iter()
        .enumerate()
        .filter_map(|(i, r)| key(r).map(|v| (i, v)))
        .fold(None, |best: Option<(usize, f64)>, (i, v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

pub fn emit_comparison_table(record: &ResultsRecord) -> Result<ComparisonTable> {
    if record.cells.is_empty() {
        return Err(Error::Config("record has no cells".into()));
    }
    let rows: Vec<TableRow> = record
        .strategies()
        .into_iter()
        .map(|s| {
            let finals: Vec<&MetricReport> = record
                .cells
                .iter()
                .filter(|c| c.strategy == s && c.status == CellStatus::Completed)
                .filter_map(|c| c.reports.last())
                .collect();
            TableRow {
                strategy: s,
                seeds: finals.len(),
                auc: mean(finals.iter().map(|r| r.mean_auc)),
                gender_eo: mean(finals.iter().map(|r| r.mean_gender_eo)),
                age_eo: mean(finals.iter().map(|r| r.mean_age_eo)),
            }
        })
        .collect();
    Ok(ComparisonTable {
        dataset: record.metadata.name.clone(),
        best_auc: best_by(&rows, |r| r.auc),
        best_gender_eo: best_by(&rows, |r| r.gender_eo.map(|v| -v.abs())),
        best_age_eo: best_by(&rows, |r| r.age_eo.map(|v| -v.abs())),
        rows,
    })
}

fn fmt_value(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let d = &self.dataset;
        let mut out = format!("strategy,seeds,{d}_auc,{d}_gender_eo,{d}_age_eo,best\n");
        for (i, r) in self.rows.iter().enumerate() {
            let best: Vec<&str> = [
                (self.best_auc, "auc"),
                (self.best_gender_eo, "gender_eo"),
                (self.best_age_eo, "age_eo"),
            ]
            .into_iter()
            .filter(|(b, _)| *b == Some(i))
            .map(|(_, n)| n)
            .collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.strategy,
                r.seeds,
                fmt_value(r.auc),
                fmt_value(r.gender_eo),
                fmt_value(r.age_eo),
                best.join(";")
            );
        }
        out
    }

    /// Aligned text; `*` marks the best value in each column.
    pub fn to_text(&self) -> String {
        let cell = |v: Option<f64>, best: bool| {
            let s = v.map_or_else(|| "-".to_string(), |v| format!("{v:+.3}"));
            if best {
                format!("{s}*")
            } else {
                s
            }
        };
        let mut out = format!(
            "{:<14}{:>28}\n{:<14}{:>10}{:>10}{:>10}\n",
            "", self.dataset, "strategy", "AUC", "Gender EO", "Age EO"
        );
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<14}{:>10}{:>10}{:>10}",
                r.strategy.as_str(),
                cell(r.auc, self.best_auc == Some(i)).trim_start_matches('+'),
                cell(r.gender_eo, self.best_gender_eo == Some(i)),
                cell(r.age_eo, self.best_age_eo == Some(i)),
            );
        }
        out
    }
}

/// One plot-ready CSV: `strategy,seed,task_index,value` plus seed-mean rows
/// with `seed = mean`.
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub metric: String,
    pub csv: String,
}

type Extractor = Box<dyn Fn(&MetricReport) -> Option<f64>>;

fn series_metrics() -> Vec<(String, Extractor)> {
    let mut out: Vec<(String, Extractor)> = vec![
        ("avg_auc".into(), Box::new(|r: &MetricReport| r.mean_auc)),
        (
            "gender_eo".into(),
            Box::new(|r: &MetricReport| r.mean_gender_eo),
        ),
        ("age_eo".into(), Box::new(|r: &MetricReport| r.mean_age_eo)),
    ];
    for g in Group::ALL {
        out.push((
            format!("tpr_{}", g.name()),
            Box::new(move |r: &MetricReport| r.mean_tpr.get(g)),
        ));
    }
    out
}

pub fn emit_plot_series(record: &ResultsRecord) -> Vec<Series> {
    series_metrics()
        .into_iter()
        .map(|(metric, value)| {
            let mut csv = String::from("strategy,seed,task_index,value\n");
            for s in record.strategies() {
                let cells: Vec<&Cell> = record
                    .cells
                    .iter()
                    .filter(|c| c.strategy == s && c.status == CellStatus::Completed)
                    .collect();
                for c in &cells {
                    for r in &c.reports {
                        let _ = writeln!(
                            csv,
                            "{s},{},{},{}",
                            c.seed,
                            r.task_index,
                            fmt_value(value(r))
                        );
                    }
                }
                let tasks = cells.iter().map(|c| c.reports.len()).max().unwrap_or(0);
                for j in 0..tasks {
                    let m = mean(cells.iter().filter_map(|c| c.reports.get(j)).map(&value));
                    let _ = writeln!(csv, "{s},mean,{j},{}", fmt_value(m));
                }
            }
            Series { metric, csv }
        })
        .collect()
}

/// Writes `table.csv`, `table.txt` and `series/*.csv` into `dir`.
pub fn write_reports(record: &ResultsRecord, dir: impl AsRef<Path>) -> Result<ComparisonTable> {
    let dir = dir.as_ref();
    let series_dir = dir.join("series");
    std::fs::create_dir_all(&series_dir).map_err(|e| Error::io(&series_dir, e))?;
    let table = emit_comparison_table(record)?;
    let write =
        |path: PathBuf, text: &str| std::fs::write(&path, text).map_err(|e| Error::io(&path, e));
    write(dir.join("table.csv"), &table.to_csv())?;
    write(dir.join("table.txt"), &table.to_text())?;
    for s in emit_plot_series(record) {
        write(series_dir.join(format!("{}.csv", s.metric)), &s.csv)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(task: usize, auc: f64, geo: f64) -> MetricReport {
        MetricReport {
            task_index: task,
            pathologies: vec![],
            mean_auc: Some(auc),
            mean_gender_eo: Some(geo),
            mean_age_eo: None,
            mean_tpr: Default::default(),
            threshold_rule: String::new(),
            excluded: vec![],
        }
    }

    fn record(cells: Vec<Cell>) -> ResultsRecord {
        ResultsRecord {
            metadata: Metadata {
                name: "toy".into(),
                config_hash: String::new(),
                crate_version: String::new(),
                num_tasks: 2,
                labels: vec![],
                joint_label_masks: String::new(),
                started_at: 1,
                finished_at: 2,
            },
            config: ExperimentConfig {
                name: "toy".into(),
                data: DataSource::Synthetic(Default::default()),
                task_spec: None,
                split_ratios: Default::default(),
                strategies: vec![StrategyConfig::default()],
                seeds: vec![0],
                output_dir: None,
            },
            seed_means: seed_means(&cells, 2),
            cells,
        }
    }

    fn cell(strategy: StrategyKind, seed: u64, vals: &[(f64, f64)]) -> Cell {
        Cell {
            strategy,
            seed,
            status: CellStatus::Completed,
            error: None,
            reports: vals
                .iter()
                .enumerate()
                .map(|(j, &(a, g))| report(j, a, g))
                .collect(),
        }
    }

    #[test]
    fn table_averages_finals() {
        let r = record(vec![
            cell(StrategyKind::FineTune, 0, &[(0.9, 0.1), (0.6, 0.2)]),
            cell(StrategyKind::FineTune, 1, &[(0.9, 0.1), (0.8, -0.1)]),
            cell(StrategyKind::Joint, 0, &[(0.9, 0.0), (0.9, 0.05)]),
        ]);
        let t = emit_comparison_table(&r).unwrap();
        assert_eq!(t.rows.len(), 2);
        assert!((t.rows[0].auc.unwrap() - 0.7).abs() < 1e-15);
        assert!((t.rows[0].gender_eo.unwrap() - 0.05).abs() < 1e-15);
        assert_eq!(t.best_auc, Some(1));
        // equal |EO| keeps the first row
        assert_eq!(t.best_gender_eo, Some(0));
        assert_eq!(t.best_age_eo, None);
        let csv = t.to_csv();
        assert!(csv.starts_with("strategy,seeds,toy_auc,toy_gender_eo,toy_age_eo,best\n"));
        assert!(t.to_text().contains('*'));
    }

    #[test]
    fn empty_record_has_no_table() {
        assert!(emit_comparison_table(&record(vec![])).is_err());
    }

    #[test]
    fn series_have_mean_rows() {
        let r = record(vec![
            cell(StrategyKind::Lwf, 0, &[(0.9, 0.1), (0.6, 0.2)]),
            cell(StrategyKind::Lwf, 1, &[(0.7, 0.1), (0.8, -0.1)]),
        ]);
        let series = emit_plot_series(&r);
        assert_eq!(series.len(), 9);
        let auc = &series[0].csv;
        assert!(auc.contains("lwf,mean,0,0.800000\n"));
        assert!(auc.contains("lwf,mean,1,0.700000\n"));
        let names: Vec<&str> = series.iter().map(|s| s.metric.as_str()).collect();
        assert!(names.contains(&"tpr_age_60_80"));
        assert!(names.contains(&"tpr_female"));
    }
}
