use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use faircl::datastream::{
    load_manifest, load_task_specs, render_task_specs, task_frequency_report, write_manifest,
    SplitRatios, SyntheticConfig,
};
use faircl::runner::{
    prepare_stream, run_experiment, write_reports, DataSource, ExperimentConfig, ResultsRecord,
    OUT_ENV, RECORD_FILE,
};
use faircl::{Error, Result};

/// Fairness-aware continual learning experiments on multi-label data.
#[derive(Debug, Parser)]
#[command(name = "faircl", version)]
struct Cli {
    /// Experiment config (TOML, or JSON by extension).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the config's seed list with this single seed.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Output directory. FAIRCL_OUT takes precedence.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic manifest and task spec.
    Synth,
    /// Build a task stream and print its frequency report.
    BuildStream {
        /// Manifest CSV, instead of the config's data source.
        #[arg(long, requires = "tasks")]
        manifest: Option<PathBuf>,
        /// Task spec file to pair with --manifest.
        #[arg(long)]
        tasks: Option<PathBuf>,
    },
    /// Run every strategy and seed of an experiment.
    Run,
    /// Rebuild the comparison table and plot series from a stored record.
    Report {
        /// Defaults to record.json in the output directory.
        #[arg(long)]
        record: Option<PathBuf>,
    },
}

impl Cli {
    fn out_dir(&self, config: Option<&ExperimentConfig>) -> PathBuf {
        std::env::var_os(OUT_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
            .or_else(|| self.out.clone())
            .or_else(|| config.and_then(|c| c.output_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("results"))
    }

    fn load_config(&self) -> Result<Option<ExperimentConfig>> {
        let Some(path) = &self.config else {
            return Ok(None);
        };
        let mut config = ExperimentConfig::from_path(path)?;
        if let Some(seed) = self.seed_override {
            config.seeds = vec![seed];
        }
        Ok(Some(config))
    }

    fn require_config(&self) -> Result<ExperimentConfig> {
        self.load_config()?
            .ok_or_else(|| Error::Config("this command needs --config".into()))
    }
}

fn synth(cli: &Cli) -> Result<()> {
    let mut synthetic = match cli.load_config()? {
        None => SyntheticConfig::default(),
        Some(ExperimentConfig {
            data: DataSource::Synthetic(s),
            ..
        }) => s,
        Some(_) => return Err(Error::Config("synth needs a synthetic data source".into())),
    };
    if let Some(seed) = cli.seed_override {
        synthetic.seed = seed;
    }
    let dataset = faircl::datastream::generate_synthetic(&synthetic)?;
    let out = cli.out_dir(None);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let manifest = out.join("manifest.csv");
    let tasks = out.join("tasks.txt");
    write_manifest(&dataset, &manifest)?;
    std::fs::write(&tasks, render_task_specs(&synthetic.task_specs()))
        .map_err(|e| Error::io(&tasks, e))?;
    println!("wrote {} samples to {}", dataset.len(), manifest.display());
    println!("wrote task spec to {}", tasks.display());
    Ok(())
}

fn build_stream(cli: &Cli, manifest: Option<&Path>, tasks: Option<&Path>) -> Result<()> {
    let config = cli.load_config()?;
    let (dataset, specs, ratios, seed) = match (manifest, &config) {
        (Some(m), _) => {
            let tasks = tasks.expect("clap enforces --tasks");
            let ratios = config
                .as_ref()
                .map_or_else(SplitRatios::default, |c| c.split_ratios);
            let seed = cli
                .seed_override
                .or_else(|| config.as_ref().and_then(|c| c.seeds.first().copied()))
                .unwrap_or(0);
            (load_manifest(m)?, load_task_specs(tasks)?, ratios, seed)
        }
        (None, Some(c)) => {
            c.validate()?;
            (
                c.load_dataset()?,
                c.task_specs()?,
                c.split_ratios,
                c.seeds[0],
            )
        }
        (None, None) => {
            return Err(Error::Config(
                "build-stream needs --config or --manifest".into(),
            ))
        }
    };
    let stream = prepare_stream(&dataset, &specs, ratios, seed)?;
    let report = task_frequency_report(&stream);
    print!("{report}");
    if cli.out.is_some() || std::env::var_os(OUT_ENV).is_some() {
        let out = cli.out_dir(config.as_ref());
        std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let path = out.join("frequency.csv");
        std::fs::write(&path, report.to_csv()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let config = cli.require_config()?;
    let out = cli.out_dir(Some(&config));
    let record = run_experiment(&config)?;
    let path = record.save(&out)?;
    let table = write_reports(&record, &out)?;
    for cell in record.cells.iter().filter(|c| c.error.is_some()) {
        eprintln!(
            "cell {} seed {} failed: {}",
            cell.strategy,
            cell.seed,
            cell.error.as_deref().unwrap_or_default()
        );
    }
    print!("{}", table.to_text());
    println!("record written to {}", path.display());
    Ok(())
}

fn report(cli: &Cli, record: Option<&Path>) -> Result<()> {
    let config = cli.load_config()?;
    let path = record.map_or_else(
        || cli.out_dir(config.as_ref()).join(RECORD_FILE),
        Path::to_path_buf,
    );
    let record = ResultsRecord::load(&path)?;
    let out = if cli.out.is_some() || std::env::var_os(OUT_ENV).is_some() {
        cli.out_dir(None)
    } else {
        path.parent()
            .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
    };
    let table = write_reports(&record, &out)?;
    print!("{}", table.to_text());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth => synth(&cli),
        Command::BuildStream { manifest, tasks } => {
            build_stream(&cli, manifest.as_deref(), tasks.as_deref())
        }
        Command::Run => run(&cli),
        Command::Report { record } => report(&cli, record.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
