//! Trains fine-tuning and LwF on a small synthetic stream and prints the
//! seen-label AUC after each task.

use faircl::datastream::{generate_synthetic, SyntheticConfig};
use faircl::metrics::evaluate_checkpoint;
use faircl::runner::prepare_stream;
use faircl::strategies::{train_sequence, StrategyConfig, StrategyKind};

fn main() -> faircl::Result<()> {
    let data = SyntheticConfig {
        label_correlations: 0.4,
        ..Default::default()
    };
    let dataset = generate_synthetic(&data)?;
    let stream = prepare_stream(&dataset, &data.task_specs(), Default::default(), 0)?;

    for kind in [StrategyKind::FineTune, StrategyKind::Lwf] {
        let config = StrategyConfig {
            learning_rate: 0.3,
            epochs: 60,
            hidden_layers: vec![8],
            ..StrategyConfig::new(kind)
        };
        let outcome = train_sequence(&config, &stream)?;
        let aucs = outcome
            .checkpoints
            .iter()
            .zip(&outcome.thresholds)
            .enumerate()
            .map(|(j, (m, t))| {
                evaluate_checkpoint(m, &stream, j, t).map(|r| r.mean_auc.unwrap_or(f64::NAN))
            })
            .collect::<faircl::Result<Vec<_>>>()?;
        let line: Vec<String> = aucs.iter().map(|a| format!("{a:.3}")).collect();
        println!("{kind:<10} {}", line.join("  "));
    }
    Ok(())
}
