//! Trains a model on a generated dataset and reports free-running accuracy.
//!
//! Usage: `cargo run --release --example train_pmp -- [model] [iterations]`
//! where model is pmp, selective, overwrite or oracle.

use std::time::Instant;

use pmp::dataset::{generate, DatasetSpec};
use pmp::eval::{evaluate, mask_accuracy};
use pmp::model::{Mode, ModelKind};
use pmp::train::{train_with, MetricsRow, Profile, TrainConfig, TrainObserver};

struct Progress(Instant);

impl TrainObserver for Progress {
    fn on_log(&mut self, row: &MetricsRow) {
        let eval = row.eval_query_accuracy.map(|a| format!(", held-out accuracy {a:.3}")).unwrap_or_default();
        println!(
            "[{:>5.0}s] iter {:>5} loss {:.4}{eval}",
            self.0.elapsed().as_secs_f64(),
            row.iteration,
            row.loss.total()
        );
    }
}

fn main() -> pmp::Result<()> {
    let mut args = std::env::args().skip(1);
    let model: ModelKind = args.next().as_deref().unwrap_or("pmp").parse()?;
    let iterations: usize = args.next().map(|s| s.parse().expect("iterations")).unwrap_or(300);

    let train = generate(&DatasetSpec::in_distribution(100, 1000))?;
    let test = generate(&DatasetSpec::in_distribution(200, 200))?;
    let ood = generate(&DatasetSpec::out_of_distribution(300, 200))?;

    let mut config = TrainConfig::profile(Profile::Desk);
    config.model = model;
    config.iterations = iterations;
    config.eval_every = iterations.div_ceil(4);
    let outcome = train_with(&config, &train, Some(&test), &mut Progress(Instant::now()))?;

    let masks = mask_accuracy(&outcome.params, &test)?;
    println!("teacher-forced mask accuracy: {masks:?}");
    for (name, data) in [("in-distribution", &test), ("larger arrays", &ood)] {
        let r = evaluate(&outcome.params, data, Mode::Free)?;
        println!(
            "{name}: query accuracy {:.3}, bit accuracy {:.3}, final states {:.1}",
            r.query_accuracy, r.bit_accuracy, r.mean_final_states
        );
    }
    Ok(())
}
