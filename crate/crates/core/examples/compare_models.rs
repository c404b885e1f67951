//! Trains every model briefly over two seeds and prints the comparison
//! table. The budget is tiny, so the numbers only show the plumbing.

use pmp::dataset::{generate, DatasetSpec};
use pmp::eval::{compare, evaluate};
use pmp::model::{Mode, ModelConfig, ModelKind};
use pmp::train::{train, Profile, TrainConfig};

fn main() -> pmp::Result<()> {
    let train_set = generate(&DatasetSpec::in_distribution(7, 64))?;
    let test_set = generate(&DatasetSpec::in_distribution(8, 32))?;

    let mut reports = Vec::new();
    for model in ModelKind::ALL {
        for seed in 0..2 {
            let mut config = TrainConfig::profile(Profile::Desk);
            config.model = model;
            config.seed = seed;
            config.iterations = 40;
            config.batch_size = 8;
            config.train_rollouts = 64;
            config.model_config = ModelConfig {
                hidden: 16,
                rounds: 3,
                ..ModelConfig::default()
            };
            let params = train(&config, &train_set, None)?.params;
            let report = evaluate(&params, &test_set, Mode::Free)?;
            println!("{model} seed {seed}: {:.3}", report.query_accuracy);
            reports.push(report);
        }
    }
    print!("{}", compare(&reports)?);
    Ok(())
}
