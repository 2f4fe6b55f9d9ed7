//! Three related regression tasks with half the responses missing. Sweeps the
//! closeness penalty and reports pooled test MSE against independent tasks.
//!
//! `cargo run --release --example multitask`

use softforest::data::{self, Split};
use softforest::metrics;
use softforest::oracle::{generate, Generator, SyntheticSpec};
use softforest::{fit, EnsembleConfig, HeadLayout, Objective, SoftTreeModel, TrainSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = 1;
    let spec = SyntheticSpec::new(Generator::RelatedMultitask { tasks: 3, rho: 0.9, noise: 0.3, missing_rate: 0.5 }, 1500, 10, seed);
    let raw = generate(&spec);
    let split = data::split(raw.len(), seed)?;
    let d = data::standardize(&raw, &split)?;
    let (train, valid, test) = (d.select(&split.rows(Split::Train)), d.select(&split.rows(Split::Valid)), d.select(&split.rows(Split::Test)));
    println!("observed responses {:.0}%", 100.0 * train.observed_fraction());

    println!("{:>8} {:>10} {:>10}", "lambda", "valid", "test mse");
    for lambda in [0.0, 1e-3, 1e-2, 1e-1, 1.0, 10.0] {
        let cfg = EnsembleConfig::new(20, 3, 10).with_tasks(3);
        let mut model = SoftTreeModel::new(Objective::SquaredError, cfg, HeadLayout::Shared, seed)?;
        let ts = TrainSpec { max_epochs: 200, lambda, seed, ..TrainSpec::default() };
        let r = fit(&mut model, &ts, &train, &valid)?;
        let m = metrics::evaluate(Objective::SquaredError, &model.predict_raw(&test.features)?, &test)?;
        println!("{lambda:>8} {:>10.4} {:>10.4}", r.best_valid_loss, m.pooled(|t| t.mse).unwrap());
    }

    // the infinite-penalty limit: one split tensor shared by every task
    let cfg = EnsembleConfig::new(20, 3, 10).with_tasks(3).with_shared_splits(true);
    let mut model = SoftTreeModel::new(Objective::SquaredError, cfg, HeadLayout::Shared, seed)?;
    let r = fit(&mut model, &TrainSpec { max_epochs: 200, seed, ..TrainSpec::default() }, &train, &valid)?;
    let m = metrics::evaluate(Objective::SquaredError, &model.predict_raw(&test.features)?, &test)?;
    println!("{:>8} {:>10.4} {:>10.4}", "shared", r.best_valid_loss, m.pooled(|t| t.mse).unwrap());
    Ok(())
}
