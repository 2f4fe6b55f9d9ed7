//! Random hyperparameter search over depth, size, batch, learning rate and
//! epochs, ranked by validation loss.
//!
//! `cargo run --release --example random_search -- [budget]`

use softforest::data::{self, Split};
use softforest::metrics;
use softforest::oracle::{generate, Generator, SyntheticSpec};
use softforest::trainer::{random_search, RankBy, Range, SearchSpace};
use softforest::{EnsembleConfig, HeadLayout, Objective, TrainSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let budget: usize = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(8);
    let spec = SyntheticSpec::new(Generator::LinearRegression { noise: 0.3 }, 1500, 6, 2);
    let raw = generate(&spec);
    let split = data::split(raw.len(), 2)?;
    let d = data::standardize(&raw, &split)?;
    let (train, valid, test) = (d.select(&split.rows(Split::Train)), d.select(&split.rows(Split::Valid)), d.select(&split.rows(Split::Test)));

    let space = SearchSpace {
        trees: Range::new(5, 40),
        learning_rate: Range::new(1e-3, 5e-2),
        epochs: Range::new(20, 80),
        ..SearchSpace::default()
    };
    let base = TrainSpec { patience: 10, seed: 2, ..TrainSpec::default() };
    let cfg = EnsembleConfig::new(1, 1, 6);
    let res = random_search(Objective::SquaredError, HeadLayout::Shared, cfg, &base, &space, budget, RankBy::ValidLoss, &train, &valid)?;

    for (i, t) in res.trials.iter().enumerate() {
        let mark = if i == res.best { "*" } else { " " };
        println!(
            "{mark} trial {i}: depth {} trees {:>2} batch {:>3} lr {:.2e} epochs {:>2}/{:>2} valid {:.4}",
            t.depth, t.trees, t.batch_size, t.learning_rate, t.epochs_run, t.max_epochs, t.valid_loss
        );
    }
    let m = metrics::evaluate(Objective::SquaredError, &res.model.predict_raw(&test.features)?, &test)?;
    println!("best: depth {}, {} trees, lr {:.2e}; test mse {:.4}", res.model.config.depth, res.model.config.num_trees, res.spec.learning_rate, m.tasks[0].mse.unwrap());
    Ok(())
}
