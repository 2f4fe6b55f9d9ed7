//! Zero-inflated Poisson and plain Poisson ensembles on zero-inflated counts,
//! scored by test Poisson deviance against the deviance of the true mean.
//!
//! `cargo run --release --example zip_vs_poisson -- [signal]`

use softforest::data::{self, Split};
use softforest::metrics;
use softforest::oracle::{generate_with_truth, Generator, SyntheticSpec};
use softforest::{fit, EnsembleConfig, HeadLayout, Objective, SoftTreeModel, TrainSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let signal: f64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(1.0);
    let seed = 1;
    let spec = SyntheticSpec::new(Generator::ZipCounts { pi: 0.7, mu: 2.0, signal, mu_cap: 5.0 }, 20_000, 5, seed);
    let (raw, truth) = generate_with_truth(&spec);
    let split = data::split(raw.len(), seed)?;
    let d = data::standardize(&raw, &split)?;
    let rows = split.rows(Split::Test);
    let (train, valid, test) = (d.select(&split.rows(Split::Train)), d.select(&split.rows(Split::Valid)), d.select(&rows));
    let zeros = test.responses.as_slice().iter().filter(|&&y| y == 0.0).count();
    println!("test rows {}, zeros {:.1}%", test.len(), 100.0 * zeros as f64 / test.len() as f64);

    let ts = TrainSpec { learning_rate: 0.01, batch_size: 128, max_epochs: 60, seed, ..TrainSpec::default() };
    for objective in [Objective::Poisson, Objective::Zip] {
        let mut model = SoftTreeModel::new(objective, EnsembleConfig::new(20, 3, 5), HeadLayout::Shared, seed)?;
        let r = fit(&mut model, &ts, &train, &valid)?;
        let m = metrics::evaluate(objective, &model.predict_raw(&test.features)?, &test)?;
        println!("{:>8}: deviance {:.4}, best epoch {}", objective.name(), m.tasks[0].poisson_deviance.unwrap(), r.best_epoch);
    }
    let mu: Vec<f64> = rows.iter().map(|&r| truth.as_slice()[r]).collect();
    let floor = metrics::poisson_deviance(&mu, test.responses.as_slice(), &test.mask, None)?.unwrap();
    println!("true mean: deviance {floor:.4}");
    Ok(())
}
