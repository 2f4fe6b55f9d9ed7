//! Overdispersed counts: a negative binomial ensemble learns the mean and the
//! dispersion jointly.
//!
//! `cargo run --release --example negative_binomial`

use softforest::data::{self, Split};
use softforest::metrics;
use softforest::oracle::{generate, Generator, SyntheticSpec};
use softforest::{fit, EnsembleConfig, HeadLayout, Objective, SoftTreeModel, TrainSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let phi = 1.5;
    let spec = SyntheticSpec::new(Generator::NbCounts { mu: 3.0, phi, signal: 0.7 }, 6000, 5, 11);
    let raw = generate(&spec);
    let split = data::split(raw.len(), 11)?;
    let d = data::standardize(&raw, &split)?;
    let (train, valid, test) = (d.select(&split.rows(Split::Train)), d.select(&split.rows(Split::Valid)), d.select(&split.rows(Split::Test)));

    let ts = TrainSpec { learning_rate: 0.01, batch_size: 128, max_epochs: 80, seed: 11, ..TrainSpec::default() };
    for objective in [Objective::Poisson, Objective::NegativeBinomial] {
        let mut model = SoftTreeModel::new(objective, EnsembleConfig::new(15, 3, 5), HeadLayout::Shared, 11)?;
        fit(&mut model, &ts, &train, &valid)?;
        let raw_out = model.predict_raw(&test.features)?;
        let m = metrics::evaluate(objective, &raw_out, &test)?;
        println!("{:>8}: test deviance {:.4}", objective.name(), m.tasks[0].poisson_deviance.unwrap());
        if objective == Objective::NegativeBinomial {
            let nat = model.natural_from_raw(&raw_out);
            let phis: Vec<f64> = nat.as_slice().chunks(2).map(|c| c[1]).collect();
            let mean = phis.iter().sum::<f64>() / phis.len() as f64;
            println!("          mean fitted dispersion {mean:.3} (generated with {phi})");
        }
    }
    Ok(())
}
