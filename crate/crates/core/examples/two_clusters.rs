//! A single depth-2 soft tree separating two Gaussian clusters.
//!
//! `cargo run --release --example two_clusters`

use softforest::data::{self, Split};
use softforest::metrics;
use softforest::oracle::{generate, Generator, SyntheticSpec};
use softforest::{fit, EnsembleConfig, HeadLayout, Objective, SoftTreeModel, TrainSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SyntheticSpec::new(Generator::TwoClusters { separation: 3.6 }, 7500, 2, 7);
    let raw = generate(&spec);
    let split = data::split(raw.len(), 7)?;
    let d = data::standardize(&raw, &split)?;
    let (train, valid, test) = (d.select(&split.rows(Split::Train)), d.select(&split.rows(Split::Valid)), d.select(&split.rows(Split::Test)));

    let mut model = SoftTreeModel::new(Objective::Logistic, EnsembleConfig::new(1, 2, 2), HeadLayout::Shared, 7)?;
    let report = fit(&mut model, &TrainSpec { max_epochs: 200, seed: 7, ..TrainSpec::default() }, &train, &valid)?;

    let logits = model.predict_raw(&test.features)?;
    let m = metrics::evaluate(Objective::Logistic, &logits, &test)?;
    println!("epochs {} (best {})", report.epochs_run(), report.best_epoch);
    println!("test log-loss {:.4}", m.tasks[0].loss.unwrap());
    println!("test AUC      {:.4}", m.tasks[0].auc.unwrap());

    // routing of the root node, left-to-right across the x1 = x2 diagonal
    let cfg = &model.config;
    let root = model.members[0].split_matrix(cfg, 0, 0);
    println!("root split weights {:?}", root.iter().map(|w| format!("{w:.3}")).collect::<Vec<_>>());
    Ok(())
}
