//! Writes a synthetic CSV, trains from it, saves the model, reloads it and
//! checks that predictions survive the round trip bit for bit.
//!
//! `cargo run --release --example csv_round_trip`

use softforest::data::{self, Split};
use softforest::oracle::{generate, Generator, SyntheticSpec};
use softforest::store::{self, ModelFile, TrainSummary};
use softforest::{fit, EnsembleConfig, HeadLayout, Objective, SoftTreeModel, TrainSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let csv_path = dir.path().join("counts.csv");
    let spec = SyntheticSpec::new(Generator::ZipCounts { pi: 0.6, mu: 2.5, signal: 1.0, mu_cap: 5.0 }, 2000, 4, 3);
    data::write_csv(&generate(&spec), &csv_path, b',')?;

    let raw = data::load_csv(&csv_path, &["y"], b',')?;
    let split = data::split(raw.len(), 3)?;
    let stats = data::fit_feature_stats(&raw, &split.rows(Split::Train))?;
    let mut d = raw.clone();
    d.apply_feature_stats(&stats)?;
    let (train, valid) = (d.select(&split.rows(Split::Train)), d.select(&split.rows(Split::Valid)));

    let ts = TrainSpec { max_epochs: 30, seed: 3, ..TrainSpec::default() };
    let mut model = SoftTreeModel::new(Objective::Zip, EnsembleConfig::new(10, 3, 4), HeadLayout::Shared, 3)?;
    let report = fit(&mut model, &ts, &train, &valid)?;

    let mut file = ModelFile::new(&model, raw.feature_names.clone(), raw.task_names.clone(), stats);
    file.training = Some(TrainSummary::new(&ts, &report));
    let model_path = dir.path().join("model.json");
    store::save(&file, &model_path)?;
    println!("saved {} parameters, {} bytes", model.num_params(), std::fs::metadata(&model_path)?.len());

    let loaded = store::load(&model_path)?;
    let before = model.predict_natural(&d.features)?;
    let after = loaded.model().predict_natural(&d.features)?;
    let same = before.as_slice().iter().zip(after.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits());
    println!("predictions identical after reload: {same}");
    for row in before.as_slice().chunks(2).take(3) {
        println!("  mu {:.3}  pi {:.3}", row[0], row[1]);
    }
    Ok(())
}
