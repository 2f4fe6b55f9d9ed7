//! Compares the analytic gradient of every loss with central differences on a
//! small random model.
//!
//! `cargo run --example gradient_check`

use rand::Rng;
use softforest::kernel::RealArray;
use softforest::objective::{batch_objective, Reduction, ResponseBatch};
use softforest::oracle::{finite_diff_grad, relative_error};
use softforest::rng::{stream, Purpose};
use softforest::{EnsembleConfig, HeadLayout, Objective, SoftTreeModel};

fn params(model: &SoftTreeModel) -> Vec<f64> {
    model.members.iter().flat_map(|p| p.split_weights.as_slice().iter().chain(p.leaf_weights.as_slice()).copied()).collect()
}

fn set_params(model: &mut SoftTreeModel, theta: &[f64]) {
    let mut off = 0;
    for p in &mut model.members {
        for block in [&mut p.split_weights, &mut p.leaf_weights] {
            let n = block.len();
            block.as_mut_slice().copy_from_slice(&theta[off..off + n]);
            off += n;
        }
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = stream(1, Purpose::Bench, 0);
    let (b, p) = (5, 3);
    let xs = RealArray::new(vec![b, p], (0..b * p).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    for objective in Objective::ALL {
        let mut model = SoftTreeModel::new(objective, EnsembleConfig::new(3, 2, p).with_tasks(2), HeadLayout::Shared, 5)?;
        for m in &mut model.members {
            for v in m.split_weights.as_mut_slice() {
                *v = rng.random_range(-0.4..0.4);
            }
            for v in m.leaf_weights.as_mut_slice() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        let ys: Vec<f64> = (0..b * 2)
            .map(|_| match objective {
                Objective::SquaredError => rng.random_range(-1.0..1.0),
                Objective::Logistic => f64::from(u8::from(rng.random_bool(0.5))),
                _ => rng.random_range(0..5) as f64,
            })
            .collect();
        let resp = ResponseBatch::dense(RealArray::new(vec![b, 2], ys)?)?;

        let (raw, traces) = model.forward(&xs)?;
        let (_, hg) = batch_objective(objective, &raw, &resp, Reduction::TaskMean)?;
        let analytic: Vec<f64> = model
            .backward(&traces, &xs, &hg)?
            .iter()
            .flat_map(|g| g.split_weights.as_slice().iter().chain(g.leaf_weights.as_slice()).copied())
            .collect();
        let mut probe = model.clone();
        let fd = finite_diff_grad(
            |theta| {
                set_params(&mut probe, theta);
                batch_objective(objective, &probe.predict_raw(&xs).unwrap(), &resp, Reduction::TaskMean).unwrap().0
            },
            &params(&model),
            1e-5,
        );
        let worst = analytic.iter().zip(&fd).map(|(a, f)| relative_error(*a, *f, 1e-3)).fold(0.0, f64::max);
        println!("{:>8}: {} parameters, worst relative error {worst:.2e}", objective.name(), analytic.len());
    }
    Ok(())
}
