//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use softforest::activation::{Activation, SmoothStep};
use softforest::data::{self, Dataset, Split};
use softforest::ensemble::EnsembleConfig;
use softforest::kernel::RealArray;
use softforest::model::{HeadLayout, SoftTreeModel};
use softforest::objective::{batch_objective, closeness_penalty, Objective, Reduction, ResponseBatch};
use softforest::oracle::{finite_diff_grad, relative_error};

pub const FD_STEP: f64 = 1e-5;
/// Gradient coordinates are compared relative to `max(|a|, |b|, FD_FLOOR)`.
pub const FD_FLOOR: f64 = 1e-3;
/// Pre-activations this close to a smooth-step kink are resampled, since a
/// finite-difference step straddling it measures a different one-sided slope.
const KINK_MARGIN: f64 = 1e-3;

pub fn flatten(model: &SoftTreeModel) -> Vec<f64> {
    model
        .members
        .iter()
        .flat_map(|p| p.split_weights.as_slice().iter().chain(p.leaf_weights.as_slice()).copied())
        .collect()
}

pub fn unflatten(model: &mut SoftTreeModel, theta: &[f64]) {
    let mut off = 0;
    for p in &mut model.members {
        for block in [&mut p.split_weights, &mut p.leaf_weights] {
            let n = block.len();
            block.as_mut_slice().copy_from_slice(&theta[off..off + n]);
            off += n;
        }
    }
}

pub fn random_response(objective: Objective, rng: &mut ChaCha8Rng) -> f64 {
    match objective {
        Objective::SquaredError => rng.random_range(-2.0..2.0),
        Objective::Logistic => f64::from(u8::from(rng.random_bool(0.5))),
        _ => {
            if rng.random_bool(0.4) {
                0.0
            } else {
                rng.random_range(0..7) as f64
            }
        }
    }
}

pub struct GradInstance {
    pub model: SoftTreeModel,
    pub xs: RealArray,
    pub responses: ResponseBatch,
}

/// A small random model, batch and masked responses for `objective`.
pub fn grad_instance(objective: Objective, layout: HeadLayout, rng: &mut ChaCha8Rng) -> GradInstance {
    let m = rng.random_range(1..=3);
    let d = rng.random_range(1..=2);
    let p = rng.random_range(1..=3);
    let t = rng.random_range(1..=2);
    let gamma = [0.5, 1.0, 2.0][rng.random_range(0..3)];
    let cfg = EnsembleConfig::new(m, d, p)
        .with_tasks(t)
        .with_activation(Activation::SmoothStep(SmoothStep::new(gamma).unwrap()));
    let mut model = SoftTreeModel::new(objective, cfg, layout, rng.random()).unwrap();
    for member in &mut model.members {
        for v in member.split_weights.as_mut_slice() {
            *v = rng.random_range(-0.8..0.8);
        }
        for v in member.leaf_weights.as_mut_slice() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    let b = rng.random_range(1..=6);
    let xs = RealArray::new(vec![b, p], (0..b * p).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap();
    let mut mask: Vec<bool> = (0..b * t).map(|_| rng.random_bool(0.85)).collect();
    mask[0] = true;
    let y = (0..b * t)
        .map(|c| if mask[c] { random_response(objective, rng) } else { 0.0 })
        .collect();
    let responses = ResponseBatch::new(RealArray::new(vec![b, t], y).unwrap(), mask).unwrap();
    GradInstance { model, xs, responses }
}

fn near_kink(model: &SoftTreeModel, xs: &RealArray) -> bool {
    let Activation::SmoothStep(s) = model.config.activation else {
        return false;
    };
    let half = s.gamma() / 2.0;
    let (_, traces) = model.forward(xs).unwrap();
    let cfg = &model.config;
    traces.iter().any(|tr| {
        (0..tr.batch_size()).any(|b| {
            (0..cfg.num_internal()).any(|i| {
                (0..cfg.num_tasks).any(|t| tr.pre_activations(b, i, t).iter().any(|a| (a.abs() - half).abs() < KINK_MARGIN))
            })
        })
    })
}

pub fn data_loss(model: &SoftTreeModel, xs: &RealArray, responses: &ResponseBatch) -> f64 {
    let raw = model.predict_raw(xs).unwrap();
    batch_objective(model.objective, &raw, responses, Reduction::TaskMean).unwrap().0
}

/// Largest relative error between backward and central differences over every
/// parameter, or `None` when the instance sits on a kink.
pub fn data_grad_error(inst: &GradInstance) -> Option<f64> {
    let GradInstance { model, xs, responses } = inst;
    if near_kink(model, xs) {
        return None;
    }
    let (raw, traces) = model.forward(xs).unwrap();
    let (_, head_grads) = batch_objective(model.objective, &raw, responses, Reduction::TaskMean).unwrap();
    let grads = model.backward(&traces, xs, &head_grads).unwrap();
    let analytic: Vec<f64> = grads
        .iter()
        .flat_map(|g| g.split_weights.as_slice().iter().chain(g.leaf_weights.as_slice()).copied())
        .collect();
    let mut probe = model.clone();
    let fd = finite_diff_grad(
        |theta| {
            unflatten(&mut probe, theta);
            data_loss(&probe, xs, responses)
        },
        &flatten(model),
        FD_STEP,
    );
    Some(analytic.iter().zip(&fd).map(|(a, b)| relative_error(*a, *b, FD_FLOOR)).fold(0.0, f64::max))
}

/// Same check for the closeness penalty alone on a random multi-task split
/// tensor.
pub fn penalty_grad_error(rng: &mut ChaCha8Rng) -> f64 {
    let t = rng.random_range(2..=3);
    let cfg = EnsembleConfig::new(rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(1..=3)).with_tasks(t);
    let mut params = softforest::ensemble::init_params(&cfg, rng.random());
    for v in params.split_weights.as_mut_slice() {
        *v = rng.random_range(-1.0..1.0);
    }
    let lambda = 10f64.powf(rng.random_range(-3.0..1.0));
    let decay = rng.random_bool(0.5);
    let (_, g) = closeness_penalty(&cfg, &params, lambda, decay).unwrap();
    let mut probe = params.clone();
    let fd = finite_diff_grad(
        |theta| {
            probe.split_weights.as_mut_slice().copy_from_slice(theta);
            closeness_penalty(&cfg, &probe, lambda, decay).unwrap().0
        },
        params.split_weights.as_slice(),
        FD_STEP,
    );
    g.as_slice().iter().zip(&fd).map(|(a, b)| relative_error(*a, *b, FD_FLOOR)).fold(0.0, f64::max)
}

/// Standardized train/valid/test splits of a dataset.
pub fn prepare(data: &Dataset, seed: u64) -> (Dataset, Dataset, Dataset) {
    let a = data::split(data.len(), seed).unwrap();
    let train_rows = a.rows(Split::Train);
    let stats = data::fit_feature_stats(data, &train_rows).unwrap();
    let mut d = data.clone();
    d.apply_feature_stats(&stats).unwrap();
    (d.select(&train_rows), d.select(&a.rows(Split::Valid)), d.select(&a.rows(Split::Test)))
}

/// Prints one acceptance line. Writes to the stdout handle directly so the
/// line shows up even when the test harness captures output.
pub fn report(name: &str, pass: bool, detail: impl std::fmt::Display) -> bool {
    use std::io::Write;
    let line = format!("{} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).and_then(|_| out.flush()).expect("stdout");
    pass
}
