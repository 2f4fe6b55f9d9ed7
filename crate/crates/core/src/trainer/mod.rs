//! Mini-batch Adam training with early stopping, and random search.

mod search;

pub use search::{random_search, Range, RankBy, SearchResult, SearchSpace, Trial};

use crate::data::Dataset;
use crate::ensemble::{EnsembleError, EnsembleParams};
use crate::kernel::RealArray;
use crate::metrics::MetricError;
use crate::model::SoftTreeModel;
use crate::objective::{batch_objective, ObjectiveError, Reduction, ResponseBatch};
use crate::rng::{self, Purpose};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite gradient in {block} at step {step}")]
    NonFiniteGradient { block: String, step: u64 },
    #[error("training diverged at epoch {epoch}: validation loss {loss}")]
    Diverged {
        epoch: usize,
        loss: f64,
        report: Box<TrainReport>,
    },
    #[error("thread pool: {0}")]
    Threads(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without strict validation improvement before stopping.
    pub patience: usize,
    pub lambda: f64,
    pub depth_decay: bool,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Hand back the best-validation parameters rather than the last ones.
    pub restore_best: bool,
    pub reduction: Reduction,
    /// Worker threads; `None` uses the ambient pool. Results do not depend on it.
    #[serde(skip)]
    pub threads: Option<usize>,
}

impl Default for TrainSpec {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            batch_size: 64,
            max_epochs: 100,
            patience: 25,
            lambda: 0.0,
            depth_decay: false,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            restore_best: true,
            reduction: Reduction::TaskMean,
            threads: None,
        }
    }
}

impl TrainSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |s: String| Err(TrainError::Spec(s));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.max_epochs == 0 {
            return bad("max epochs must be positive".into());
        }
        if self.patience == 0 || self.patience > self.max_epochs {
            return bad(format!("patience must be in 1..={}, got {}", self.max_epochs, self.patience));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.epsilon.is_nan() || self.epsilon <= 0.0 {
            return bad("Adam needs 0 <= beta < 1 and epsilon > 0".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch objective (data term plus penalty) per epoch.
    pub train_loss: Vec<f64>,
    /// Validation data loss per epoch.
    pub valid_loss: Vec<f64>,
    /// 1-based.
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub stopped_early: bool,
    /// Data loss on the whole training set with the returned parameters.
    pub final_train_loss: f64,
    pub final_valid_loss: f64,
    pub steps: u64,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.valid_loss.len()
    }
}

/// Adam moments for a list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub first: Vec<Vec<f64>>,
    pub second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(block_sizes: &[usize]) -> Self {
        Self {
            step: 0,
            first: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_members(members: &[EnsembleParams]) -> Self {
        let sizes: Vec<usize> = members
            .iter()
            .flat_map(|p| [p.split_weights.len(), p.leaf_weights.len()])
            .collect();
        Self::new(&sizes)
    }
}

/// One bias-corrected Adam update over named blocks. Nothing is modified if
/// any gradient is non-finite.
pub fn adam_step(
    state: &mut AdamState,
    blocks: &mut [(&str, &mut [f64], &[f64])],
    spec: &TrainSpec,
) -> Result<(), TrainError> {
    for (name, p, g) in blocks.iter() {
        if p.len() != g.len() {
            return Err(TrainError::Spec(format!("{name}: {} params but {} gradients", p.len(), g.len())));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteGradient {
                block: format!("{name}[{i}]"),
                step: state.step + 1,
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (spec.beta1, spec.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (_, p, g)) in blocks.iter_mut().enumerate() {
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            p[j] -= spec.learning_rate * mh / (vh.sqrt() + spec.epsilon);
        }
    }
    Ok(())
}

fn member_step(
    state: &mut AdamState,
    members: &mut [EnsembleParams],
    grads: &[EnsembleParams],
    spec: &TrainSpec,
) -> Result<(), TrainError> {
    let names: Vec<(String, String)> = (0..members.len())
        .map(|i| (format!("ensemble {i} split_weights"), format!("ensemble {i} leaf_weights")))
        .collect();
    let mut blocks: Vec<(&str, &mut [f64], &[f64])> = Vec::with_capacity(2 * members.len());
    for ((p, g), (ns, nl)) in members.iter_mut().zip(grads).zip(&names) {
        blocks.push((ns.as_str(), p.split_weights.as_mut_slice(), g.split_weights.as_slice()));
        blocks.push((nl.as_str(), p.leaf_weights.as_mut_slice(), g.leaf_weights.as_slice()));
    }
    adam_step(state, &mut blocks, spec)
}

/// Data loss of `model` over a whole dataset.
pub fn data_loss(model: &SoftTreeModel, data: &Dataset, reduction: Reduction) -> Result<f64, TrainError> {
    let raw = model.predict_raw(&data.features)?;
    let (loss, _) = batch_objective(model.objective, &raw, &data.response_batch(), reduction)?;
    Ok(loss)
}

fn gather(data: &Dataset, rows: &[usize]) -> (RealArray, ResponseBatch) {
    let sub = data.select(rows);
    let rb = sub.response_batch();
    (sub.features, rb)
}

/// Number of minibatches per epoch: incomplete trailing batches are dropped
/// unless the whole set fits in one batch.
pub fn batches_per_epoch(n: usize, batch_size: usize) -> usize {
    if n <= batch_size {
        usize::from(n > 0)
    } else {
        n / batch_size
    }
}

/// Trains `model` in place and returns the report.
///
/// Each epoch reshuffles the training rows with its own stream, takes Adam
/// steps on the data term plus closeness penalty, then scores the validation
/// data term. Training stops after `patience` epochs without a strict
/// improvement.
pub fn fit(model: &mut SoftTreeModel, spec: &TrainSpec, train: &Dataset, valid: &Dataset) -> Result<TrainReport, TrainError> {
    match spec.threads {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| TrainError::Threads(e.to_string()))?;
            pool.install(|| fit_inner(model, spec, train, valid))
        }
        None => fit_inner(model, spec, train, valid),
    }
}

fn fit_inner(model: &mut SoftTreeModel, spec: &TrainSpec, train: &Dataset, valid: &Dataset) -> Result<TrainReport, TrainError> {
    spec.validate()?;
    model.check()?;
    if train.is_empty() || valid.is_empty() {
        return Err(TrainError::Spec("training and validation sets must be non-empty".into()));
    }
    for d in [train, valid] {
        if d.num_features() != model.num_features() || d.num_tasks() != model.num_tasks() {
            return Err(TrainError::Spec(format!(
                "data has {} features and {} tasks; model expects {} and {}",
                d.num_features(),
                d.num_tasks(),
                model.num_features(),
                model.num_tasks()
            )));
        }
        d.validate_responses(model.objective)?;
    }

    let n = train.len();
    if spec.batch_size > n {
        return Err(TrainError::Spec(format!(
            "batch size {} exceeds the {n} training rows",
            spec.batch_size
        )));
    }
    let bs = spec.batch_size;
    let per_epoch = batches_per_epoch(n, bs);
    let mut adam = AdamState::for_members(&model.members);
    let mut report = TrainReport {
        train_loss: Vec::new(),
        valid_loss: Vec::new(),
        best_epoch: 0,
        best_valid_loss: f64::INFINITY,
        stopped_early: false,
        final_train_loss: f64::NAN,
        final_valid_loss: f64::NAN,
        steps: 0,
    };
    let mut best = model.members.clone();
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..n).collect();
    let mut traces = Vec::new();

    for epoch in 1..=spec.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(spec.seed, Purpose::Shuffle, epoch as u32));
        let mut epoch_loss = 0.0;
        for b in 0..per_epoch {
            let rows = &order[b * bs..(b + 1) * bs];
            let (xs, responses) = gather(train, rows);
            let raw = model.forward_into(&xs, &mut traces)?;
            let (loss, head_grads) = batch_objective(model.objective, &raw, &responses, spec.reduction)?;
            let (penalty, pen_grads) = model.penalty(spec.lambda, spec.depth_decay)?;
            let mut grads = model.backward(&traces, &xs, &head_grads)?;
            if penalty != 0.0 || spec.lambda > 0.0 {
                for (g, pg) in grads.iter_mut().zip(&pen_grads) {
                    g.split_weights.axpy(1.0, pg).map_err(EnsembleError::from)?;
                }
            }
            member_step(&mut adam, &mut model.members, &grads, spec)?;
            epoch_loss += loss + penalty;
        }
        report.train_loss.push(epoch_loss / per_epoch as f64);

        let v = data_loss(model, valid, spec.reduction)?;
        report.valid_loss.push(v);
        if !v.is_finite() {
            report.steps = adam.step;
            return Err(TrainError::Diverged {
                epoch,
                loss: v,
                report: Box::new(report),
            });
        }
        if v < report.best_valid_loss {
            report.best_valid_loss = v;
            report.best_epoch = epoch;
            best.clone_from(&model.members);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= spec.patience {
                report.stopped_early = epoch < spec.max_epochs;
                break;
            }
        }
    }

    if spec.restore_best {
        model.members = best;
    }
    report.steps = adam.step;
    report.final_train_loss = data_loss(model, train, spec.reduction)?;
    report.final_valid_loss = data_loss(model, valid, spec.reduction)?;
    Ok(report)
}
