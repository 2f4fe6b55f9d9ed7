use super::{fit, TrainError, TrainReport, TrainSpec};
use crate::data::Dataset;
use crate::ensemble::EnsembleConfig;
use crate::metrics;
use crate::model::{HeadLayout, SoftTreeModel};
use crate::objective::Objective;
use crate::rng::{self, Purpose};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Closed interval; `lo == hi` pins the value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range<T> {
    pub lo: T,
    pub hi: T,
}

impl<T> Range<T> {
    pub fn new(lo: T, hi: T) -> Self {
        Self { lo, hi }
    }
}

/// Hyperparameter ranges for [`random_search`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub depths: Vec<usize>,
    pub trees: Range<usize>,
    pub batch_sizes: Vec<usize>,
    /// Sampled log-uniformly.
    pub learning_rate: Range<f64>,
    /// Sampled log-uniformly; ignored for single-task data.
    pub lambda: Range<f64>,
    pub epochs: Range<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self {
            depths: vec![2, 3, 4],
            trees: Range::new(5, 100),
            batch_sizes: vec![64, 128, 256, 512],
            learning_rate: Range::new(1e-5, 1e-2),
            lambda: Range::new(1e-5, 10.0),
            epochs: Range::new(20, 500),
        }
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |s: &str| Err(TrainError::Spec(s.to_string()));
        if self.depths.is_empty() || self.batch_sizes.is_empty() {
            return bad("search space needs at least one depth and batch size");
        }
        if self.trees.lo == 0 || self.trees.lo > self.trees.hi || self.epochs.lo == 0 || self.epochs.lo > self.epochs.hi {
            return bad("tree and epoch ranges must be non-empty and positive");
        }
        let pos = |r: &Range<f64>| r.lo > 0.0 && r.lo <= r.hi && r.hi.is_finite();
        if !pos(&self.learning_rate) || !pos(&self.lambda) {
            return bad("learning rate and lambda ranges must be positive with lo <= hi");
        }
        Ok(())
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, r: Range<f64>) -> f64 {
    if r.lo == r.hi {
        return r.lo;
    }
    rng.random_range(r.lo.ln()..=r.hi.ln()).exp()
}

fn int_range(rng: &mut ChaCha8Rng, r: Range<usize>) -> usize {
    rng.random_range(r.lo..=r.hi)
}

/// What trials are ranked by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankBy {
    #[default]
    ValidLoss,
    /// Mean Poisson deviance over tasks; count objectives only.
    ValidDeviance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub depth: usize,
    pub trees: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub max_epochs: usize,
    pub valid_loss: f64,
    pub valid_deviance: Option<f64>,
    pub epochs_run: usize,
    /// Error message if training failed; the trial then ranks last.
    pub failure: Option<String>,
}

impl Trial {
    fn score(&self, rank: RankBy) -> f64 {
        let s = match rank {
            RankBy::ValidLoss => self.valid_loss,
            RankBy::ValidDeviance => self.valid_deviance.unwrap_or(f64::INFINITY),
        };
        if s.is_nan() {
            f64::INFINITY
        } else {
            s
        }
    }
}

pub struct SearchResult {
    pub trials: Vec<Trial>,
    pub best: usize,
    pub model: SoftTreeModel,
    pub spec: TrainSpec,
    pub report: TrainReport,
}

/// Samples `budget` trials i.i.d. from `space`, trains each, and keeps the
/// one with the lowest validation score (earliest index on ties).
///
/// `base_cfg` supplies features, tasks, activation and split sharing; `base`
/// supplies seed, patience and everything not searched. Trial `i` draws from
/// its own stream, so a larger budget extends a smaller one. Batch sizes are
/// clamped to the training-set size.
#[allow(clippy::too_many_arguments)]
pub fn random_search(
    objective: Objective,
    layout: HeadLayout,
    base_cfg: EnsembleConfig,
    base: &TrainSpec,
    space: &SearchSpace,
    budget: usize,
    rank: RankBy,
    train: &Dataset,
    valid: &Dataset,
) -> Result<SearchResult, TrainError> {
    if budget == 0 {
        return Err(TrainError::Spec("search budget must be at least 1".into()));
    }
    space.validate()?;
    if rank == RankBy::ValidDeviance && !objective.is_count() {
        return Err(TrainError::Spec("deviance ranking needs a count objective".into()));
    }
    let multitask = base_cfg.num_tasks > 1 && !base_cfg.share_splits;

    let mut trials = Vec::with_capacity(budget);
    let mut best: Option<(f64, SoftTreeModel, TrainSpec, TrainReport)> = None;
    for index in 0..budget {
        let mut rng = rng::stream(base.seed, Purpose::Search, index as u32);
        let depth = space.depths[rng.random_range(0..space.depths.len())];
        let trees = int_range(&mut rng, space.trees);
        let batch_size = space.batch_sizes[rng.random_range(0..space.batch_sizes.len())].min(train.len());
        let learning_rate = log_uniform(&mut rng, space.learning_rate);
        let lambda_draw = log_uniform(&mut rng, space.lambda);
        let max_epochs = int_range(&mut rng, space.epochs);
        let lambda = if multitask { lambda_draw } else { 0.0 };

        let spec = TrainSpec {
            learning_rate,
            batch_size,
            max_epochs,
            patience: base.patience.min(max_epochs),
            lambda,
            ..base.clone()
        };
        let cfg = EnsembleConfig {
            num_trees: trees,
            depth,
            ..base_cfg
        };
        let mut trial = Trial {
            index,
            depth,
            trees,
            batch_size,
            learning_rate,
            lambda,
            max_epochs,
            valid_loss: f64::INFINITY,
            valid_deviance: None,
            epochs_run: 0,
            failure: None,
        };
        let mut model = SoftTreeModel::new(objective, cfg, layout, base.seed)?;
        match fit(&mut model, &spec, train, valid) {
            Ok(report) => {
                trial.valid_loss = report.final_valid_loss;
                trial.epochs_run = report.epochs_run();
                if objective.is_count() {
                    let raw = model.predict_raw(&valid.features)?;
                    let m = metrics::evaluate(objective, &raw, valid)?;
                    trial.valid_deviance = m.task_mean(|t| t.poisson_deviance);
                }
                let score = trial.score(rank);
                if best.as_ref().is_none_or(|b| score < b.0) {
                    best = Some((score, model, spec, report));
                }
            }
            Err(e) => trial.failure = Some(e.to_string()),
        }
        trials.push(trial);
    }
    let (_, model, spec, report) = best.ok_or_else(|| TrainError::Spec("every search trial failed".into()))?;
    let best = trials
        .iter()
        .filter(|t| t.failure.is_none())
        .min_by(|a, b| a.score(rank).total_cmp(&b.score(rank)).then(a.index.cmp(&b.index)))
        .map(|t| t.index)
        .expect("at least one successful trial");
    Ok(SearchResult {
        trials,
        best,
        model,
        spec,
        report,
    })
}
