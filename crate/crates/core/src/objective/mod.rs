//! Differentiable training objectives.
//!
//! An [`Objective`] turns raw ensemble heads `[B, T, k]` and a masked response
//! batch into a scalar loss and head gradients. Unobserved (masked) cells
//! contribute nothing.

mod losses;
mod penalty;

pub use losses::{
    log_add_exp, log_sigmoid, logistic, nb_nll, poisson_nll, softplus, squared_error, zip_nll, OVERFLOW_GUARD,
};
pub use penalty::closeness_penalty;

use crate::activation::sigmoid;
use crate::kernel::RealArray;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

/// Log-link heads are clamped to `±HEAD_CLAMP` inside the batch objective.
/// The returned gradient is that of the clamped loss, so it is zero for a
/// log-link head beyond the clamp.
pub const HEAD_CLAMP: f64 = 30.0;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("log-link head {0} exceeds the overflow guard")]
    Overflow(f64),
    #[error("non-finite head value {0}")]
    NonFiniteHead(f64),
    #[error("response {0} is not valid for this objective")]
    InvalidResponse(f64),
    #[error("expected {expected:?} but got {actual:?}")]
    Shape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("closeness penalty must be non-negative and finite, got {0}")]
    NegativeLambda(f64),
    #[error("unknown objective {0:?} (expected mse, logistic, poisson, zip or nb)")]
    UnknownName(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    SquaredError,
    Logistic,
    Poisson,
    /// Heads: log-mean, logit of the Poisson-component probability.
    Zip,
    /// Heads: log-mean, log-dispersion.
    NegativeBinomial,
}

impl Objective {
    pub const ALL: [Objective; 5] = [
        Objective::SquaredError,
        Objective::Logistic,
        Objective::Poisson,
        Objective::Zip,
        Objective::NegativeBinomial,
    ];

    pub fn heads_required(&self) -> usize {
        match self {
            Objective::Zip | Objective::NegativeBinomial => 2,
            _ => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::SquaredError => "mse",
            Objective::Logistic => "logistic",
            Objective::Poisson => "poisson",
            Objective::Zip => "zip",
            Objective::NegativeBinomial => "nb",
        }
    }

    pub fn is_count(&self) -> bool {
        matches!(self, Objective::Poisson | Objective::Zip | Objective::NegativeBinomial)
    }

    /// Names of the natural-scale parameters reported by `predict`.
    pub fn output_names(&self) -> &'static [&'static str] {
        match self {
            Objective::SquaredError => &["mean"],
            Objective::Logistic => &["prob"],
            Objective::Poisson => &["mu"],
            Objective::Zip => &["mu", "pi"],
            Objective::NegativeBinomial => &["mu", "phi"],
        }
    }

    /// Natural-scale parameters from raw heads (`μ` and `π`/`φ` for two-head
    /// objectives).
    pub fn natural_params(&self, heads: &[f64]) -> Vec<f64> {
        match self {
            Objective::SquaredError => vec![heads[0]],
            Objective::Logistic => vec![sigmoid(heads[0])],
            Objective::Poisson => vec![clamp_log(heads[0]).exp()],
            Objective::Zip => vec![clamp_log(heads[0]).exp(), sigmoid(heads[1])],
            Objective::NegativeBinomial => vec![clamp_log(heads[0]).exp(), clamp_log(heads[1]).exp()],
        }
    }

    /// `E[y | x]` implied by the heads.
    pub fn mean_response(&self, heads: &[f64]) -> f64 {
        match self {
            Objective::SquaredError => heads[0],
            Objective::Logistic => sigmoid(heads[0]),
            Objective::Poisson | Objective::NegativeBinomial => clamp_log(heads[0]).exp(),
            Objective::Zip => sigmoid(heads[1]) * clamp_log(heads[0]).exp(),
        }
    }

    pub fn validate_response(&self, y: f64) -> Result<(), ObjectiveError> {
        let ok = match self {
            Objective::SquaredError => y.is_finite(),
            Objective::Logistic => (0.0..=1.0).contains(&y),
            _ => y >= 0.0 && y.is_finite() && y.fract() == 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ObjectiveError::InvalidResponse(y))
        }
    }

    /// Loss and head gradients for one observed cell. Log-link heads are
    /// clamped to `±HEAD_CLAMP`.
    pub fn sample_loss(&self, heads: &[f64], y: f64, grads: &mut [f64]) -> Result<f64, ObjectiveError> {
        for &h in heads {
            if !h.is_finite() {
                return Err(ObjectiveError::NonFiniteHead(h));
            }
        }
        let (f0, in0) = clamped(heads[0]);
        let loss = match self {
            Objective::SquaredError => {
                let (l, g) = squared_error(heads[0], y);
                grads[0] = g;
                l
            }
            Objective::Logistic => {
                let (l, g) = logistic(heads[0], y);
                grads[0] = g;
                l
            }
            Objective::Poisson => {
                let (l, g) = poisson_nll(f0, y)?;
                grads[0] = if in0 { g } else { 0.0 };
                l
            }
            Objective::Zip => {
                let (l, gm, gp) = zip_nll(f0, heads[1], y)?;
                grads[0] = if in0 { gm } else { 0.0 };
                grads[1] = gp;
                l
            }
            Objective::NegativeBinomial => {
                let (f1, in1) = clamped(heads[1]);
                let (l, gm, gp) = nb_nll(f0, f1, y)?;
                grads[0] = if in0 { gm } else { 0.0 };
                grads[1] = if in1 { gp } else { 0.0 };
                l
            }
        };
        Ok(loss)
    }
}

#[inline]
fn clamp_log(f: f64) -> f64 {
    f.clamp(-HEAD_CLAMP, HEAD_CLAMP)
}

#[inline]
fn clamped(f: f64) -> (f64, bool) {
    (clamp_log(f), f.abs() <= HEAD_CLAMP)
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Objective {
    type Err = ObjectiveError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mse" | "squared_error" => Ok(Objective::SquaredError),
            "logistic" => Ok(Objective::Logistic),
            "poisson" => Ok(Objective::Poisson),
            "zip" => Ok(Objective::Zip),
            "nb" | "negative_binomial" => Ok(Objective::NegativeBinomial),
            _ => Err(ObjectiveError::UnknownName(s.to_string())),
        }
    }
}

/// Observed responses for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ResponseBatch {
    /// `[B, T]`; masked cells hold 0.
    pub y: RealArray,
    /// `[B, T]`, true where observed.
    pub mask: Vec<bool>,
}

impl ResponseBatch {
    pub fn new(y: RealArray, mask: Vec<bool>) -> Result<Self, ObjectiveError> {
        if y.shape().len() != 2 || mask.len() != y.len() {
            return Err(ObjectiveError::Shape {
                expected: vec![mask.len()],
                actual: y.shape().to_vec(),
            });
        }
        Ok(Self { y, mask })
    }

    /// Fully observed batch.
    pub fn dense(y: RealArray) -> Result<Self, ObjectiveError> {
        let mask = vec![true; y.len()];
        Self::new(y, mask)
    }

    pub fn batch_size(&self) -> usize {
        self.y.shape()[0]
    }

    pub fn num_tasks(&self) -> usize {
        self.y.shape()[1]
    }

    pub fn observed(&self, task: usize) -> usize {
        let t = self.num_tasks();
        self.mask.iter().skip(task).step_by(t).filter(|&&m| m).count()
    }
}

/// How observed losses are averaged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over each task's observed cells, summed over tasks. A task's
    /// gradient does not depend on how many cells other tasks observe.
    #[default]
    TaskMean,
    /// One mean over every observed cell in the batch.
    ObservedMean,
}

/// Masked batch loss and `∂loss/∂heads` (`[B, T, k]`, zero where masked).
pub fn batch_objective(
    objective: Objective,
    predictions: &RealArray,
    responses: &ResponseBatch,
    reduction: Reduction,
) -> Result<(f64, RealArray), ObjectiveError> {
    let k = objective.heads_required();
    let (b, t) = (responses.batch_size(), responses.num_tasks());
    if predictions.shape() != [b, t, k] {
        return Err(ObjectiveError::Shape {
            expected: vec![b, t, k],
            actual: predictions.shape().to_vec(),
        });
    }
    let weights: Vec<f64> = match reduction {
        Reduction::TaskMean => (0..t)
            .map(|task| match responses.observed(task) {
                0 => 0.0,
                n => 1.0 / n as f64,
            })
            .collect(),
        Reduction::ObservedMean => {
            let n = responses.mask.iter().filter(|&&m| m).count();
            vec![if n == 0 { 0.0 } else { 1.0 / n as f64 }; t]
        }
    };

    let mut grads = RealArray::zeros(&[b, t, k]);
    let mut task_sums = vec![0.0; t];
    let heads = predictions.as_slice();
    let out = grads.as_mut_slice();
    let mut g = [0.0; 2];
    for row in 0..b {
        for (task, sum) in task_sums.iter_mut().enumerate() {
            let cell = row * t + task;
            if !responses.mask[cell] {
                continue;
            }
            let y = responses.y.as_slice()[cell];
            objective.validate_response(y)?;
            let h = &heads[cell * k..(cell + 1) * k];
            *sum += objective.sample_loss(h, y, &mut g)?;
            for (o, gv) in out[cell * k..(cell + 1) * k].iter_mut().zip(&g) {
                *o = gv * weights[task];
            }
        }
    }
    let loss = match reduction {
        Reduction::TaskMean => task_sums.iter().zip(&weights).map(|(s, w)| s * w).sum(),
        Reduction::ObservedMean => task_sums.iter().sum::<f64>() * weights.first().copied().unwrap_or(0.0),
    };
    Ok((loss, grads))
}
