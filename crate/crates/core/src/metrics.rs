//! Masked evaluation metrics. `None` marks a metric that is undefined on
//! the given cells (nothing observed, or a single class for AUC).

use crate::data::Dataset;
use crate::kernel::RealArray;
use crate::objective::{batch_objective, Objective, ObjectiveError, Reduction, ResponseBatch};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("predicted mean {0} must be positive for Poisson deviance")]
    NonPositiveMean(f64),
    #[error("negative response {0} in Poisson deviance")]
    NegativeResponse(f64),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

fn check_len(a: usize, b: usize) -> Result<(), MetricError> {
    if a == b {
        Ok(())
    } else {
        Err(MetricError::Length(a, b))
    }
}

/// Mean squared error over observed cells.
pub fn mse(pred: &[f64], y: &[f64], mask: &[bool]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, t), &m) in pred.iter().zip(y).zip(mask) {
        if m {
            sum += (p - t) * (p - t);
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Unit deviance `2 [y log(y/μ) − (y − μ)]`.
pub fn poisson_unit_deviance(mu: f64, y: f64) -> f64 {
    let ylog = if y == 0.0 { 0.0 } else { y * (y / mu).ln() };
    2.0 * (ylog - (y - mu))
}

/// Weighted mean Poisson deviance over observed cells; unit weights give
/// `(2 / N_obs) Σ [y log(y/μ) − (y − μ)]`.
pub fn poisson_deviance(
    mu: &[f64],
    y: &[f64],
    mask: &[bool],
    weights: Option<&[f64]>,
) -> Result<Option<f64>, MetricError> {
    check_len(mu.len(), y.len())?;
    check_len(mu.len(), mask.len())?;
    if let Some(w) = weights {
        check_len(mu.len(), w.len())?;
    }
    let mut sum = 0.0;
    let mut total_w = 0.0;
    for i in 0..mu.len() {
        if !mask[i] {
            continue;
        }
        if mu[i].is_nan() || mu[i] <= 0.0 {
            return Err(MetricError::NonPositiveMean(mu[i]));
        }
        if y[i] < 0.0 {
            return Err(MetricError::NegativeResponse(y[i]));
        }
        let w = weights.map_or(1.0, |w| w[i]);
        sum += w * poisson_unit_deviance(mu[i], y[i]);
        total_w += w;
    }
    Ok((total_w > 0.0).then(|| sum / total_w))
}

/// Area under the ROC curve via average ranks (ties get half credit).
pub fn auc(scores: &[f64], labels: &[bool], mask: &[bool]) -> Option<f64> {
    let mut cells: Vec<(f64, bool)> = scores
        .iter()
        .zip(labels)
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|((&s, &l), _)| (s, l))
        .collect();
    let pos = cells.iter().filter(|c| c.1).count();
    let neg = cells.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    cells.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < cells.len() {
        let mut j = i;
        while j + 1 < cells.len() && cells[j + 1].0 == cells[i].0 {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their average
        let avg = (i + j + 2) as f64 / 2.0;
        rank_sum += avg * cells[i..=j].iter().filter(|c| c.1).count() as f64;
        i = j + 1;
    }
    let (pos, neg) = (pos as f64, neg as f64);
    Some((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub observed: usize,
    /// Per-task mean data loss.
    pub loss: Option<f64>,
    pub mse: Option<f64>,
    pub poisson_deviance: Option<f64>,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub objective: Objective,
    pub rows: usize,
    /// Sum over tasks of per-task mean losses (the training data term).
    pub loss: f64,
    pub tasks: Vec<TaskMetrics>,
}

impl MetricReport {
    /// Mean of the defined per-task values selected by `f`.
    pub fn task_mean(&self, f: impl Fn(&TaskMetrics) -> Option<f64>) -> Option<f64> {
        let vals: Vec<f64> = self.tasks.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Pooled MSE over every observed cell.
    pub fn pooled(&self, f: impl Fn(&TaskMetrics) -> Option<f64>) -> Option<f64> {
        let mut num = 0.0;
        let mut den = 0usize;
        for t in &self.tasks {
            if let Some(v) = f(t) {
                num += v * t.observed as f64;
                den += t.observed;
            }
        }
        (den > 0).then(|| num / den as f64)
    }
}

/// Metrics for raw heads `[B, T, k]` against a dataset's responses.
///
/// MSE compares the implied mean `E[y|x]`. Count objectives also get Poisson
/// deviance of that mean and the AUC of the mean against `y > 0`; logistic
/// gets the AUC of the probability against `y ≥ 0.5`.
pub fn evaluate(objective: Objective, raw: &RealArray, data: &Dataset) -> Result<MetricReport, MetricError> {
    let k = objective.heads_required();
    let (n, t) = (data.len(), data.num_tasks());
    let responses = data.response_batch();
    let (loss, _) = batch_objective(objective, raw, &responses, Reduction::TaskMean)?;
    let means: Vec<f64> = raw.as_slice().chunks(k).map(|h| objective.mean_response(h)).collect();
    let mut tasks = Vec::with_capacity(t);
    for task in 0..t {
        let idx: Vec<usize> = (0..n).map(|r| r * t + task).collect();
        let mu: Vec<f64> = idx.iter().map(|&c| means[c]).collect();
        let y: Vec<f64> = idx.iter().map(|&c| data.responses.as_slice()[c]).collect();
        let mask: Vec<bool> = idx.iter().map(|&c| data.mask[c]).collect();
        let observed = mask.iter().filter(|&&m| m).count();
        let task_loss = {
            let heads: Vec<f64> = idx.iter().flat_map(|&c| raw.as_slice()[c * k..(c + 1) * k].to_vec()).collect();
            let h = RealArray::new(vec![n, 1, k], heads).expect("task heads");
            let r = ResponseBatch::new(RealArray::new(vec![n, 1], y.clone()).expect("task y"), mask.clone())?;
            (observed > 0).then(|| batch_objective(objective, &h, &r, Reduction::TaskMean).map(|v| v.0)).transpose()?
        };
        let (deviance, auc_v) = match objective {
            o if o.is_count() => {
                let labels: Vec<bool> = y.iter().map(|&v| v > 0.0).collect();
                let dev = poisson_deviance(&mu, &y, &mask, None)?;
                (dev, auc(&mu, &labels, &mask))
            }
            Objective::Logistic => {
                let labels: Vec<bool> = y.iter().map(|&v| v >= 0.5).collect();
                (None, auc(&mu, &labels, &mask))
            }
            _ => (None, None),
        };
        tasks.push(TaskMetrics {
            task: data.task_names[task].clone(),
            observed,
            loss: task_loss,
            mse: mse(&mu, &y, &mask),
            poisson_deviance: deviance,
            auc: auc_v,
        });
    }
    Ok(MetricReport {
        objective,
        rows: n,
        loss,
        tasks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn mse_cases() {
        assert_eq!(mse(&[1.0, 2.0], &[1.0, 2.0], &[true, true]), Some(0.0));
        assert_eq!(mse(&[2.0, 3.0], &[1.0, 2.0], &[true, true]), Some(1.0));
        assert_eq!(mse(&[1.0, 2.0], &[0.0, 4.0], &[true, true]), Some(2.5));
        assert_eq!(mse(&[1.0], &[0.0], &[false]), None);
    }

    #[test]
    fn deviance_cases() {
        let all = [true; 3];
        assert_eq!(poisson_deviance(&[1.0, 2.0, 7.0], &[1.0, 2.0, 7.0], &all, None).unwrap(), Some(0.0));
        assert_eq!(poisson_deviance(&[1.0], &[0.0], &[true], None).unwrap(), Some(2.0));
        let d = poisson_deviance(&[1.0], &[2.0], &[true], None).unwrap().unwrap();
        assert!((d - 0.772589).abs() < 1e-6);
        assert_eq!(
            poisson_deviance(&[0.0], &[1.0], &[true], None),
            Err(MetricError::NonPositiveMean(0.0))
        );
        // a masked non-positive mean is never looked at
        assert_eq!(poisson_deviance(&[0.0], &[1.0], &[false], None).unwrap(), None);
        // unit weights give the plain mean; weights rescale contributions
        let w = poisson_deviance(&[1.0, 1.0], &[0.0, 2.0], &[true, true], Some(&[3.0, 1.0])).unwrap().unwrap();
        assert!((w - (3.0 * 2.0 + d) / 4.0).abs() < 1e-15);
    }

    #[test]
    fn auc_cases() {
        let m = [true; 4];
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true], &m), Some(1.0));
        assert_eq!(auc(&[0.5; 4], &[false, false, true, true], &m), Some(0.5));
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true], &m), Some(0.75));
        assert_eq!(auc(&[0.1, 0.4], &[true, true], &[true, true]), None);
    }

    proptest! {
        #[test]
        fn auc_invariant_under_monotone_maps(
            cells in prop::collection::vec((-5.0..5.0f64, any::<bool>()), 2..40),
        ) {
            let s: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let l: Vec<bool> = cells.iter().map(|c| c.1).collect();
            let m = vec![true; s.len()];
            let t: Vec<f64> = s.iter().map(|v| v.exp() * 3.0 + 1.0).collect();
            prop_assert_eq!(auc(&s, &l, &m), auc(&t, &l, &m));
        }

        #[test]
        fn masked_rows_never_change_metrics(
            cells in prop::collection::vec((0.1..5.0f64, 0u32..6), 1..30),
            junk in prop::collection::vec((-5.0..5.0f64, 0u32..6), 1..5),
        ) {
            let mu: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let y: Vec<f64> = cells.iter().map(|c| c.1 as f64).collect();
            let m = vec![true; mu.len()];
            let base = (mse(&mu, &y, &m), poisson_deviance(&mu, &y, &m, None).unwrap());
            let mut mu2 = mu.clone();
            let mut y2 = y.clone();
            let mut m2 = m.clone();
            for (a, b) in junk {
                mu2.push(a);
                y2.push(b as f64);
                m2.push(false);
            }
            prop_assert_eq!(base, (mse(&mu2, &y2, &m2), poisson_deviance(&mu2, &y2, &m2, None).unwrap()));
        }

        #[test]
        fn deviance_is_non_negative(cells in prop::collection::vec((0.01..20.0f64, 0u32..30), 1..30)) {
            let mu: Vec<f64> = cells.iter().map(|c| c.0).collect();
            let y: Vec<f64> = cells.iter().map(|c| c.1 as f64).collect();
            let d = poisson_deviance(&mu, &y, &vec![true; mu.len()], None).unwrap().unwrap();
            prop_assert!(d >= -1e-12);
        }
    }
}
